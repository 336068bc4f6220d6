//! Exact enumeration over small instances: entropies of the masked latent,
//! optimal NELBO values by two routes, the coarsening map and the lemma
//! checks that tie sub-token and token objectives together.
//!
//! Entropies are reported in bits, NELBO values and log-likelihoods in nats.
//! Integrals over time are taken in the substituted variable `s = alpha_t`,
//! where the optimal NELBO is `\int_0^1 CE(s) / (1 - s) ds`.

use std::f64::consts::LN_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{Posterior, Schedule, SubTokenGrid};
use crate::quadrature::Quadrature;
use crate::rng::SplitMix64;
use crate::subtok::{base_for, write_digits, Subtokenizer};

pub const DEFAULT_BUDGET: u64 = 4096;
pub const BUDGET_ENV: &str = "PRIMELAB_BUDGET";
/// Hard cap on the number of cells `L * ell` handled by subset enumeration.
pub const MAX_CELLS: usize = 24;
/// Largest vocabulary accepted by [`best_assignment_bruteforce`].
pub const MAX_BRUTEFORCE_VOCAB: usize = 10;

/// Enumeration budget, overridable through `PRIMELAB_BUDGET`.
pub fn budget_from_env() -> u64 {
    std::env::var(BUDGET_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_BUDGET)
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn ln_or_zero(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats of a (possibly unnormalized-by-rounding) table.
pub fn entropy_nats(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| xlogx(p)).sum::<f64>()
}

/// Binary entropy `h(a)` in nats, with `h(0) = h(1) = 0`.
pub fn binary_entropy_nats(a: f64) -> f64 {
    -xlogx(a) - xlogx(1.0 - a)
}

/// Upper bound on `H(y_t)` in bits: `L ell (h(alpha) + alpha log2 b)`.
pub fn entropy_bound(len: usize, ell: usize, base: usize, alpha: f64) -> f64 {
    (len * ell) as f64 * (binary_entropy_nats(alpha) / LN_2 + alpha * (base as f64).log2())
}

/// An explicit distribution over token sequences of length `len`.
/// Index order: the first token is the most significant digit.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    vocab: usize,
    len: usize,
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn new(vocab: usize, len: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab < 2 || len == 0 {
            return Err(Error::InvalidDistribution(format!("vocab {vocab}, len {len}")));
        }
        let states = checked_states(vocab, len)
            .ok_or_else(|| Error::InvalidDistribution("state space overflows".into()))?;
        if probs.len() as u128 != states {
            return Err(Error::InvalidDistribution(format!("{} probabilities for {states} states", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalized(total));
        }
        Ok(Self { vocab, len, probs })
    }

    pub fn uniform(vocab: usize, len: usize) -> Result<Self> {
        let n = checked_states(vocab, len).unwrap_or(u128::MAX);
        if n > 1 << 28 {
            return Err(Error::BudgetExceeded { needed: n, budget: 1 << 28 });
        }
        Self::new(vocab, len, vec![1.0 / n as f64; n as usize])
    }

    /// Independent positions sharing one marginal.
    pub fn iid(marginal: &[f64], len: usize) -> Result<Self> {
        let vocab = marginal.len();
        let n = checked_states(vocab, len).unwrap_or(u128::MAX);
        if n > 1 << 28 {
            return Err(Error::BudgetExceeded { needed: n, budget: 1 << 28 });
        }
        let mut probs = vec![1.0; n as usize];
        for (idx, p) in probs.iter_mut().enumerate() {
            let mut rest = idx;
            for _ in 0..len {
                *p *= marginal[rest % vocab];
                rest /= vocab;
            }
        }
        Self::new(vocab, len, probs)
    }

    /// First-order Markov chain with initial distribution and row-stochastic transitions.
    pub fn markov(init: &[f64], trans: &[Vec<f64>], len: usize) -> Result<Self> {
        let vocab = init.len();
        if trans.len() != vocab || trans.iter().any(|r| r.len() != vocab) {
            return Err(Error::InvalidDistribution("transition matrix shape".into()));
        }
        let n = checked_states(vocab, len).unwrap_or(u128::MAX);
        if n > 1 << 28 {
            return Err(Error::BudgetExceeded { needed: n, budget: 1 << 28 });
        }
        let mut probs = init.to_vec();
        for _ in 1..len {
            let mut next = Vec::with_capacity(probs.len() * vocab);
            for &p in &probs {
                // the previous token is the least significant digit of the prefix index
                let idx = next.len() / vocab;
                let prev = idx % vocab;
                next.extend(trans[prev].iter().map(|&t| p * t));
            }
            probs = next;
        }
        Self::new(vocab, len, probs)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    pub fn states(&self) -> usize {
        self.probs.len()
    }

    pub fn tokens(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.len];
        for slot in out.iter_mut().rev() {
            *slot = index % self.vocab;
            index /= self.vocab;
        }
        out
    }

    pub fn index(&self, tokens: &[usize]) -> usize {
        tokens.iter().fold(0, |acc, &t| acc * self.vocab + t)
    }

    /// `H(x_0)` in nats.
    pub fn entropy(&self) -> f64 {
        entropy_nats(&self.probs)
    }

    pub fn check_budget(&self, budget: u64) -> Result<()> {
        if self.probs.len() as u64 > budget {
            return Err(Error::BudgetExceeded { needed: self.probs.len() as u128, budget: budget as u128 });
        }
        Ok(())
    }

    /// `q(x_0 | x_t)` for a token-level masked state.
    pub fn posterior(&self, x0: &[usize], xt: &[Option<usize>]) -> f64 {
        if x0.iter().zip(xt).any(|(a, b)| b.map_or(false, |v| v != *a)) {
            return 0.0;
        }
        let mut evidence = 0.0;
        for (idx, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                let toks = self.tokens(idx);
                if toks.iter().zip(xt).all(|(a, b)| b.map_or(true, |v| v == *a)) {
                    evidence += p;
                }
            }
        }
        self.probs[self.index(x0)] / evidence
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> Vec<usize> {
        self.tokens(rng.categorical(&self.probs))
    }

    /// Marginal of a single position.
    pub fn position_marginal(&self, pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for (idx, &p) in self.probs.iter().enumerate() {
            out[self.tokens(idx)[pos]] += p;
        }
        out
    }
}

fn checked_states(vocab: usize, len: usize) -> Option<u128> {
    (vocab as u128).checked_pow(len as u32)
}

/// The data distribution pushed through a subtokenizer: a dense table over
/// all `b^(L ell)` sub-token codes (unused codes carry zero mass).
#[derive(Debug, Clone)]
pub struct SubTokenDist {
    base: usize,
    ell: usize,
    len: usize,
    probs: Vec<f64>,
    support: Vec<(usize, f64)>,
}

impl SubTokenDist {
    pub fn new(q: &TokenDist, st: &Subtokenizer) -> Result<Self> {
        if q.vocab() != st.vocab() {
            return Err(Error::InvalidDistribution(format!(
                "distribution has V = {}, subtokenizer has V = {}",
                q.vocab(),
                st.vocab()
            )));
        }
        let cells = q.len() * st.ell();
        let size = (st.base() as u128).checked_pow(cells as u32).unwrap_or(u128::MAX);
        if cells > MAX_CELLS || size > 1 << 28 {
            return Err(Error::BudgetExceeded { needed: size, budget: 1 << 28 });
        }
        let group = st.code_space();
        let mut probs = vec![0.0; size as usize];
        let mut support = Vec::new();
        for (idx, &p) in q.probs().iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let code = q.tokens(idx).iter().fold(0usize, |acc, &t| acc * group + st.perm()[t] as usize);
            probs[code] += p;
            support.push((code, p));
        }
        support.sort_by_key(|s| s.0);
        Ok(Self { base: st.base(), ell: st.ell(), len: q.len(), probs, support })
    }

    pub fn base(&self) -> usize {
        self.base
    }
    pub fn cells(&self) -> usize {
        self.len * self.ell
    }
    pub fn rows(&self) -> usize {
        self.len
    }
    pub fn cols(&self) -> usize {
        self.ell
    }
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    /// `(code index, probability)` for every code with positive mass.
    pub fn support(&self) -> &[(usize, f64)] {
        &self.support
    }

    pub fn digits(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.cells()];
        write_digits(index, self.base, &mut out);
        out
    }

    /// Marginal of one cell, `cell = row * ell + col`.
    pub fn cell_marginal(&self, cell: usize) -> Vec<f64> {
        let n = self.cells();
        let stride = self.base.pow((n - 1 - cell) as u32);
        let mut out = vec![0.0; self.base];
        for &(code, p) in &self.support {
            out[(code / stride) % self.base] += p;
        }
        out
    }

    /// Dense marginal over the cells selected by `kept` (bit `c` = cell `c`),
    /// computed by projecting every support point.
    pub fn projected_marginal(&self, kept: u32) -> Vec<f64> {
        let proj = Projector::new(self.cells(), self.base, kept);
        let mut out = vec![0.0; proj.size];
        for &(code, p) in &self.support {
            out[proj.project(code)] += p;
        }
        out
    }
}

/// Maps a full code index to the index of its kept cells.
struct Projector {
    strides: Vec<(usize, usize)>,
    base: usize,
    size: usize,
}

impl Projector {
    fn new(cells: usize, base: usize, kept: u32) -> Self {
        let mut strides = Vec::new();
        let mut out_stride = 1;
        for c in (0..cells).rev() {
            if kept >> c & 1 == 1 {
                strides.push((base.pow((cells - 1 - c) as u32), out_stride));
                out_stride *= base;
            }
        }
        Self { strides, base, size: out_stride }
    }

    fn project(&self, code: usize) -> usize {
        self.strides.iter().map(|&(s, o)| (code / s) % self.base * o).sum()
    }
}

/// Entropy (nats) of every subset marginal of a cell table, indexed by the
/// bitmask of kept cells. Computed by a depth-first marginalization that
/// sums out one cell per level.
fn subset_entropies(table: &[f64], cells: usize, base: usize) -> Vec<f64> {
    let mut out = vec![0.0; 1 << cells];
    fn rec(t: &[f64], i: usize, kept: u32, k: usize, cells: usize, base: usize, out: &mut [f64]) {
        if i == cells {
            out[kept as usize] = entropy_nats(t);
            return;
        }
        rec(t, i + 1, kept | 1 << i, k + 1, cells, base, out);
        let inner = base.pow((cells - i - 1) as u32);
        let outer = t.len() / (base * inner);
        let mut next = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut next[o * inner..(o + 1) * inner];
            for v in 0..base {
                let src = &t[(o * base + v) * inner..(o * base + v + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        rec(&next, i + 1, kept, k, cells, base, out);
    }
    rec(table, 0, 0, 0, cells, base, &mut out);
    out
}

fn mask_weight(alpha: f64, kept: usize, cells: usize) -> f64 {
    alpha.powi(kept as i32) * (1.0 - alpha).powi((cells - kept) as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// A sub-token distribution together with the entropies of all its subset
/// marginals. Everything that only depends on which cells are revealed is
/// answered from this cache.
#[derive(Debug, Clone)]
pub struct ExactInstance {
    dist: SubTokenDist,
    subset_h: Vec<f64>,
    /// `sum over |S| = k of H(Y_S)`, nats.
    h_by_size: Vec<f64>,
}

impl ExactInstance {
    pub fn new(q: &TokenDist, st: &Subtokenizer, budget: u64) -> Result<Self> {
        q.check_budget(budget)?;
        let dist = SubTokenDist::new(q, st)?;
        let n = dist.cells();
        let subset_h = subset_entropies(&dist.probs, n, dist.base);
        let mut h_by_size = vec![0.0; n + 1];
        for (mask, h) in subset_h.iter().enumerate() {
            h_by_size[(mask as u32).count_ones() as usize] += h;
        }
        Ok(Self { dist, subset_h, h_by_size })
    }

    pub fn dist(&self) -> &SubTokenDist {
        &self.dist
    }

    pub fn cells(&self) -> usize {
        self.dist.cells()
    }

    /// `H(y_0)`, nats.
    pub fn data_entropy(&self) -> f64 {
        self.subset_h[(1usize << self.cells()) - 1]
    }

    /// Entropy (nats) of the marginal over the kept cells.
    pub fn subset_entropy(&self, kept: u32) -> f64 {
        self.subset_h[kept as usize]
    }

    /// Entropy of the mask pattern, `-sum_M P(M) ln P(M)`, by enumeration over sizes.
    pub fn kernel_entropy(&self, alpha: f64) -> f64 {
        let n = self.cells();
        (0..=n).map(|k| -binomial(n, k) * xlogx(mask_weight(alpha, k, n))).sum()
    }

    /// `H(y_t)` in nats at survival probability `alpha`.
    pub fn latent_entropy(&self, alpha: f64) -> f64 {
        let n = self.cells();
        let revealed: f64 = (0..=n).map(|k| mask_weight(alpha, k, n) * self.h_by_size[k]).sum();
        self.kernel_entropy(alpha) + revealed
    }

    /// `H(y_0, y_t)` in nats.
    pub fn joint_entropy(&self, alpha: f64) -> f64 {
        self.data_entropy() + self.kernel_entropy(alpha)
    }

    /// `E[-ln q(y_0 | y_t)]` through the entropy decomposition.
    pub fn conditional_entropy(&self, alpha: f64) -> f64 {
        self.joint_entropy(alpha) - self.latent_entropy(alpha)
    }

    /// The same quantity evaluated pointwise with the Bayes posterior
    /// `q(y_0 | y_t) = q(y_0) / q(y_S)`, one mask pattern at a time.
    /// Returns `C(k) = sum over |S| = k` of the per-pattern cross-entropy.
    fn posterior_ce_by_size(&self) -> Vec<f64> {
        let n = self.cells();
        let mut by_size = vec![0.0; n + 1];
        for kept in 0..(1u32 << n) {
            let marginal = self.dist.projected_marginal(kept);
            let proj = Projector::new(n, self.dist.base, kept);
            let ce: f64 = self
                .dist
                .support
                .iter()
                .map(|&(code, p)| -p * (p.ln() - marginal[proj.project(code)].ln()))
                .sum();
            by_size[kept.count_ones() as usize] += ce;
        }
        by_size
    }
}

/// `H(y_t)` in bits.
pub fn entropy_yt(q: &TokenDist, st: &Subtokenizer, alpha: f64, budget: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::TimeOutOfRange(alpha));
    }
    Ok(ExactInstance::new(q, st, budget)?.latent_entropy(alpha) / LN_2)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NelboRoutes {
    pub value: f64,
    pub route_decomposition: f64,
    pub route_posterior: f64,
}

/// Infimum of the sub-token objective over joint posteriors, in nats.
pub fn optimal_nelbo(q: &TokenDist, st: &Subtokenizer, quad: &Quadrature, budget: u64) -> Result<NelboRoutes> {
    let inst = ExactInstance::new(q, st, budget)?;
    let n = inst.cells();
    let route_a = quad.integrate(|s| inst.conditional_entropy(s) / (1.0 - s));
    let ce_b = inst.posterior_ce_by_size();
    let route_b = quad.integrate(|s| {
        let ce: f64 = (0..=n).map(|k| mask_weight(s, k, n) * ce_b[k]).sum();
        ce / (1.0 - s)
    });
    if (route_a - route_b).abs() > 1e-6 {
        return Err(Error::RouteMismatch { a: route_a, b: route_b });
    }
    Ok(NelboRoutes { value: route_a, route_decomposition: route_a, route_posterior: route_b })
}

/// Decomposition route only; used for instances too large for the pointwise
/// posterior pass.
pub fn nelbo_by_decomposition(inst: &ExactInstance, quad: &Quadrature) -> f64 {
    quad.integrate(|s| inst.conditional_entropy(s) / (1.0 - s))
}

/// Expected log posterior `E[ln q(y_0 | y_t)]` under the linear schedule, nats.
pub fn loglik_profile(q: &TokenDist, st: &Subtokenizer, t_grid: &[f64], budget: u64) -> Result<Vec<f64>> {
    let inst = ExactInstance::new(q, st, budget)?;
    t_grid
        .iter()
        .map(|&t| {
            let (alpha, _) = Schedule::Linear.alpha(t)?;
            Ok((-inst.conditional_entropy(alpha)).min(0.0))
        })
        .collect()
}

/// Coarsening map: each group of `factor` cells becomes one coarse cell
/// when fully unmasked, else the mask. With `factor == ell` the result is a
/// token grid (one column, base `V`) holding decoded token ids.
pub fn coarsen(yt: &SubTokenGrid, st: &Subtokenizer, factor: usize) -> Result<SubTokenGrid> {
    let ell = st.ell();
    if yt.cols() != ell || yt.base() != st.base() {
        return Err(Error::ShapeMismatch { expected: (yt.rows(), ell), got: (yt.rows(), yt.cols()) });
    }
    if factor == 0 || ell % factor != 0 {
        return Err(Error::IncompatibleBases { from: st.base(), to: 0 });
    }
    let to_tokens = factor == ell;
    let coarse_base = st.base().pow(factor as u32);
    if !to_tokens && base_for(st.vocab(), ell / factor) != coarse_base {
        return Err(Error::IncompatibleBases { from: st.base(), to: base_for(st.vocab(), ell / factor) });
    }
    let out_cols = ell / factor;
    let mut cells = Vec::with_capacity(yt.rows() * out_cols);
    for r in 0..yt.rows() {
        for group in yt.row(r).chunks(factor) {
            let value = group.iter().try_fold(0usize, |acc, c| c.map(|d| acc * st.base() + d));
            cells.push(match value {
                None => None,
                Some(v) if to_tokens => {
                    Some(st.token_of_index(v).ok_or_else(|| Error::InvalidCode(group.iter().flatten().copied().collect()))?)
                }
                Some(v) => Some(v),
            });
        }
    }
    let base = if to_tokens { st.vocab() } else { coarse_base };
    SubTokenGrid::from_cells(yt.rows(), out_cols, base, cells)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CheckPair {
    pub lhs: f64,
    pub rhs: f64,
}

impl CheckPair {
    pub fn diff(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Expectation of `F(x_0, x_t)` under the token kernel at `alpha = 1 - t`
/// (lhs) and of `F(f^-1(y_0), g(y_t))` under the sub-token kernel at
/// `alpha^(1/ell)` (rhs).
pub fn lemma_a1_check<F>(q: &TokenDist, st: &Subtokenizer, f: F, t: f64, budget: u64) -> Result<CheckPair>
where
    F: Fn(&[usize], &[Option<usize>]) -> f64,
{
    q.check_budget(budget)?;
    let (alpha, _) = Schedule::Linear.alpha(t)?;
    let len = q.len();
    let mut lhs = 0.0;
    let mut xt = vec![None; len];
    for (idx, &p) in q.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let x0 = q.tokens(idx);
        for kept in 0..(1u32 << len) {
            let k = kept.count_ones() as usize;
            let w = mask_weight(alpha, k, len);
            if w == 0.0 {
                continue;
            }
            for (i, slot) in xt.iter_mut().enumerate() {
                *slot = if kept >> i & 1 == 1 { Some(x0[i]) } else { None };
            }
            lhs += p * w * f(&x0, &xt);
        }
    }

    let dist = SubTokenDist::new(q, st)?;
    let ell = st.ell();
    let n = dist.cells();
    let alpha_sub = alpha.powf(1.0 / ell as f64);
    let row_mask = (1u32 << ell) - 1;
    let mut rhs = 0.0;
    let mut tokens = vec![0; len];
    let mut digits = vec![0; n];
    for &(code, p) in dist.support() {
        write_digits(code, dist.base(), &mut digits);
        for (i, tok) in tokens.iter_mut().enumerate() {
            *tok = st.decode(&digits[i * ell..(i + 1) * ell])?;
        }
        for kept in 0..(1u32 << n) {
            let w = mask_weight(alpha_sub, kept.count_ones() as usize, n);
            if w == 0.0 {
                continue;
            }
            for (i, slot) in xt.iter_mut().enumerate() {
                let full = (kept >> (i * ell)) & row_mask == row_mask;
                *slot = if full { Some(tokens[i]) } else { None };
            }
            rhs += p * w * f(&tokens, &xt);
        }
    }
    Ok(CheckPair { lhs, rhs })
}

/// `I(alpha) = \int_0^1 alpha'/(1 - alpha) F(alpha) dt` for two schedules,
/// each by quadrature in its own time variable.
pub fn lemma_a3_check<F>(f: F, first: &Schedule, second: &Schedule, quad: &Quadrature) -> CheckPair
where
    F: Fn(f64) -> f64,
{
    let integral = |sched: &Schedule| {
        quad.integrate(|t| {
            let (a, da) = sched.alpha(t).expect("quadrature nodes lie in (0, 1)");
            da / (1.0 - a) * f(a)
        })
    };
    CheckPair { lhs: integral(first), rhs: integral(second) }
}

/// `E[ln q_alpha(y_t | y_0)]` by enumeration of mask patterns (lhs) against
/// `L ell ((1 - alpha) ln(1 - alpha) + alpha ln alpha)` (rhs).
pub fn lemma_a5_check(cells: usize, alpha: f64) -> CheckPair {
    let mut lhs = 0.0;
    for kept in 0..(1u64 << cells) {
        let k = kept.count_ones() as usize;
        let w = mask_weight(alpha, k, cells);
        if w > 0.0 {
            // log-kernel of the pattern: k survivals, n - k maskings
            lhs += w * (k as f64 * ln_or_zero(alpha) + (cells - k) as f64 * ln_or_zero(1.0 - alpha));
        }
    }
    CheckPair { lhs, rhs: cells as f64 * (xlogx(1.0 - alpha) + xlogx(alpha)) }
}

/// Per-cell `H(y_t^{i,j})` by enumeration of the `b + 1` latent states
/// (lhs) against `alpha H(y_0^{i,j}) + h(alpha)` (rhs), nats.
pub fn lemma_a6_check(q: &TokenDist, st: &Subtokenizer, alpha: f64, budget: u64) -> Result<Vec<CheckPair>> {
    q.check_budget(budget)?;
    let dist = SubTokenDist::new(q, st)?;
    Ok((0..dist.cells())
        .map(|c| {
            let marginal = dist.cell_marginal(c);
            let mut latent: Vec<f64> = marginal.iter().map(|p| alpha * p).collect();
            latent.push(1.0 - alpha);
            CheckPair {
                lhs: entropy_nats(&latent),
                rhs: alpha * entropy_nats(&marginal) + binary_entropy_nats(alpha),
            }
        })
        .collect())
}

/// `E_{y_t}[KL(q(y_0 | y_t) || q(y_0 | g(y_t)))]` with `y_t` drawn at
/// survival probability `(1 - t)^(1/factor)`, by explicit per-pattern
/// posteriors.
pub fn kl_equality_gap(q: &TokenDist, st: &Subtokenizer, factor: usize, t: f64, budget: u64) -> Result<f64> {
    q.check_budget(budget)?;
    let ell = st.ell();
    if factor == 0 || ell % factor != 0 {
        return Err(Error::IncompatibleBases { from: st.base(), to: 0 });
    }
    if factor != ell && base_for(st.vocab(), ell / factor) != st.base().pow(factor as u32) {
        return Err(Error::IncompatibleBases { from: st.base(), to: base_for(st.vocab(), ell / factor) });
    }
    let (alpha, _) = Schedule::Linear.alpha(t)?;
    let alpha_sub = alpha.powf(1.0 / factor as f64);
    let dist = SubTokenDist::new(q, st)?;
    let n = dist.cells();
    let group_mask = (1u32 << factor) - 1;
    let mut gap = 0.0;
    for kept in 0..(1u32 << n) {
        let w = mask_weight(alpha_sub, kept.count_ones() as usize, n);
        if w == 0.0 {
            continue;
        }
        let mut coarse = 0u32;
        for g in 0..n / factor {
            let bits = group_mask << (g * factor);
            if kept & bits == bits {
                coarse |= bits;
            }
        }
        if coarse == kept {
            continue;
        }
        let fine_m = dist.projected_marginal(kept);
        let coarse_m = dist.projected_marginal(coarse);
        let pf = Projector::new(n, dist.base(), kept);
        let pc = Projector::new(n, dist.base(), coarse);
        // sum over y_t of q(y_t) * KL: the posterior ratio is q(y_S') / q(y_S)
        let kl: f64 = dist
            .support()
            .iter()
            .map(|&(code, p)| p * (coarse_m[pc.project(code)].ln() - fine_m[pf.project(code)].ln()))
            .sum();
        gap += w * kl;
    }
    Ok(gap.max(0.0))
}

/// Per-position marginals of a joint table over `b^ell` codes (MSB first).
pub fn marginalize_group(joint: &[f64], base: usize, ell: usize) -> Result<Vec<Vec<f64>>> {
    if base.checked_pow(ell as u32) != Some(joint.len()) {
        return Err(Error::InvalidDistribution(format!("{} entries for base {base}, length {ell}", joint.len())));
    }
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::NotNormalized(total));
    }
    let mut out = vec![vec![0.0; base]; ell];
    let mut digits = vec![0; ell];
    for (code, &p) in joint.iter().enumerate() {
        write_digits(code, base, &mut digits);
        for (j, &d) in digits.iter().enumerate() {
            out[j][d] += p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Assignment {
    pub perm: Vec<u32>,
    pub total_entropy_bits: f64,
    pub avg_entropy_bits: f64,
}

/// Exhaustive search over all permutations for the one maximizing the sum
/// of per-position sub-token entropies. Ties go to the lexicographically
/// smallest permutation.
pub fn best_assignment_bruteforce(probs: &[f64], ell: usize) -> Result<Assignment> {
    let vocab = probs.len();
    if vocab > MAX_BRUTEFORCE_VOCAB {
        let needed = (1..=vocab as u128).product();
        return Err(Error::BudgetExceeded { needed, budget: (1..=MAX_BRUTEFORCE_VOCAB as u128).product() });
    }
    // validates vocab and ell
    let st = Subtokenizer::build(vocab, ell, crate::subtok::Strategy::Identity)?;
    let base = st.base();
    let digits: Vec<Vec<usize>> = (0..vocab)
        .map(|v| {
            let mut d = vec![0; ell];
            write_digits(v, base, &mut d);
            d
        })
        .collect();
    let score = |perm: &[u32], scratch: &mut Vec<f64>| -> f64 {
        scratch.iter_mut().for_each(|x| *x = 0.0);
        for (tok, &p) in probs.iter().enumerate() {
            for (j, &d) in digits[perm[tok] as usize].iter().enumerate() {
                scratch[j * base + d] += p;
            }
        }
        -scratch.iter().map(|&p| xlogx(p)).sum::<f64>() / LN_2
    };
    let mut scratch = vec![0.0; ell * base];
    let mut perm: Vec<u32> = (0..vocab as u32).collect();
    let mut best = (score(&perm, &mut scratch), perm.clone());
    while next_permutation(&mut perm) {
        let s = score(&perm, &mut scratch);
        if s > best.0 + 1e-12 {
            best = (s, perm.clone());
        }
    }
    Ok(Assignment { perm: best.1, total_entropy_bits: best.0, avg_entropy_bits: best.0 / ell as f64 })
}

fn next_permutation(v: &mut [u32]) -> bool {
    let Some(i) = v.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = v.iter().rposition(|&x| x > v[i]).expect("pivot has a successor");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// The exact Bayes posterior `q(y_0 | y_t)` of an enumerable instance.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    dist: SubTokenDist,
}

impl ExactPosterior {
    pub fn new(q: &TokenDist, st: &Subtokenizer) -> Result<Self> {
        Ok(Self { dist: SubTokenDist::new(q, st)? })
    }

    fn consistent<'a>(&'a self, yt: &'a SubTokenGrid) -> impl Iterator<Item = (usize, f64, Vec<usize>)> + 'a {
        let base = self.dist.base();
        self.dist.support().iter().filter_map(move |&(code, p)| {
            let digits = self.dist.digits(code);
            let ok = yt.cells().iter().zip(&digits).all(|(c, d)| c.map_or(true, |v| v == *d));
            let _ = base;
            ok.then_some((code, p, digits))
        })
    }

    fn check_shape(&self, yt: &SubTokenGrid) -> Result<()> {
        if yt.rows() != self.dist.rows() || yt.cols() != self.dist.cols() {
            return Err(Error::ShapeMismatch {
                expected: (self.dist.rows(), self.dist.cols()),
                got: (yt.rows(), yt.cols()),
            });
        }
        Ok(())
    }
}

impl Posterior for ExactPosterior {
    fn cell_probs(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check_shape(yt)?;
        let base = self.dist.base();
        let mut out = vec![vec![0.0; base]; yt.len()];
        let mut total = 0.0;
        for (_, p, digits) in self.consistent(yt) {
            total += p;
            for (cell, d) in out.iter_mut().zip(digits) {
                cell[d] += p;
            }
        }
        if total > 0.0 {
            out.iter_mut().flatten().for_each(|p| *p /= total);
        } else {
            // y_t outside the support of the data: fall back to carry-over + uniform
            for (cell, c) in out.iter_mut().zip(yt.cells()) {
                match c {
                    Some(v) => cell[*v] = 1.0,
                    None => cell.iter_mut().for_each(|p| *p = 1.0 / base as f64),
                }
            }
        }
        Ok(out)
    }

    /// Joint draw from the posterior over whole codes.
    fn draw(&self, yt: &SubTokenGrid, rng: &mut SplitMix64) -> Result<SubTokenGrid> {
        self.check_shape(yt)?;
        let candidates: Vec<(f64, Vec<usize>)> = self.consistent(yt).map(|(_, p, d)| (p, d)).collect();
        if candidates.is_empty() {
            let probs = self.cell_probs(yt)?;
            let cells = probs.iter().map(|p| Some(rng.categorical(p))).collect();
            return SubTokenGrid::from_cells(yt.rows(), yt.cols(), yt.base(), cells);
        }
        let weights: Vec<f64> = candidates.iter().map(|c| c.0).collect();
        let pick = &candidates[rng.categorical(&weights)].1;
        SubTokenGrid::from_cells(yt.rows(), yt.cols(), yt.base(), pick.iter().map(|&d| Some(d)).collect())
    }
}
