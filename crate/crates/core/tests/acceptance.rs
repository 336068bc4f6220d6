//! Acceptance criteria. Each test prints a single PASS/FAIL line to the
//! real stderr (bypassing the harness capture) and then asserts.
//! Tests hold a shared lock so timing measurements are not disturbed by
//! each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use primelab::corpus::{subtoken_entropies, zipf_counts, zipf_probs};
use primelab::kernels::{sample, Schedule, SubTokenGrid};
use primelab::oracle::{
    best_assignment_bruteforce, entropy_bound, kl_equality_gap, lemma_a1_check, lemma_a3_check, lemma_a5_check,
    lemma_a6_check, nelbo_by_decomposition, optimal_nelbo, ExactInstance, ExactPosterior, TokenDist,
};
use primelab::scaling::{exponents, fit, log_grid, optimal_allocation, synthetic_points, ScalingFit};
use primelab::spectra::{singular_values, stable_rank, DenseMatrix};
use primelab::subtok::{base_for, Strategy, StrategyKind, Subtokenizer};
use primelab::trainer::{eval_nelbo, gradcheck, train, EvalConfig, MarkovChain, ToyModel, TrainConfig};
use primelab::{Quadrature, SplitMix64};
use statrs::distribution::{ChiSquared, ContinuousCDF};

static LOCK: Mutex<()> = Mutex::new(());
const BUDGET: u64 = 1 << 16;

/// Named sub-checks of one criterion.
#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.0.push((name.into(), ok));
    }

    fn close(&mut self, name: impl Into<String>, got: f64, want: f64, tol: f64) {
        let name = name.into();
        self.check(format!("{name}: {got} vs {want} (tol {tol:e})"), (got - want).abs() <= tol);
    }

    fn finish(self, id: u32, title: &str, start: Instant) {
        let failed: Vec<&str> = self.0.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        let secs = start.elapsed().as_secs_f64();
        let line = if failed.is_empty() {
            format!("\ncriterion {id:>2} PASS  {title} ({} checks, {secs:.1}s)\n", self.0.len())
        } else {
            format!("\ncriterion {id:>2} FAIL  {title} ({}/{} failed, {secs:.1}s): {}\n", failed.len(), self.0.len(), failed.join("; "))
        };
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(failed.is_empty(), "{line}");
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn identity(vocab: usize, ell: usize) -> Subtokenizer {
    Subtokenizer::build(vocab, ell, Strategy::Identity).unwrap()
}

#[test]
fn criterion_01_maximum_subtoken_entropy() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    for (ell, b, want) in [(16, 2, 1.0000), (8, 4, 2.0000), (4, 15, 3.9069), (2, 225, 7.8138)] {
        let got = base_for(50257, ell);
        c.check(format!("ell={ell} base {got} vs {b}"), got == b);
        let max = -(1.0 / got as f64).log2();
        c.close(format!("ell={ell} maximum"), (max * 1e4).round() / 1e4, want, 1e-12);
    }
    c.finish(1, "maximum sub-token entropy for V=50257", start);
}

#[test]
fn criterion_02_allocation_exponents() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    // (alpha, beta, E) with A = B = 400, and the reported (a_hat, b_hat)
    let rows = [
        ("ARM", 0.35, 0.28, 1.97, 0.45, 0.55),
        ("MDM", 0.35, 0.26, 2.23, 0.43, 0.57),
        ("sub-token MDM", 0.37, 0.26, 1.30, 0.42, 0.58),
    ];
    for (name, alpha, beta, e, a_hat, b_hat) in rows {
        let x = exponents(&ScalingFit::new(e, 400.0, 400.0, alpha, beta));
        c.close(format!("{name} a_hat"), x.a_hat, a_hat, 0.02);
        c.close(format!("{name} b_hat"), x.b_hat, b_hat, 0.02);
    }
    c.finish(2, "compute-optimal allocation exponents", start);
}

fn sweep_instances() -> Vec<(&'static str, TokenDist, Subtokenizer, bool)> {
    let zipf4 = [0.5, 0.25, 0.15, 0.10];
    let sticky: Vec<Vec<f64>> = (0..4).map(|a| (0..4).map(|b| if a == b { 0.7 } else { 0.1 }).collect()).collect();
    let z16 = zipf_probs(16, 1.0);
    vec![
        ("product-uniform V4 L2 ell2", TokenDist::uniform(4, 2).unwrap(), identity(4, 2), true),
        ("product-uniform V8 L1 ell3", TokenDist::uniform(8, 1).unwrap(), identity(8, 3), true),
        ("zipf V4 L2 ell2", TokenDist::iid(&zipf4, 2).unwrap(), identity(4, 2), false),
        ("zipf V4 L2 ell2 shuffled", TokenDist::iid(&zipf4, 2).unwrap(), Subtokenizer::build(4, 2, Strategy::Random(5)).unwrap(), false),
        ("markov V4 L3 ell2", TokenDist::markov(&zipf4, &sticky, 3).unwrap(), identity(4, 2), false),
        ("zipf V16 L1 ell4", TokenDist::iid(&z16, 1).unwrap(), identity(16, 4), false),
        ("zipf V6 L2 ell2 (b=3, partial code space)", TokenDist::iid(&zipf_probs(6, 1.0), 2).unwrap(), identity(6, 2), false),
    ]
}

#[test]
fn criterion_03_latent_entropy_bound() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    for (name, q, st, equality) in sweep_instances() {
        let inst = ExactInstance::new(&q, &st, BUDGET).unwrap();
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut worst_eq: f64 = 0.0;
        for i in 0..=20 {
            let alpha = i as f64 / 20.0;
            let h = inst.latent_entropy(alpha) / std::f64::consts::LN_2;
            let bound = entropy_bound(q.len(), st.ell(), st.base(), alpha);
            worst = worst.max(h - bound);
            worst_eq = worst_eq.max((h - bound).abs());
        }
        c.check(format!("{name}: max H - bound = {worst:e}"), worst <= 1e-9);
        if equality {
            c.check(format!("{name}: max |H - bound| = {worst_eq:e}"), worst_eq <= 1e-9);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 10s"), secs < 10.0);
    c.finish(3, "latent entropy bound over 21 alphas", start);
}

#[test]
fn criterion_04_routes_granularity_single_token() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let quad = Quadrature::default();
    for (name, q, st, _) in sweep_instances() {
        let r = optimal_nelbo(&q, &st, &quad, BUDGET).unwrap();
        c.close(format!("{name}: routes"), r.route_decomposition, r.route_posterior, 1e-8);
    }
    // nested bases 16 -> 4 -> 2
    let z16 = zipf_probs(16, 1.0);
    let sticky: Vec<Vec<f64>> =
        (0..16).map(|a| (0..16).map(|b| if b == (a + 1) % 16 { 0.6 } else { 0.4 * z16[b] / (1.0 - z16[(a + 1) % 16]) }).collect()).collect();
    let nested = [
        ("zipf V16 L1", TokenDist::iid(&z16, 1).unwrap()),
        ("zipf V16 L2", TokenDist::iid(&z16, 2).unwrap()),
        ("markov V16 L2", TokenDist::markov(&z16, &sticky, 2).unwrap()),
        ("uniform V16 L1", TokenDist::uniform(16, 1).unwrap()),
    ];
    for (name, q) in &nested {
        let mut prev: Option<(usize, f64)> = None;
        for ell in [1, 2, 4] {
            let r = optimal_nelbo(q, &identity(16, ell), &quad, BUDGET).unwrap();
            c.close(format!("{name} ell={ell}: routes"), r.route_decomposition, r.route_posterior, 1e-8);
            if let Some((pe, pv)) = prev {
                let gap = pv - r.value;
                c.check(format!("{name}: nelbo(ell={pe}) - nelbo(ell={ell}) = {gap:e} >= -1e-8"), gap >= -1e-8);
            }
            prev = Some((ell, r.value));
        }
    }
    for (name, q) in [
        ("zipf V16", TokenDist::iid(&z16, 1).unwrap()),
        ("uniform V5", TokenDist::uniform(5, 1).unwrap()),
        ("skewed V3", TokenDist::iid(&[0.9, 0.07, 0.03], 1).unwrap()),
    ] {
        let v = optimal_nelbo(&q, &identity(q.vocab(), 1), &quad, BUDGET).unwrap().value;
        c.close(format!("{name}: single-token nelbo = H(x0)"), v, q.entropy(), 1e-8);
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 30s"), secs < 30.0);
    c.finish(4, "nelbo routes, granularity order, single-token value", start);
}

#[test]
fn criterion_05_transfer_invariance_closed_forms() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let quad = Quadrature::default();
    let zipf4 = [0.5, 0.25, 0.15, 0.10];
    let q = TokenDist::iid(&zipf4, 2).unwrap();
    let st = Subtokenizer::build(4, 2, Strategy::Random(3)).unwrap();

    // transfer between token and sub-token kernels, three choices of F
    for t in [0.3, 0.7] {
        let r = lemma_a1_check(&q, &st, |_, _| 1.0, t, BUDGET).unwrap();
        c.close(format!("A1 F=1 t={t}"), r.lhs, r.rhs, 1e-10);
        let r = lemma_a1_check(&q, &st, |x0, xt| xt.iter().zip(x0).filter(|(a, _)| a.is_some()).map(|(_, &x)| x as f64).sum(), t, BUDGET).unwrap();
        c.close(format!("A1 F=sum of revealed ids t={t}"), r.lhs, r.rhs, 1e-10);
        let r = lemma_a1_check(&q, &st, |x0, xt| -q.posterior(x0, xt).ln(), t, BUDGET).unwrap();
        c.close(format!("A1 F=-log posterior t={t}"), r.lhs, r.rhs, 1e-10);
    }

    // schedule invariance
    let inst = ExactInstance::new(&q, &st, BUDGET).unwrap();
    for sched in [Schedule::power(2.0), Schedule::power(3.0)] {
        let r = lemma_a3_check(|s| inst.conditional_entropy(s), &Schedule::Linear, &sched, &quad);
        c.close(format!("A3 linear vs {sched:?}"), r.lhs, r.rhs, 1e-6);
    }

    // closed forms
    for alpha in [0.0, 0.2, 0.5, 0.9, 1.0] {
        let r = lemma_a5_check(4, alpha);
        c.close(format!("A5 alpha={alpha}"), r.lhs, r.rhs, 1e-10);
        for (cell, r) in lemma_a6_check(&q, &st, alpha, BUDGET).unwrap().into_iter().enumerate() {
            c.close(format!("A6 cell {cell} alpha={alpha}"), r.lhs, r.rhs, 1e-10);
        }
    }

    // KL gap: zero on product-uniform data, nonnegative everywhere
    let uni = TokenDist::uniform(4, 2).unwrap();
    for t in [0.2, 0.5, 0.8] {
        let gap = kl_equality_gap(&uni, &identity(4, 2), 2, t, BUDGET).unwrap();
        c.check(format!("KL gap product-uniform V4 L2 t={t}: {gap:e} <= 1e-10"), gap.abs() <= 1e-10);
    }
    for (name, q, st, _) in sweep_instances() {
        if st.ell() < 2 {
            continue;
        }
        for t in [0.2, 0.5, 0.8] {
            let gap = kl_equality_gap(&q, &st, st.ell(), t, BUDGET).unwrap();
            c.check(format!("KL gap {name} t={t}: {gap:e} >= 0"), gap >= 0.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 30s"), secs < 30.0);
    c.finish(5, "transfer, schedule invariance, closed forms, KL gap", start);
}

#[test]
fn criterion_06_assignment_ordering() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let quad = Quadrature::default();

    let probs = zipf_probs(8, 1.0);
    let q = TokenDist::iid(&probs, 1).unwrap();
    let best = best_assignment_bruteforce(&probs, 3).unwrap();
    let st_best = Subtokenizer::from_perm(8, 3, best.perm.clone(), StrategyKind::Greedy, None).unwrap();
    let nb = optimal_nelbo(&q, &st_best, &quad, BUDGET).unwrap().value;
    let ni = optimal_nelbo(&q, &identity(8, 3), &quad, BUDGET).unwrap().value;
    c.check(format!("zipf V8 ell3: best {nb} < identity {ni} by > 1e-6"), ni - nb > 1e-6);

    let counts = zipf_counts(50257, 1.0, 1 << 40);
    let id = subtoken_entropies(&counts, &identity(50257, 16)).unwrap().average;
    let randoms: Vec<f64> = (1..=3)
        .map(|s| subtoken_entropies(&counts, &Subtokenizer::build(50257, 16, Strategy::Random(s)).unwrap()).unwrap().average)
        .collect();
    for (s, r) in randoms.iter().enumerate() {
        c.check(format!("random seed {}: {r:.4} >= 0.99", s + 1), *r >= 0.99);
        c.check(format!("identity {id:.4} < random seed {} {r:.4}", s + 1), id < *r);
    }
    let mean = randoms.iter().sum::<f64>() / randoms.len() as f64;
    let greedy = subtoken_entropies(&counts, &Subtokenizer::build(50257, 16, Strategy::Greedy(counts.counts())).unwrap()).unwrap().average;
    c.check(format!("greedy {greedy:.4} >= mean random {mean:.4}"), greedy >= mean);
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 60s"), secs < 60.0);
    c.finish(6, "assignment ordering", start);
}

#[test]
fn criterion_07_scaling_fit_recovery() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let truth = ScalingFit::new(1.30, 400.0, 400.0, 0.37, 0.26);
    let n_grid = log_grid(1e7, 1e10, 6);
    let d_grid = log_grid(1e9, 1e12, 4);

    let clean = fit(&synthetic_points(&truth, &n_grid, &d_grid, 0.0, 0)).unwrap().fit;
    c.close("noiseless E", clean.e, truth.e, 1e-6);
    c.close("noiseless A (relative)", clean.a / truth.a, 1.0, 1e-6);
    c.close("noiseless B (relative)", clean.b / truth.b, 1.0, 1e-6);
    c.close("noiseless alpha", clean.alpha_n, truth.alpha_n, 1e-6);
    c.close("noiseless beta", clean.beta_d, truth.beta_d, 1e-6);

    let noisy = fit(&synthetic_points(&truth, &n_grid, &d_grid, 0.005, 11)).unwrap().fit;
    c.close("noisy alpha", noisy.alpha_n, truth.alpha_n, 0.02);
    c.close("noisy beta", noisy.beta_d, truth.beta_d, 0.02);
    let (xn, xt) = (exponents(&noisy), exponents(&truth));
    c.close("noisy a_hat", xn.a_hat, xt.a_hat, 0.02);
    c.close("noisy b_hat", xn.b_hat, xt.b_hat, 0.02);

    for compute in [1e18, 1e21, 1e24] {
        let a = optimal_allocation(&clean, compute);
        c.close(format!("N D = C/6 at C={compute:e} (relative)"), a.n_opt * a.d_opt / (compute / 6.0), 1.0, 1e-12);
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 60s"), secs < 60.0);
    c.finish(7, "scaling fit recovery", start);
}

#[test]
fn criterion_08_trainer() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let quad = Quadrature::default();
    let chain = MarkovChain::sticky_zipf(16, 1.0, 0.05);
    let q = chain.to_dist(4).unwrap();
    let eval_cfg = EvalConfig { mc_samples: 100_000, ..EvalConfig::default() };
    let optimum = |st: &Subtokenizer| nelbo_by_decomposition(&ExactInstance::new(&q, st, BUDGET).unwrap(), &quad);

    // gradients on 20 sampled parameters
    let st = identity(16, 4);
    let model = ToyModel::init(st.clone(), 4, 32, 64, 1);
    let mut rng = SplitMix64::new(2);
    let batch: Vec<SubTokenGrid> = (0..8).map(|_| SubTokenGrid::encode(&st, &chain.sample(4, &mut rng)).unwrap()).collect();
    let g = gradcheck(&model, &batch, &Schedule::Linear, 3, 20, 4, 1e-5).unwrap();
    let worst = g.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    c.check(format!("gradcheck on {} parameters: max rel err {worst:e} < 1e-4", g.len()), g.len() == 20 && worst < 1e-4);

    // small models evaluated exactly never beat the optimum
    let small_q = TokenDist::iid(&[0.4, 0.3, 0.2, 0.1], 2).unwrap();
    for (ell, seed) in [(1, 1), (2, 2), (2, 3)] {
        let st = Subtokenizer::build(4, ell, Strategy::Random(seed)).unwrap();
        let opt = nelbo_by_decomposition(&ExactInstance::new(&small_q, &st, BUDGET).unwrap(), &quad);
        let cfg = TrainConfig { vocab: 4, ell, len: 2, d: 8, h: 16, steps: 300, batch: 16, seed, strategy: StrategyKind::Random, perm_seed: seed, ..TrainConfig::default() };
        let trained = train(&cfg, |r| small_q.sample(r)).unwrap().model;
        for (label, m) in [("init", ToyModel::init(st.clone(), 2, 8, 16, seed)), ("trained", trained)] {
            let e = eval_nelbo(&m, &small_q, &st, &quad, &eval_cfg).unwrap();
            c.check(format!("V4 L2 ell={ell} {label}: exact eval {:.6} >= optimum {opt:.6} - 1e-8", e.value), e.exact && e.value >= opt - 1e-8);
        }
    }

    // three seeds for each configuration
    let configs = [("ell=4 identity", 4, StrategyKind::Identity), ("ell=4 shuffled", 4, StrategyKind::Random), ("ell=1", 1, StrategyKind::Identity)];
    let mut means = Vec::new();
    for (label, ell, strategy) in configs {
        let mut vals = Vec::new();
        for seed in 1..=3u64 {
            let cfg = TrainConfig { ell, strategy, seed, perm_seed: seed, ..TrainConfig::default() };
            let st = cfg.subtokenizer().unwrap();
            let opt = optimum(&st);
            let t0 = Instant::now();
            let model = train(&cfg, |r| chain.sample(4, r)).unwrap().model;
            let secs = t0.elapsed().as_secs_f64();
            let e = eval_nelbo(&model, &q, &st, &quad, &EvalConfig { seed, ..eval_cfg }).unwrap();
            c.check(format!("{label} seed {seed}: eval {:.4} >= optimum {opt:.4} - 1e-8", e.value), e.value >= opt - 1e-8);
            if ell == 4 && strategy == StrategyKind::Identity && seed == 1 {
                c.check(format!("{label} seed 1: {:.4} within 5% of optimum {opt:.4}", e.value), e.value <= 1.05 * opt);
                c.check(format!("{label} seed 1: trained in {secs:.1}s < 60s"), secs < 60.0);
            }
            vals.push(e.value);
        }
        means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let (ident, shuffled, coarse) = (means[0], means[1], means[2]);
    c.check(format!("mean nelbo shuffled {shuffled:.4} <= identity {ident:.4}"), shuffled <= ident);
    c.check(format!("mean nelbo ell=4 {ident:.4} <= ell=1 {coarse:.4}"), ident <= coarse);
    c.finish(8, "trainer gradients, bound, convergence and trends", start);
}

#[test]
fn criterion_09_sampler_goodness_of_fit() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    let chain = MarkovChain::sticky_zipf(8, 1.0, 0.3);
    let q = chain.to_dist(2).unwrap();
    let st = Subtokenizer::build(8, 3, Strategy::Random(9)).unwrap();
    let posterior = ExactPosterior::new(&q, &st).unwrap();
    let n = 20_000;
    let mut counts = vec![0u64; q.states()];
    for i in 0..n {
        let x = sample(&posterior, &st, 2, 64, &Schedule::Linear, 1000 + i as u64).unwrap();
        counts[q.index(&x)] += 1;
    }
    let mut chi2 = 0.0;
    let mut cells = 0;
    for (&o, &p) in counts.iter().zip(q.probs()) {
        if p > 0.0 {
            let e = p * n as f64;
            chi2 += (o as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            c.check("no samples outside the support", o == 0);
        }
    }
    let p_value = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    c.check(format!("chi2 {chi2:.2} on {} dof, p = {p_value:.4} > 0.01", cells - 1), p_value > 0.01);
    let secs = start.elapsed().as_secs_f64();
    c.check(format!("runtime {secs:.2}s < 60s"), secs < 60.0);
    c.finish(9, "ancestral sampler matches the data distribution", start);
}

#[test]
fn criterion_10_spectra_identities() {
    let _g = lock();
    let start = Instant::now();
    let mut c = Checks::default();
    for n in [1, 3, 8, 20] {
        c.close(format!("stable rank of I_{n}"), stable_rank(&DenseMatrix::identity(n)).unwrap(), n as f64, 1e-12);
    }
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [2.0, 1.0, -1.0];
    let outer = DenseMatrix::new(4, 3, u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect()).unwrap();
    c.close("stable rank of a rank-1 matrix", stable_rank(&outer).unwrap(), 1.0, 1e-9);
    c.close("stable rank of its transpose", stable_rank(&outer.transpose()).unwrap(), 1.0, 1e-9);
    let mut rng = SplitMix64::new(5);
    for (r, k) in [(5, 5), (7, 3), (3, 9), (16, 12)] {
        let m = DenseMatrix::new(r, k, (0..r * k).map(|_| rng.normal()).collect()).unwrap();
        let sum: f64 = singular_values(&m).unwrap().iter().map(|s| s * s).sum();
        c.close(format!("sum sigma^2 = |M|_F^2 for {r}x{k}"), sum, m.frobenius_sq(), 1e-9 * m.frobenius_sq().max(1.0));
    }
    c.finish(10, "stable rank and singular value identities", start);
}
