//! Scheduling functions, the forward masking kernel, the reverse unmasking
//! step and the ancestral sampler over sub-token grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::subtok::{write_digits, Subtokenizer};

/// Maximum number of redraws for a row that decodes to an unused code.
pub const MAX_ROW_REDRAWS: usize = 16;

/// A strictly decreasing schedule with `alpha(0) = 1` and `alpha(1) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Power { k: f64 },
    /// `alpha(t)^(1/ell)` of the inner schedule.
    RootSubstituted { base: Box<Schedule>, ell: usize },
}

impl Schedule {
    pub fn power(k: f64) -> Self {
        assert!(k > 0.0 && k.is_finite(), "power schedule needs k > 0");
        Schedule::Power { k }
    }

    pub fn root_substituted(base: Schedule, ell: usize) -> Self {
        assert!(ell >= 1);
        Schedule::RootSubstituted { base: Box::new(base), ell }
    }

    /// `(alpha(t), alpha'(t))`.
    pub fn alpha(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(self.alpha_unchecked(t))
    }

    fn alpha_unchecked(&self, t: f64) -> (f64, f64) {
        match self {
            Schedule::Linear => (1.0 - t, -1.0),
            Schedule::Power { k } => {
                let r = 1.0 - t;
                (r.powf(*k), -k * r.powf(k - 1.0))
            }
            Schedule::RootSubstituted { base, ell } => {
                let (a, da) = base.alpha_unchecked(t);
                let p = 1.0 / *ell as f64;
                let value = a.powf(p);
                let deriv = if a > 0.0 { p * value / a * da } else { f64::NEG_INFINITY };
                (value, deriv)
            }
        }
    }

    /// Loss weight `w(t) = alpha'(t) / (alpha(t) - 1)`.
    pub fn weight(&self, t: f64) -> Result<f64> {
        let (a, da) = self.alpha(t)?;
        Ok(da / (a - 1.0))
    }
}

/// An `L x ell` grid of sub-tokens; `None` is the mask state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubTokenGrid {
    rows: usize,
    cols: usize,
    base: usize,
    cells: Vec<Option<usize>>,
}

impl SubTokenGrid {
    pub fn masked(rows: usize, cols: usize, base: usize) -> Self {
        Self { rows, cols, base, cells: vec![None; rows * cols] }
    }

    pub fn from_cells(rows: usize, cols: usize, base: usize, cells: Vec<Option<usize>>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch { expected: (rows, cols), got: (cells.len(), 1) });
        }
        if let Some(bad) = cells.iter().flatten().find(|&&v| v >= base) {
            return Err(Error::InvalidCode(vec![*bad]));
        }
        Ok(Self { rows, cols, base, cells })
    }

    /// Mask-free grid holding the codes of `tokens`.
    pub fn encode(st: &Subtokenizer, tokens: &[usize]) -> Result<Self> {
        let ell = st.ell();
        let mut digits = vec![0; tokens.len() * ell];
        for (pos, (&tok, chunk)) in tokens.iter().zip(digits.chunks_mut(ell)).enumerate() {
            st.encode_into(tok, chunk).map_err(|e| match e {
                Error::TokenOutOfRange { token, vocab, .. } => {
                    Error::TokenOutOfRange { token, vocab, position: Some(pos) }
                }
                other => other,
            })?;
        }
        Ok(Self { rows: tokens.len(), cols: ell, base: st.base(), cells: digits.into_iter().map(Some).collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn base(&self) -> usize {
        self.base
    }
    pub fn len(&self) -> usize {
        self.cells.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
    pub fn cells(&self) -> &[Option<usize>] {
        &self.cells
    }
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.cells[row * self.cols + col]
    }
    pub fn set(&mut self, row: usize, col: usize, value: Option<usize>) {
        assert!(value.map_or(true, |v| v < self.base), "cell value out of range");
        self.cells[row * self.cols + col] = value;
    }
    pub fn row(&self, row: usize) -> &[Option<usize>] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }
    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }
    pub fn is_mask_free(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Decode every row; fails if any cell is masked or a row is an unused code.
    pub fn decode(&self, st: &Subtokenizer) -> Result<Vec<usize>> {
        let mut digits = vec![0; self.cols];
        (0..self.rows)
            .map(|r| {
                for (d, c) in digits.iter_mut().zip(self.row(r)) {
                    *d = c.ok_or_else(|| Error::InvalidCode(vec![]))?;
                }
                st.decode(&digits)
            })
            .collect()
    }

    fn check_same_shape(&self, other: &SubTokenGrid) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch { expected: (self.rows, self.cols), got: (other.rows, other.cols) });
        }
        Ok(())
    }
}

/// Independently mask each cell with probability `1 - alpha(t)`.
pub fn forward_mask(y0: &SubTokenGrid, schedule: &Schedule, t: f64, seed: u64) -> Result<SubTokenGrid> {
    if !y0.is_mask_free() {
        return Err(Error::InvalidConfig("forward_mask expects a mask-free grid".into()));
    }
    let (alpha, _) = schedule.alpha(t)?;
    let mut out = y0.clone();
    for r in 0..y0.rows {
        for c in 0..y0.cols {
            let u = SplitMix64::keyed(seed, &[r as u64, c as u64]).next_f64();
            if u >= alpha {
                out.cells[r * y0.cols + c] = None;
            }
        }
    }
    Ok(out)
}

/// One reverse transition from time `t` to the earlier time `s`.
pub fn reverse_step(
    yt: &SubTokenGrid,
    y0_draw: &SubTokenGrid,
    schedule: &Schedule,
    s: f64,
    t: f64,
    seed: u64,
) -> Result<SubTokenGrid> {
    if s >= t {
        return Err(Error::TimeOrderError { s, t });
    }
    yt.check_same_shape(y0_draw)?;
    let (alpha_s, _) = schedule.alpha(s)?;
    let (alpha_t, _) = schedule.alpha(t)?;
    let p_unmask = if alpha_t < 1.0 { ((alpha_s - alpha_t) / (1.0 - alpha_t)).clamp(0.0, 1.0) } else { 1.0 };
    let mut out = yt.clone();
    for r in 0..yt.rows {
        for c in 0..yt.cols {
            let i = r * yt.cols + c;
            let drawn = y0_draw.cells[i];
            match yt.cells[i] {
                Some(v) => {
                    if drawn != Some(v) {
                        return Err(Error::CarryOverViolation { row: r, col: c });
                    }
                }
                None => {
                    let value = drawn.ok_or(Error::CarryOverViolation { row: r, col: c })?;
                    let u = SplitMix64::keyed(seed, &[r as u64, c as u64]).next_f64();
                    if u < p_unmask {
                        out.cells[i] = Some(value);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A denoiser posterior `p(y0 | yt)` exposed as per-cell categoricals.
pub trait Posterior {
    /// One categorical over `[0, b)` per cell, row-major. Unmasked cells
    /// are expected to be point masses on their observed value.
    fn cell_probs(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>>;

    /// Draw a full `y0` consistent with `yt`. The default samples masked
    /// cells independently from [`Posterior::cell_probs`].
    fn draw(&self, yt: &SubTokenGrid, rng: &mut SplitMix64) -> Result<SubTokenGrid> {
        let probs = checked_probs(self, yt)?;
        let mut out = yt.clone();
        for (cell, p) in out.cells.iter_mut().zip(&probs) {
            if cell.is_none() {
                *cell = Some(rng.categorical(p));
            }
        }
        Ok(out)
    }
}

impl<F> Posterior for F
where
    F: Fn(&SubTokenGrid) -> Vec<Vec<f64>>,
{
    fn cell_probs(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
        Ok(self(yt))
    }
}

fn checked_probs<P: Posterior + ?Sized>(posterior: &P, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
    let probs = posterior.cell_probs(yt)?;
    if probs.len() != yt.len() {
        return Err(Error::PosteriorShapeError { expected: yt.len(), got: probs.len() });
    }
    if let Some(bad) = probs.iter().find(|p| p.len() != yt.base) {
        return Err(Error::PosteriorShapeError { expected: yt.base, got: bad.len() });
    }
    Ok(probs)
}

/// Ancestral sampling of `len` tokens in `steps` uniform time steps.
pub fn sample<P: Posterior + ?Sized>(
    posterior: &P,
    st: &Subtokenizer,
    len: usize,
    steps: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("sampling needs at least one step".into()));
    }
    let mut grid = SubTokenGrid::masked(len, st.ell(), st.base());
    for k in 1..=steps {
        let t = 1.0 - (k - 1) as f64 / steps as f64;
        let s = if k == steps { 0.0 } else { 1.0 - k as f64 / steps as f64 };
        if grid.masked_count() == 0 {
            break;
        }
        let mut rng = SplitMix64::keyed(seed, &[k as u64, 0]);
        let y0 = posterior.draw(&grid, &mut rng)?;
        grid = reverse_step(&grid, &y0, schedule, s, t, crate::rng::mix64(seed ^ crate::rng::mix64(k as u64)))?;
    }
    finalize_rows(posterior, st, grid, seed, steps)
}

fn finalize_rows<P: Posterior + ?Sized>(
    posterior: &P,
    st: &Subtokenizer,
    mut grid: SubTokenGrid,
    seed: u64,
    steps: usize,
) -> Result<Vec<usize>> {
    let ell = st.ell();
    let mut tokens = Vec::with_capacity(grid.rows);
    let mut digits = vec![0; ell];
    for r in 0..grid.rows {
        for (d, c) in digits.iter_mut().zip(grid.row(r)) {
            *d = c.expect("final grid is mask-free");
        }
        if let Ok(tok) = st.decode(&digits) {
            tokens.push(tok);
            continue;
        }
        for c in 0..ell {
            grid.set(r, c, None);
        }
        let probs = checked_probs(posterior, &grid)?;
        let row_probs = &probs[r * ell..(r + 1) * ell];
        let mut resolved = None;
        for attempt in 0..MAX_ROW_REDRAWS {
            let mut rng = SplitMix64::keyed(seed, &[steps as u64 + 1, r as u64, attempt as u64]);
            for (d, p) in digits.iter_mut().zip(row_probs) {
                *d = rng.categorical(p);
            }
            if let Ok(tok) = st.decode(&digits) {
                resolved = Some(tok);
                break;
            }
        }
        let tok = match resolved {
            Some(tok) => tok,
            None => best_valid_code(st, row_probs, &mut digits),
        };
        st.encode_into(tok, &mut digits)?;
        for (c, &d) in digits.iter().enumerate() {
            grid.set(r, c, Some(d));
        }
        tokens.push(tok);
    }
    Ok(tokens)
}

/// Valid code with the largest product of per-cell probabilities.
fn best_valid_code(st: &Subtokenizer, row_probs: &[Vec<f64>], scratch: &mut [usize]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for index in 0..st.vocab() {
        write_digits(index, st.base(), scratch);
        let score: f64 = scratch.iter().zip(row_probs).map(|(&d, p)| p[d].max(1e-300).ln()).sum();
        if score > best.0 {
            best = (score, index);
        }
    }
    st.token_of_index(best.1).expect("index below vocab")
}
