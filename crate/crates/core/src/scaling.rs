//! Power-law loss estimator `L(N, D) = E + A N^-alphaN + B D^-betaD`,
//! fitted by Huber regression on log residuals with a multi-start
//! Nelder-Mead search, and the compute-optimal allocation it implies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const HUBER_DELTA: f64 = 1e-3;
pub const EXPONENT_BOUNDS: (f64, f64) = (0.01, 2.0);
pub const LOG_COEF_BOUNDS: (f64, f64) = (-20.0, 40.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub loss: f64,
}

impl ScalingPoint {
    pub fn new(n: f64, d: f64, loss: f64) -> Result<Self> {
        let p = Self { n, d, loss };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.d > 0.0 && self.loss > 0.0) || !(self.n * self.d * self.loss).is_finite() {
            return Err(Error::InvalidPoint(format!("N = {}, D = {}, loss = {}", self.n, self.d, self.loss)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "alphaN")]
    pub alpha_n: f64,
    #[serde(rename = "betaD")]
    pub beta_d: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub a_hat: f64,
    pub b_hat: f64,
}

impl ScalingFit {
    pub fn new(e: f64, a: f64, b: f64, alpha_n: f64, beta_d: f64) -> Self {
        let ex = exponents_of(a, b, alpha_n, beta_d);
        Self { e, a, b, alpha_n, beta_d, g: ex.g, a_hat: ex.a_hat, b_hat: ex.b_hat }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Exponents {
    pub a_hat: f64,
    pub b_hat: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

fn exponents_of(a: f64, b: f64, alpha_n: f64, beta_d: f64) -> Exponents {
    let a_hat = beta_d / (alpha_n + beta_d);
    let g = ((alpha_n * a) / (beta_d * b)).powf(1.0 / (alpha_n + beta_d));
    Exponents { a_hat, b_hat: 1.0 - a_hat, g }
}

pub fn exponents(f: &ScalingFit) -> Exponents {
    exponents_of(f.a, f.b, f.alpha_n, f.beta_d)
}

/// `a_hat`, `b_hat` from the two exponents alone.
pub fn allocation_exponents(alpha_n: f64, beta_d: f64) -> (f64, f64) {
    let a_hat = beta_d / (alpha_n + beta_d);
    (a_hat, 1.0 - a_hat)
}

pub fn predict_loss(f: &ScalingFit, n: f64, d: f64) -> f64 {
    f.e + f.a * n.powf(-f.alpha_n) + f.b * d.powf(-f.beta_d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Allocation {
    pub compute: f64,
    pub n_opt: f64,
    pub d_opt: f64,
}

/// Minimizer of the loss along `6 N D = C`.
pub fn optimal_allocation(f: &ScalingFit, compute: f64) -> Allocation {
    let ex = exponents(f);
    let x = compute / 6.0;
    Allocation { compute, n_opt: ex.g * x.powf(ex.a_hat), d_opt: x.powf(ex.b_hat) / ex.g }
}

/// `(loss, N, D, C)` rows where `D` is chosen so that the predicted loss
/// equals each target; unreachable combinations are skipped.
pub fn iso_loss_table(f: &ScalingFit, losses: &[f64], n_grid: &[f64]) -> Vec<(f64, f64, f64, f64)> {
    let mut rows = Vec::new();
    for &target in losses {
        for &n in n_grid {
            let rest = target - f.e - f.a * n.powf(-f.alpha_n);
            if rest > 0.0 && f.b > 0.0 {
                let d = (f.b / rest).powf(1.0 / f.beta_d);
                rows.push((target, n, d, 6.0 * n * d));
            }
        }
    }
    rows
}

fn huber(r: f64) -> f64 {
    let a = r.abs();
    if a <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    }
}

// parameter vector: [E, ln A, ln B, alphaN, betaD]
struct Problem {
    ln_n: Vec<f64>,
    ln_d: Vec<f64>,
    ln_loss: Vec<f64>,
    lower: [f64; 5],
    upper: [f64; 5],
}

impl Problem {
    fn objective(&self, x: &[f64; 5]) -> f64 {
        let [e, la, lb, al, be] = *x;
        self.ln_n
            .iter()
            .zip(&self.ln_d)
            .zip(&self.ln_loss)
            .map(|((ln_n, ln_d), ln_l)| {
                let pred = e + (la - al * ln_n).exp() + (lb - be * ln_d).exp();
                huber(pred.ln() - ln_l)
            })
            .sum()
    }

    fn clamp(&self, x: &mut [f64; 5]) {
        for i in 0..5 {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub fit: ScalingFit,
    pub objective: f64,
    /// Objective at each grid initialization, in grid order.
    pub start_objectives: Vec<f64>,
    /// Best objective after each iteration of the winning run.
    pub history: Vec<f64>,
    pub residuals: Vec<f64>,
}

const NM_MAX_ITER: usize = 20_000;
const NM_XTOL: f64 = 1e-14;
const NM_POLISH_ROUNDS: usize = 6;

/// Bounded Nelder-Mead: every trial point is projected onto the box.
fn nelder_mead(p: &Problem, start: [f64; 5], steps: [f64; 5], history: &mut Vec<f64>) -> ([f64; 5], f64) {
    let mut simplex: Vec<([f64; 5], f64)> = Vec::with_capacity(6);
    let mut x0 = start;
    p.clamp(&mut x0);
    simplex.push((x0, p.objective(&x0)));
    for i in 0..5 {
        let mut x = x0;
        x[i] += steps[i];
        if x[i] > p.upper[i] {
            x[i] = x0[i] - steps[i];
        }
        p.clamp(&mut x);
        simplex.push((x, p.objective(&x)));
    }
    let point = |a: &[f64; 5], b: &[f64; 5], t: f64| -> [f64; 5] {
        let mut out = [0.0; 5];
        for i in 0..5 {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        p_clamped(p, out)
    };
    for _ in 0..NM_MAX_ITER {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        history.push(simplex[0].1);
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < NM_XTOL {
            break;
        }
        let mut centroid = [0.0; 5];
        for (x, _) in &simplex[..5] {
            for i in 0..5 {
                centroid[i] += x[i] / 5.0;
            }
        }
        let worst = simplex[5];
        let reflected = point(&centroid, &worst.0, -1.0);
        let fr = p.objective(&reflected);
        if fr < simplex[0].1 {
            let expanded = point(&centroid, &worst.0, -2.0);
            let fe = p.objective(&expanded);
            simplex[5] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[4].1 {
            simplex[5] = (reflected, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflected, fr) } else { (worst.0, worst.1) };
            let contracted = point(&centroid, &target, 0.5);
            let fc = p.objective(&contracted);
            if fc < ft {
                simplex[5] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex[1..].iter_mut() {
                    let x = point(&best, &v.0, 0.5);
                    *v = (x, p.objective(&x));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    history.push(simplex[0].1);
    (simplex[0].0, simplex[0].1)
}

fn p_clamped(p: &Problem, mut x: [f64; 5]) -> [f64; 5] {
    p.clamp(&mut x);
    x
}

/// Fits the estimator by Huber regression on log residuals.
pub fn fit(points: &[ScalingPoint]) -> Result<FitReport> {
    if points.len() < 6 {
        return Err(Error::InsufficientData(format!("{} points, need at least 6", points.len())));
    }
    for p in points {
        p.validate()?;
    }
    let span = |get: fn(&ScalingPoint) -> f64| {
        let (lo, hi) = points.iter().map(get).fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi / lo
    };
    if span(|p| p.n) < 100.0 || span(|p| p.d) < 100.0 {
        return Err(Error::InsufficientData("points must span at least two decades in N and D".into()));
    }
    let min_loss = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let problem = Problem {
        ln_n: points.iter().map(|p| p.n.ln()).collect(),
        ln_d: points.iter().map(|p| p.d.ln()).collect(),
        ln_loss: points.iter().map(|p| p.loss.ln()).collect(),
        lower: [0.0, LOG_COEF_BOUNDS.0, LOG_COEF_BOUNDS.0, EXPONENT_BOUNDS.0, EXPONENT_BOUNDS.0],
        upper: [min_loss, LOG_COEF_BOUNDS.1, LOG_COEF_BOUNDS.1, EXPONENT_BOUNDS.1, EXPONENT_BOUNDS.1],
    };
    let steps = [0.05 * min_loss, 1.0, 1.0, 0.05, 0.05];

    let mut best: Option<([f64; 5], f64, Vec<f64>)> = None;
    let mut start_objectives = Vec::new();
    for &alpha in &[0.2, 0.3, 0.4] {
        for &beta in &[0.2, 0.3, 0.4] {
            for &log_coef in &[2.0, 4.0, 6.0] {
                for &e_frac in &[0.5, 0.9] {
                    let start = [e_frac * min_loss, log_coef, log_coef, alpha, beta];
                    start_objectives.push(problem.objective(&start));
                    let mut history = Vec::new();
                    let (x, f) = nelder_mead(&problem, start, steps, &mut history);
                    if best.as_ref().map_or(true, |b| f < b.1) {
                        best = Some((x, f, history));
                    }
                }
            }
        }
    }
    let (mut x, mut f, mut history) = best.expect("grid is non-empty");
    // restart from the winner until the simplex stops finding improvements
    for _ in 0..NM_POLISH_ROUNDS {
        let scale: [f64; 5] = std::array::from_fn(|i| steps[i] * 1e-2);
        let (x2, f2) = nelder_mead(&problem, x, scale, &mut history);
        // the restart rebuilds its simplex; keep the record monotone
        for h in history.iter_mut() {
            *h = h.min(f);
        }
        if f2 < f {
            x = x2;
            f = f2;
        } else {
            break;
        }
    }
    let mut running = f64::INFINITY;
    for h in history.iter_mut() {
        running = running.min(*h);
        *h = running;
    }

    let names = ["E", "ln A", "ln B", "alphaN", "betaD"];
    for i in 0..5 {
        let width = problem.upper[i] - problem.lower[i];
        let tol = 1e-9 * width.max(1.0);
        if (x[i] - problem.lower[i]).abs() <= tol || (x[i] - problem.upper[i]).abs() <= tol {
            return Err(Error::DegenerateFit(format!("{} = {}", names[i], x[i])));
        }
    }
    let fit = ScalingFit::new(x[0], x[1].exp(), x[2].exp(), x[3], x[4]);
    let residuals = points.iter().map(|p| predict_loss(&fit, p.n, p.d).ln() - p.loss.ln()).collect();
    Ok(FitReport { fit, objective: f, start_objectives, history, residuals })
}

/// Points on a `n_grid x d_grid` lattice drawn from a known fit, with
/// multiplicative Gaussian noise of relative size `sigma`.
pub fn synthetic_points(truth: &ScalingFit, n_grid: &[f64], d_grid: &[f64], sigma: f64, seed: u64) -> Vec<ScalingPoint> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(n_grid.len() * d_grid.len());
    for &n in n_grid {
        for &d in d_grid {
            let noise = if sigma > 0.0 { 1.0 + sigma * rng.normal() } else { 1.0 };
            out.push(ScalingPoint { n, d, loss: predict_loss(truth, n, d) * noise });
        }
    }
    out
}

/// Log-spaced grid of `k` values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    (0..k).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (k - 1) as f64).exp()).collect()
}

/// Reads `N,D,loss` CSV.
pub fn read_points_csv(text: &str) -> Result<Vec<ScalingPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ScalingPoint>().enumerate() {
        let p = row.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

pub fn iso_loss_csv(rows: &[(f64, f64, f64, f64)]) -> String {
    let mut s = String::from("loss,N,D,C\n");
    for (l, n, d, c) in rows {
        s.push_str(&format!("{l},{n:e},{d:e},{c:e}\n"));
    }
    s
}
