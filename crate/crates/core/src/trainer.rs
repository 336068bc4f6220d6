//! A small factorized denoiser trained on the Monte Carlo masked-diffusion
//! objective. Token embeddings are sums of per-position sub-token
//! embeddings; a mean-pooled context feeds one tanh layer and per-position
//! softmax heads. Backpropagation is written out by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{forward_mask, Posterior, Schedule, SubTokenGrid};
use crate::oracle::TokenDist;
use crate::quadrature::Quadrature;
use crate::rng::SplitMix64;
use crate::spectra::DenseMatrix;
use crate::subtok::{Strategy, StrategyKind, Subtokenizer, SubtokenizerFile};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_T_FLOOR: f64 = 1e-3;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;
/// Exact evaluation handles up to `budget * EXACT_PAIR_FACTOR`
/// (sequence, mask pattern) pairs.
pub const EXACT_PAIR_FACTOR: u128 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "V")]
    pub vocab: usize,
    pub ell: usize,
    #[serde(rename = "L")]
    pub len: usize,
    pub base: usize,
    pub d: usize,
    pub h: usize,
}

impl Dims {
    fn emb_len(&self) -> usize {
        self.ell * (self.base + 1) * self.d
    }
    fn off_p(&self) -> usize {
        self.emb_len()
    }
    fn off_w1(&self) -> usize {
        self.off_p() + self.len * self.d
    }
    fn off_b1(&self) -> usize {
        self.off_w1() + self.h * self.d
    }
    fn off_w2(&self) -> usize {
        self.off_b1() + self.h
    }
    fn off_b2(&self) -> usize {
        self.off_w2() + self.ell * self.base * self.h
    }
    pub fn param_count(&self) -> usize {
        self.off_b2() + self.ell * self.base
    }

    /// Tensor name and shape for each block, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("E", vec![self.ell, self.base + 1, self.d]),
            ("P", vec![self.len, self.d]),
            ("W1", vec![self.h, self.d]),
            ("b1", vec![self.h]),
            ("W2", vec![self.ell, self.base, self.h]),
            ("b2", vec![self.ell, self.base]),
        ]
    }

    /// Name of the tensor holding flat parameter `index`.
    pub fn tensor_of(&self, index: usize) -> &'static str {
        let mut start = 0;
        for (name, shape) in self.layout() {
            let n: usize = shape.iter().product();
            if index < start + n {
                return name;
            }
            start += n;
        }
        "?"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dims: Dims,
    st: Subtokenizer,
    params: Vec<f64>,
}

struct Cache {
    c: Vec<f64>,
    hid: Vec<f64>,
    probs: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(st: Subtokenizer, len: usize, d: usize, h: usize) -> Self {
        let dims = Dims { vocab: st.vocab(), ell: st.ell(), len, base: st.base(), d, h };
        Self { params: vec![0.0; dims.param_count()], dims, st }
    }

    /// Gaussian initialization scaled by fan-in.
    pub fn init(st: Subtokenizer, len: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut m = Self::zeros(st, len, d, h);
        let dims = m.dims;
        let mut rng = SplitMix64::keyed(seed, &[0x1417]);
        let emb_scale = 1.0 / (dims.ell as f64).sqrt();
        let w1_scale = 1.0 / (dims.d as f64).sqrt();
        let w2_scale = 1.0 / (dims.h as f64).sqrt();
        for (i, p) in m.params.iter_mut().enumerate() {
            let scale = if i < dims.off_w1() {
                emb_scale
            } else if i < dims.off_b1() {
                w1_scale
            } else if i < dims.off_w2() {
                0.0
            } else if i < dims.off_b2() {
                w2_scale
            } else {
                0.0
            };
            *p = scale * rng.normal();
        }
        m
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn subtokenizer(&self) -> &Subtokenizer {
        &self.st
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check(&self, yt: &SubTokenGrid) -> Result<()> {
        let dm = self.dims;
        if yt.rows() != dm.len || yt.cols() != dm.ell || yt.base() != dm.base {
            return Err(Error::ShapeMismatch { expected: (dm.len, dm.ell), got: (yt.rows(), yt.cols()) });
        }
        Ok(())
    }

    fn run(&self, yt: &SubTokenGrid) -> Cache {
        let Dims { len, ell, base, d, h, .. } = self.dims;
        let p = &self.params;
        let mut u = vec![0.0; len * d];
        for i in 0..len {
            let ui = &mut u[i * d..(i + 1) * d];
            ui.copy_from_slice(&p[self.dims.off_p() + i * d..self.dims.off_p() + (i + 1) * d]);
            for j in 0..ell {
                let v = yt.get(i, j).unwrap_or(base);
                let e = &p[(j * (base + 1) + v) * d..(j * (base + 1) + v + 1) * d];
                for (a, b) in ui.iter_mut().zip(e) {
                    *a += b;
                }
            }
        }
        let mut mean = vec![0.0; d];
        for i in 0..len {
            for k in 0..d {
                mean[k] += u[i * d + k] / len as f64;
            }
        }
        let c: Vec<f64> = u.iter().enumerate().map(|(idx, x)| x + mean[idx % d]).collect();
        let w1 = &p[self.dims.off_w1()..self.dims.off_b1()];
        let b1 = &p[self.dims.off_b1()..self.dims.off_w2()];
        let mut hid = vec![0.0; len * h];
        for i in 0..len {
            let ci = &c[i * d..(i + 1) * d];
            for r in 0..h {
                let row = &w1[r * d..(r + 1) * d];
                hid[i * h + r] = (b1[r] + row.iter().zip(ci).map(|(a, b)| a * b).sum::<f64>()).tanh();
            }
        }
        let w2 = &p[self.dims.off_w2()..self.dims.off_b2()];
        let b2 = &p[self.dims.off_b2()..];
        let mut probs = vec![0.0; len * ell * base];
        for i in 0..len {
            let hi = &hid[i * h..(i + 1) * h];
            for j in 0..ell {
                let out = &mut probs[(i * ell + j) * base..(i * ell + j + 1) * base];
                for (v, o) in out.iter_mut().enumerate() {
                    let row = &w2[(j * base + v) * h..(j * base + v + 1) * h];
                    *o = b2[j * base + v] + row.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(out);
            }
        }
        Cache { c, hid, probs }
    }

    /// Network logits for every cell, ignoring carry-over.
    pub fn logits(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check(yt)?;
        let Dims { len, ell, base, h, .. } = self.dims;
        let cache = self.run(yt);
        let w2 = &self.params[self.dims.off_w2()..self.dims.off_b2()];
        let b2 = &self.params[self.dims.off_b2()..];
        let mut out = Vec::with_capacity(len * ell);
        for i in 0..len {
            let hi = &cache.hid[i * h..(i + 1) * h];
            for j in 0..ell {
                out.push(
                    (0..base)
                        .map(|v| {
                            let row = &w2[(j * base + v) * h..(j * base + v + 1) * h];
                            b2[j * base + v] + row.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// Per-cell categoricals with carry-over on unmasked cells.
    pub fn forward(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
        self.check(yt)?;
        let base = self.dims.base;
        let cache = self.run(yt);
        Ok(yt
            .cells()
            .iter()
            .enumerate()
            .map(|(idx, cell)| match cell {
                Some(v) => (0..base).map(|k| if k == *v { 1.0 } else { 0.0 }).collect(),
                None => cache.probs[idx * base..(idx + 1) * base].to_vec(),
            })
            .collect())
    }

    /// `weight * sum over masked cells of -ln p(y0)`, accumulating
    /// `d/dtheta` into `grads` when given.
    pub fn example_loss(&self, y0: &SubTokenGrid, yt: &SubTokenGrid, weight: f64, grads: Option<&mut [f64]>) -> Result<f64> {
        self.check(yt)?;
        self.check(y0)?;
        if yt.is_mask_free() {
            return Ok(0.0);
        }
        let Dims { len, ell, base, d, h, .. } = self.dims;
        let cache = self.run(yt);
        let mut loss = 0.0;
        for (idx, cell) in yt.cells().iter().enumerate() {
            if cell.is_none() {
                let target = y0.cells()[idx].ok_or(Error::CarryOverViolation { row: idx / ell, col: idx % ell })?;
                loss -= cache.probs[idx * base + target].max(f64::MIN_POSITIVE).ln();
            }
        }
        let Some(g) = grads else {
            return Ok(weight * loss);
        };
        let dm = self.dims;
        let p = &self.params;
        let mut dhid = vec![0.0; len * h];
        for i in 0..len {
            for j in 0..ell {
                let idx = i * ell + j;
                if yt.cells()[idx].is_some() {
                    continue;
                }
                let target = y0.cells()[idx].expect("checked above");
                for v in 0..base {
                    let dl = weight * (cache.probs[idx * base + v] - if v == target { 1.0 } else { 0.0 });
                    let row = dm.off_w2() + (j * base + v) * h;
                    g[dm.off_b2() + j * base + v] += dl;
                    for r in 0..h {
                        g[row + r] += dl * cache.hid[i * h + r];
                        dhid[i * h + r] += dl * p[row + r];
                    }
                }
            }
        }
        let mut dc = vec![0.0; len * d];
        for i in 0..len {
            for r in 0..h {
                let hv = cache.hid[i * h + r];
                let dz = dhid[i * h + r] * (1.0 - hv * hv);
                if dz == 0.0 {
                    continue;
                }
                g[dm.off_b1() + r] += dz;
                let row = dm.off_w1() + r * d;
                for k in 0..d {
                    g[row + k] += dz * cache.c[i * d + k];
                    dc[i * d + k] += dz * p[row + k];
                }
            }
        }
        let mut dc_mean = vec![0.0; d];
        for i in 0..len {
            for k in 0..d {
                dc_mean[k] += dc[i * d + k] / len as f64;
            }
        }
        for i in 0..len {
            for k in 0..d {
                let du = dc[i * d + k] + dc_mean[k];
                g[dm.off_p() + i * d + k] += du;
                for j in 0..ell {
                    let v = yt.get(i, j).unwrap_or(base);
                    g[(j * (base + 1) + v) * d + k] += du;
                }
            }
        }
        Ok(weight * loss)
    }

    /// Monte Carlo objective over a batch: per example `t ~ U[eps, 1]`,
    /// forward masking, weighted masked-cell cross-entropy. Returns the
    /// batch mean and its gradient.
    pub fn loss_mc(&self, batch: &[SubTokenGrid], schedule: &Schedule, seed: u64, t_floor: f64) -> Result<LossGrad> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (e, y0) in batch.iter().enumerate() {
            let (yt, w) = draw_masked(y0, schedule, seed, e as u64, t_floor)?;
            total += self.example_loss(y0, &yt, w, Some(&mut grads))?;
        }
        let n = batch.len() as f64;
        grads.iter_mut().for_each(|g| *g /= n);
        Ok(LossGrad { loss: total / n, grads })
    }

    /// Loss only, same draws as [`ToyModel::loss_mc`].
    pub fn loss_value(&self, batch: &[SubTokenGrid], schedule: &Schedule, seed: u64, t_floor: f64) -> Result<f64> {
        let mut total = 0.0;
        for (e, y0) in batch.iter().enumerate() {
            let (yt, w) = draw_masked(y0, schedule, seed, e as u64, t_floor)?;
            total += self.example_loss(y0, &yt, w, None)?;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut start = 0;
        for (name, shape) in self.dims.layout() {
            let n: usize = shape.iter().product();
            tensors.push(Tensor { name: name.into(), shape, data: self.params[start..start + n].to_vec() });
            start += n;
        }
        Checkpoint { version: CHECKPOINT_VERSION, dims: self.dims, subtokenizer: self.st.to_file(), tensors }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CorruptFile(format!("checkpoint version {}", ck.version)));
        }
        let st = ck.subtokenizer.validate()?;
        let dims = ck.dims;
        if st.vocab() != dims.vocab || st.ell() != dims.ell || st.base() != dims.base {
            return Err(Error::CorruptFile("dims disagree with the subtokenizer".into()));
        }
        let mut params = Vec::with_capacity(dims.param_count());
        let layout = dims.layout();
        if layout.len() != ck.tensors.len() {
            return Err(Error::CorruptFile("wrong number of tensors".into()));
        }
        for ((name, shape), t) in layout.into_iter().zip(ck.tensors) {
            if t.name != name || t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::CorruptFile(format!("tensor {} does not match layout", t.name)));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
            params.extend(t.data);
        }
        Ok(Self { dims, st, params })
    }
}

impl Posterior for ToyModel {
    fn cell_probs(&self, yt: &SubTokenGrid) -> Result<Vec<Vec<f64>>> {
        self.forward(yt)
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    x.iter_mut().for_each(|v| *v /= z);
}

fn draw_masked(y0: &SubTokenGrid, schedule: &Schedule, seed: u64, example: u64, t_floor: f64) -> Result<(SubTokenGrid, f64)> {
    let mut rng = SplitMix64::keyed(seed, &[example]);
    let t = t_floor + (1.0 - t_floor) * rng.next_f64();
    let yt = forward_mask(y0, schedule, t, rng.next_u64())?;
    Ok((yt, schedule.weight(t)?))
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub subtokenizer: SubtokenizerFile,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// A weight block as a matrix: `W1`, `W2` (heads stacked), `W2.j`
    /// (one head), `E.j` (one position's embedding table) or `P`.
    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        let (base, block) = match name.split_once('.') {
            Some((b, j)) => (b, Some(j.parse::<usize>().map_err(|e| Error::Parse(format!("{name}: {e}")))?)),
            None => (name, None),
        };
        let t = self.tensor(base).ok_or_else(|| Error::Parse(format!("no tensor named {base}")))?;
        let cols = *t.shape.last().expect("tensors have a shape");
        match (t.shape.len(), block) {
            (2, None) => DenseMatrix::new(t.shape[0], cols, t.data.clone()),
            (3, None) => DenseMatrix::new(t.shape[0] * t.shape[1], cols, t.data.clone()),
            (3, Some(j)) if j < t.shape[0] => {
                let size = t.shape[1] * cols;
                DenseMatrix::new(t.shape[1], cols, t.data[j * size..(j + 1) * size].to_vec())
            }
            _ => Err(Error::Parse(format!("{name} is not a matrix block"))),
        }
    }
}

/// First-order Markov chain over token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub init: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
}

impl MarkovChain {
    /// Stationary start `pi`, transitions `(1 - lambda) pi + lambda * shift`,
    /// where `shift` moves to the next id cyclically. `pi` is Zipf with
    /// exponent `s`.
    pub fn sticky_zipf(vocab: usize, s: f64, lambda: f64) -> Self {
        let pi = crate::corpus::zipf_probs(vocab, s);
        let trans = (0..vocab)
            .map(|a| {
                let mut row: Vec<f64> = pi.iter().map(|p| (1.0 - lambda) * p).collect();
                row[(a + 1) % vocab] += lambda;
                row
            })
            .collect();
        Self { init: pi, trans }
    }

    pub fn vocab(&self) -> usize {
        self.init.len()
    }

    pub fn sample(&self, len: usize, rng: &mut SplitMix64) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.categorical(&self.init);
        out.push(cur);
        for _ in 1..len {
            cur = rng.categorical(&self.trans[cur]);
            out.push(cur);
        }
        out
    }

    pub fn to_dist(&self, len: usize) -> Result<TokenDist> {
        TokenDist::markov(&self.init, &self.trans, len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(rename = "V")]
    pub vocab: usize,
    pub ell: usize,
    #[serde(rename = "L")]
    pub len: usize,
    pub d: usize,
    pub h: usize,
    pub strategy: StrategyKind,
    pub perm_seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub t_floor: f64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            ell: 4,
            len: 4,
            d: 32,
            h: 64,
            strategy: StrategyKind::Identity,
            perm_seed: 0,
            steps: 5000,
            batch: 64,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            t_floor: DEFAULT_T_FLOOR,
            schedule: Schedule::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab, self.ell, self.len, self.d, self.h, self.steps, self.batch];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("dimensions, steps and batch must be positive".into()));
        }
        if !(self.t_floor > 0.0 && self.t_floor <= 0.1) {
            return Err(Error::InvalidConfig(format!("t floor {} outside (0, 0.1]", self.t_floor)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam moments must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn subtokenizer(&self) -> Result<Subtokenizer> {
        match self.strategy {
            StrategyKind::Identity => Subtokenizer::build(self.vocab, self.ell, Strategy::Identity),
            StrategyKind::Random => Subtokenizer::build(self.vocab, self.ell, Strategy::Random(self.perm_seed)),
            StrategyKind::Greedy => Err(Error::InvalidConfig("greedy assignment needs token counts; build it explicitly".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ToyModel,
    pub history: Vec<(usize, f64)>,
}

/// Adam on the Monte Carlo objective. `data` draws one token sequence.
pub fn train<F>(cfg: &TrainConfig, data: F) -> Result<TrainOutput>
where
    F: FnMut(&mut SplitMix64) -> Vec<usize>,
{
    cfg.validate()?;
    train_with(cfg, cfg.subtokenizer()?, data)
}

/// Like [`train`] with an explicitly built subtokenizer.
pub fn train_with<F>(cfg: &TrainConfig, st: Subtokenizer, mut data: F) -> Result<TrainOutput>
where
    F: FnMut(&mut SplitMix64) -> Vec<usize>,
{
    cfg.validate()?;
    if st.vocab() != cfg.vocab || st.ell() != cfg.ell {
        return Err(Error::InvalidConfig("subtokenizer does not match the config".into()));
    }
    let mut model = ToyModel::init(st, cfg.len, cfg.d, cfg.h, cfg.seed);
    let n = model.params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut data_rng = SplitMix64::keyed(cfg.seed, &[0xDA7A]);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut over = 0;
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| {
                let x = data(&mut data_rng);
                if x.len() != cfg.len {
                    return Err(Error::InvalidConfig(format!("sampler returned length {}", x.len())));
                }
                SubTokenGrid::encode(&model.st, &x)
            })
            .collect::<Result<Vec<_>>>()?;
        let step_seed = SplitMix64::keyed(cfg.seed, &[0x57E9, step as u64]).next_u64();
        let LossGrad { loss, grads } = model.loss_mc(&batch, &cfg.schedule, step_seed, cfg.t_floor)?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected(step));
        }
        let first = *initial.get_or_insert(loss);
        over = if loss > DIVERGENCE_FACTOR * first { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::DivergenceDetected(step));
        }
        history.push((step, loss));
        let k = (step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
        for i in 0..n {
            let g = grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            model.params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(TrainOutput { model, history })
}

pub fn history_csv(history: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in history {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub budget: u64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { budget: crate::oracle::DEFAULT_BUDGET, mc_samples: 20_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    /// nats
    pub value: f64,
    pub std_error: f64,
    pub exact: bool,
}

/// Masked cross-entropy `sum over masked cells of -ln p(y0 | y_t)`.
fn masked_ce<P: Posterior + ?Sized>(model: &P, y0: &[usize], yt: &SubTokenGrid) -> Result<f64> {
    let probs = model.cell_probs(yt)?;
    Ok(yt
        .cells()
        .iter()
        .zip(y0)
        .zip(&probs)
        .filter(|((c, _), _)| c.is_none())
        .map(|((_, &v), p)| -p[v].max(f64::MIN_POSITIVE).ln())
        .sum())
}

/// NELBO of a factorized model on data `q`. Enumerable instances are
/// evaluated exactly on Gauss-Legendre nodes in `s = alpha`; otherwise by
/// the unbiased estimator `n E_k [C / (n - k)]` with `k` uniform on
/// `0..n` and a uniformly random revealed set of size `k`.
pub fn eval_nelbo<P: Posterior + ?Sized>(
    model: &P,
    q: &TokenDist,
    st: &Subtokenizer,
    quad: &Quadrature,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if q.vocab() != st.vocab() {
        return Err(Error::InvalidDistribution("vocabulary mismatch".into()));
    }
    let n = q.len() * st.ell();
    let support: Vec<(Vec<usize>, f64)> =
        q.probs().iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (q.tokens(i), p)).collect();
    let pairs = support.len() as u128 * (1u128 << n.min(127));
    if n <= 30 && pairs <= cfg.budget as u128 * EXACT_PAIR_FACTOR {
        let mut by_size = vec![0.0; n + 1];
        for (x0, p) in &support {
            let y0 = SubTokenGrid::encode(st, x0)?;
            let digits: Vec<usize> = y0.cells().iter().map(|c| c.expect("encoded grids are full")).collect();
            for kept in 0..(1u64 << n) {
                let k = kept.count_ones() as usize;
                if k == n {
                    continue;
                }
                let cells = (0..n).map(|c| if kept >> c & 1 == 1 { Some(digits[c]) } else { None }).collect();
                let yt = SubTokenGrid::from_cells(q.len(), st.ell(), st.base(), cells)?;
                by_size[k] += p * masked_ce(model, &digits, &yt)?;
            }
        }
        let value = quad.integrate(|s| {
            (0..n).map(|k| s.powi(k as i32) * (1.0 - s).powi((n - k - 1) as i32) * by_size[k]).sum::<f64>()
        });
        return Ok(EvalResult { value, std_error: 0.0, exact: true });
    }
    if cfg.mc_samples < 2 {
        return Err(Error::BudgetExceeded { needed: pairs, budget: cfg.budget as u128 * EXACT_PAIR_FACTOR });
    }
    let mut rng = SplitMix64::keyed(cfg.seed, &[0xE7A1]);
    let sampler = |rng: &mut SplitMix64| q.sample(rng);
    mc_nelbo(model, st, q.len(), sampler, cfg.mc_samples, &mut rng)
}

/// Monte Carlo NELBO over a held-out set of sequences, cycling through it.
pub fn eval_nelbo_heldout<P: Posterior + ?Sized>(
    model: &P,
    st: &Subtokenizer,
    heldout: &[Vec<usize>],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let len = heldout.first().ok_or_else(|| Error::InvalidConfig("empty held-out set".into()))?.len();
    let mut next = 0;
    let sampler = |_: &mut SplitMix64| {
        let x = heldout[next % heldout.len()].clone();
        next += 1;
        x
    };
    let mut rng = SplitMix64::keyed(cfg.seed, &[0xE7A2]);
    mc_nelbo(model, st, len, sampler, cfg.mc_samples.max(2), &mut rng)
}

fn mc_nelbo<P: Posterior + ?Sized>(
    model: &P,
    st: &Subtokenizer,
    len: usize,
    mut sampler: impl FnMut(&mut SplitMix64) -> Vec<usize>,
    samples: usize,
    rng: &mut SplitMix64,
) -> Result<EvalResult> {
    let n = len * st.ell();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let x0 = sampler(rng);
        let y0 = SubTokenGrid::encode(st, &x0)?;
        let digits: Vec<usize> = y0.cells().iter().map(|c| c.expect("encoded grids are full")).collect();
        let k = rng.below(n as u64) as usize;
        // partial Fisher-Yates: the first k entries are the revealed cells
        for i in 0..k {
            let j = i + rng.below((n - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut yt = SubTokenGrid::masked(len, st.ell(), st.base());
        for &c in &order[..k] {
            yt.set(c / st.ell(), c % st.ell(), Some(digits[c]));
        }
        let v = n as f64 * masked_ce(model, &digits, &yt)? / (n - k) as f64;
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let m = samples as f64;
    let var = m2 / (m - 1.0);
    Ok(EvalResult { value: mean, std_error: (var / m).sqrt(), exact: false })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub tensor: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central differences with step `h` on `count` parameters drawn with
/// `pick_seed`, using a fixed loss draw.
pub fn gradcheck(
    model: &ToyModel,
    batch: &[SubTokenGrid],
    schedule: &Schedule,
    seed: u64,
    count: usize,
    pick_seed: u64,
    h: f64,
) -> Result<Vec<GradCheckEntry>> {
    let analytic = model.loss_mc(batch, schedule, seed, DEFAULT_T_FLOOR)?.grads;
    let mut rng = SplitMix64::keyed(pick_seed, &[0x6C]);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let index = rng.below(analytic.len() as u64) as usize;
        let orig = probe.params[index];
        probe.params[index] = orig + h;
        let up = probe.loss_value(batch, schedule, seed, DEFAULT_T_FLOOR)?;
        probe.params[index] = orig - h;
        let down = probe.loss_value(batch, schedule, seed, DEFAULT_T_FLOOR)?;
        probe.params[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[index];
        out.push(GradCheckEntry {
            index,
            tensor: model.dims.tensor_of(index),
            analytic: a,
            numeric,
            rel_err: (a - numeric).abs() / (a.abs() + 1e-8),
        });
    }
    Ok(out)
}
