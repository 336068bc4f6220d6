//! Token-frequency audits: streaming counts, CDFs and per-position
//! sub-token entropies under different index assignments.

use std::io::BufRead;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::subtok::{Strategy, Subtokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    vocab: usize,
    counts: Vec<u64>,
    total: u64,
}

impl TokenCounts {
    pub fn zeros(vocab: usize) -> Self {
        Self { vocab, counts: vec![0; vocab], total: 0 }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { vocab: counts.len(), counts, total }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn add(&mut self, token: usize, position: usize) -> Result<()> {
        let slot = self.counts.get_mut(token).ok_or(Error::TokenOutOfRange {
            token,
            vocab: self.vocab,
            position: Some(position),
        })?;
        *slot += 1;
        self.total += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &TokenCounts) -> Result<()> {
        if other.vocab != self.vocab {
            return Err(Error::CountsLength { expected: self.vocab, got: other.vocab });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Empirical token marginal.
    pub fn probs(&self) -> Result<Vec<f64>> {
        if self.total == 0 {
            return Err(Error::EmptyCounts);
        }
        Ok(self.counts.iter().map(|&c| c as f64 / self.total as f64).collect())
    }

    /// Parses `token_id<TAB>count` lines. Ids must be strictly increasing;
    /// ids not listed count zero.
    pub fn from_tsv(text: &str, vocab: usize) -> Result<Self> {
        let mut out = Self::zeros(vocab);
        let mut last: Option<usize> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `id<TAB>count`", n + 1)))?;
            let id: usize = id.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            let count: u64 = count.trim().parse().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            if last.is_some_and(|l| id <= l) {
                return Err(Error::Parse(format!("line {}: ids must be strictly increasing", n + 1)));
            }
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab, position: Some(n) });
            }
            last = Some(id);
            out.counts[id] = count;
            out.total += count;
        }
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                s.push_str(&format!("{id}\t{c}\n"));
            }
        }
        s
    }
}

/// Exact histogram of a token stream.
pub fn count_tokens<I: IntoIterator<Item = usize>>(stream: I, vocab: usize) -> Result<TokenCounts> {
    let mut out = TokenCounts::zeros(vocab);
    for (pos, tok) in stream.into_iter().enumerate() {
        out.add(tok, pos)?;
    }
    Ok(out)
}

/// Counts a newline-delimited id stream without loading it into memory.
pub fn count_reader<R: BufRead>(reader: R, vocab: usize) -> Result<TokenCounts> {
    let mut out = TokenCounts::zeros(vocab);
    let mut pos = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tok: usize = line.parse().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        out.add(tok, pos)?;
        pos += 1;
    }
    Ok(out)
}

/// Counts disjoint shards on separate threads and merges them. Token
/// positions in errors are global.
pub fn count_sharded(shards: &[&[usize]], vocab: usize) -> Result<TokenCounts> {
    let mut offsets = Vec::with_capacity(shards.len());
    let mut acc = 0;
    for s in shards {
        offsets.push(acc);
        acc += s.len();
    }
    let partial: Vec<Result<TokenCounts>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .zip(&offsets)
            .map(|(shard, &offset)| {
                scope.spawn(move || {
                    let mut c = TokenCounts::zeros(vocab);
                    for (i, &tok) in shard.iter().enumerate() {
                        c.add(tok, offset + i)?;
                    }
                    Ok(c)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("counting thread panicked")).collect()
    });
    let mut out = TokenCounts::zeros(vocab);
    for p in partial {
        out.merge(&p?)?;
    }
    Ok(out)
}

pub fn token_cdf(c: &TokenCounts) -> Result<Vec<f64>> {
    if c.total == 0 {
        return Err(Error::EmptyCounts);
    }
    let mut run = 0u64;
    Ok(c
        .counts
        .iter()
        .map(|&x| {
            run += x;
            run as f64 / c.total as f64
        })
        .collect())
}

/// Largest gap between the CDF and the uniform diagonal `k / V`.
pub fn cdf_max_deviation(cdf: &[f64]) -> f64 {
    let v = cdf.len() as f64;
    cdf.iter().enumerate().map(|(k, &c)| (c - (k + 1) as f64 / v).abs()).fold(0.0, f64::max)
}

fn entropy_bits(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtokenEntropy {
    pub per_position: Vec<f64>,
    pub average: f64,
}

pub fn subtoken_entropies(c: &TokenCounts, st: &Subtokenizer) -> Result<SubtokenEntropy> {
    if c.vocab != st.vocab() {
        return Err(Error::CountsLength { expected: st.vocab(), got: c.vocab });
    }
    if c.total == 0 {
        return Err(Error::EmptyCounts);
    }
    let (ell, base) = (st.ell(), st.base());
    let mut marg = vec![vec![0u64; base]; ell];
    let mut digits = vec![0; ell];
    for (tok, &count) in c.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        st.encode_into(tok, &mut digits)?;
        for (m, &d) in marg.iter_mut().zip(&digits) {
            m[d] += count;
        }
    }
    let per_position: Vec<f64> = marg
        .iter()
        .map(|m| {
            let probs: Vec<f64> = m.iter().map(|&x| x as f64 / c.total as f64).collect();
            entropy_bits(&probs)
        })
        .collect();
    let average = per_position.iter().sum::<f64>() / ell as f64;
    Ok(SubtokenEntropy { per_position, average })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub strategy: String,
    pub seed: Option<u64>,
    pub average_bits: f64,
    pub per_position: Vec<f64>,
}

/// One row per strategy: identity, each random seed, greedy, then the
/// analytic maximum `log2 b`.
pub fn entropy_report(c: &TokenCounts, ell: usize, seeds: &[u64]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(seeds.len() + 3);
    let mut push = |name: &str, seed: Option<u64>, st: Subtokenizer| -> Result<()> {
        let e = subtoken_entropies(c, &st)?;
        rows.push(ReportRow { strategy: name.into(), seed, average_bits: e.average, per_position: e.per_position });
        Ok(())
    };
    push("identity", None, Subtokenizer::build(c.vocab, ell, Strategy::Identity)?)?;
    for &seed in seeds {
        push("random", Some(seed), Subtokenizer::build(c.vocab, ell, Strategy::Random(seed))?)?;
    }
    push("greedy", None, Subtokenizer::build(c.vocab, ell, Strategy::Greedy(&c.counts))?)?;
    let max = (crate::subtok::base_for(c.vocab, ell) as f64).log2();
    rows.push(ReportRow { strategy: "maximum".into(), seed: None, average_bits: max, per_position: vec![max; ell] });
    Ok(rows)
}

/// Report as CSV, one row per (strategy, position).
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "seed", "position", "entropy_bits", "average_bits"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        for (j, h) in r.per_position.iter().enumerate() {
            w.write_record([r.strategy.clone(), seed.clone(), j.to_string(), format!("{h:.6}"), format!("{:.6}", r.average_bits)])
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?).map_err(|e| Error::Parse(e.to_string()))
}

/// Zipf probabilities `p(k) ~ (k + 1)^-s` over `[0, V)`.
pub fn zipf_probs(vocab: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=vocab).map(|k| (k as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Inverse-CDF Zipf sampler.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(vocab: usize, s: f64) -> Self {
        let mut run = 0.0;
        let cdf = zipf_probs(vocab, s)
            .into_iter()
            .map(|p| {
                run += p;
                run
            })
            .collect();
        Self { cdf }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64() * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    /// `n` ids from a stream seeded by `seed`.
    pub fn stream(&self, n: usize, seed: u64) -> impl Iterator<Item = usize> + '_ {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(move |_| self.sample(&mut rng))
    }
}

/// Expected Zipf counts for a given total, rounded down; used where exact
/// reproducibility matters more than sampling noise.
pub fn zipf_counts(vocab: usize, s: f64, total: u64) -> TokenCounts {
    TokenCounts::from_counts(zipf_probs(vocab, s).iter().map(|p| (p * total as f64).floor() as u64).collect())
}
