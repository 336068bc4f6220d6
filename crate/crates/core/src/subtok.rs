//! Subtokenizers: a fixed index permutation followed by base-`b` digit
//! expansion, both stored as lookup tables.
//!
//! Digits are most-significant first and zero-padded on the left to the
//! granularity `ell`.

use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const FORMAT_VERSION: u32 = 1;

/// Smallest `b` with `b^ell >= vocab`, i.e. the ceiling of the `ell`-th root.
pub fn base_for(vocab: usize, ell: usize) -> usize {
    assert!(ell >= 1);
    let mut b = (vocab as f64).powf(1.0 / ell as f64).floor().max(1.0) as usize;
    while b > 1 && pow_at_least(b - 1, ell, vocab) {
        b -= 1;
    }
    while !pow_at_least(b, ell, vocab) {
        b += 1;
    }
    b
}

fn pow_at_least(b: usize, ell: usize, target: usize) -> bool {
    let mut acc: u128 = 1;
    for _ in 0..ell {
        acc *= b as u128;
        if acc >= target as u128 {
            return true;
        }
    }
    acc >= target as u128
}

/// `ceil(log2(vocab))`, the binary granularity.
pub fn max_granularity(vocab: usize) -> usize {
    let mut k = 0;
    while (1u128 << k) < vocab as u128 {
        k += 1;
    }
    k
}

/// Value of a digit string read in base `b`, most significant first.
pub fn digits_value(digits: &[usize], b: usize) -> usize {
    digits.iter().fold(0usize, |acc, &d| acc * b + d)
}

/// Write the base-`b` expansion of `value` into `out`, left-padded with zeros.
pub fn write_digits(mut value: usize, b: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = value % b;
        value /= b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Identity,
    Random,
    Greedy,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Identity => "identity",
            StrategyKind::Random => "random",
            StrategyKind::Greedy => "greedy",
        })
    }
}

/// How the index permutation is chosen at build time.
#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    Identity,
    /// Fisher-Yates driven by splitmix64 seeded with the given value.
    Random(u64),
    /// Alternate most and least frequent tokens, given per-token counts.
    Greedy(&'a [u64]),
}

/// A sequence of `ell` sub-tokens, each in `[0, b)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubTokenCode(Vec<usize>);

impl SubTokenCode {
    pub fn new(digits: Vec<usize>) -> Self {
        Self(digits)
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for SubTokenCode {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for SubTokenCode {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtokenizer {
    vocab: usize,
    ell: usize,
    base: usize,
    perm: Vec<u32>,
    inv_perm: Vec<u32>,
    strategy: StrategyKind,
    seed: Option<u64>,
}

impl Subtokenizer {
    pub fn build(vocab: usize, ell: usize, strategy: Strategy<'_>) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::VocabTooSmall(vocab));
        }
        if ell == 0 {
            return Err(Error::ZeroGranularity);
        }
        let max = max_granularity(vocab);
        if ell > max {
            return Err(Error::GranularityTooLarge { ell, max, vocab });
        }
        let (perm, kind, seed) = match strategy {
            Strategy::Identity => ((0..vocab as u32).collect(), StrategyKind::Identity, None),
            Strategy::Random(seed) => (random_perm(vocab, seed), StrategyKind::Random, Some(seed)),
            Strategy::Greedy(counts) => (greedy_perm(counts, vocab)?, StrategyKind::Greedy, None),
        };
        Self::from_perm(vocab, ell, perm, kind, seed)
    }

    /// Wrap an explicit permutation (`perm[token] = shuffled index`).
    pub fn from_perm(
        vocab: usize,
        ell: usize,
        perm: Vec<u32>,
        strategy: StrategyKind,
        seed: Option<u64>,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::VocabTooSmall(vocab));
        }
        if ell == 0 {
            return Err(Error::ZeroGranularity);
        }
        let max = max_granularity(vocab);
        if ell > max {
            return Err(Error::GranularityTooLarge { ell, max, vocab });
        }
        if perm.len() != vocab {
            return Err(Error::CorruptFile(format!(
                "permutation has {} entries, expected {vocab}",
                perm.len()
            )));
        }
        let mut inv_perm = vec![u32::MAX; vocab];
        for (token, &p) in perm.iter().enumerate() {
            let slot = inv_perm
                .get_mut(p as usize)
                .ok_or_else(|| Error::CorruptFile(format!("permutation entry {p} out of range")))?;
            if *slot != u32::MAX {
                return Err(Error::CorruptFile(format!("permutation repeats {p}")));
            }
            *slot = token as u32;
        }
        Ok(Self { vocab, ell, base: base_for(vocab, ell), perm, inv_perm, strategy, seed })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
    pub fn ell(&self) -> usize {
        self.ell
    }
    pub fn base(&self) -> usize {
        self.base
    }
    pub fn perm(&self) -> &[u32] {
        &self.perm
    }
    pub fn inv_perm(&self) -> &[u32] {
        &self.inv_perm
    }
    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Number of distinct codes, `b^ell`.
    pub fn code_space(&self) -> usize {
        self.base.pow(self.ell as u32)
    }

    pub fn encode(&self, token: usize) -> Result<SubTokenCode> {
        let mut digits = vec![0; self.ell];
        self.encode_into(token, &mut digits)?;
        Ok(SubTokenCode(digits))
    }

    pub fn encode_into(&self, token: usize, out: &mut [usize]) -> Result<()> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange { token, vocab: self.vocab, position: None });
        }
        write_digits(self.perm[token] as usize, self.base, out);
        Ok(())
    }

    pub fn decode(&self, code: &[usize]) -> Result<usize> {
        if code.len() != self.ell || code.iter().any(|&d| d >= self.base) {
            return Err(Error::InvalidCode(code.to_vec()));
        }
        let value = digits_value(code, self.base);
        if value >= self.vocab {
            return Err(Error::InvalidCode(code.to_vec()));
        }
        Ok(self.inv_perm[value] as usize)
    }

    /// Token for a shuffled index, or `None` for unused codes.
    pub fn token_of_index(&self, index: usize) -> Option<usize> {
        self.inv_perm.get(index).map(|&t| t as usize)
    }

    /// Split each base-`b` digit of `code` into base-`b2` digits so that the
    /// result is the encoding at granularity `ell2` under the same permutation.
    pub fn refine(&self, code: &[usize], ell2: usize) -> Result<SubTokenCode> {
        refine_digits(self.vocab, self.ell, code, ell2)
    }

    /// The same permutation re-expressed at another granularity.
    pub fn with_granularity(&self, ell: usize) -> Result<Self> {
        Self::from_perm(self.vocab, ell, self.perm.clone(), self.strategy, self.seed)
    }

    pub fn to_file(&self) -> SubtokenizerFile {
        SubtokenizerFile {
            format_version: FORMAT_VERSION,
            vocab: self.vocab,
            ell: self.ell,
            b: self.base,
            strategy: self.strategy,
            seed: self.seed,
            perm: self.perm.clone(),
            checksum: format!("{:016x}", perm_checksum(&self.perm)),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("subtokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SubtokenizerFile =
            serde_json::from_str(text).map_err(|e| Error::CorruptFile(e.to_string()))?;
        file.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Digit split shared by [`Subtokenizer::refine`] and the coarsening map.
pub fn refine_digits(vocab: usize, ell1: usize, code: &[usize], ell2: usize) -> Result<SubTokenCode> {
    let b1 = base_for(vocab, ell1);
    if code.len() != ell1 || code.iter().any(|&d| d >= b1) {
        return Err(Error::InvalidCode(code.to_vec()));
    }
    if ell2 < ell1 || ell2 % ell1 != 0 {
        return Err(Error::IncompatibleBases { from: b1, to: base_for(vocab, ell2.max(1)) });
    }
    let factor = ell2 / ell1;
    let b2 = base_for(vocab, ell2);
    if (b2 as u128).pow(factor as u32) != b1 as u128 {
        return Err(Error::IncompatibleBases { from: b1, to: b2 });
    }
    let mut out = vec![0; ell2];
    for (digit, chunk) in code.iter().zip(out.chunks_mut(factor)) {
        write_digits(*digit, b2, chunk);
    }
    Ok(SubTokenCode(out))
}

fn random_perm(vocab: usize, seed: u64) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..vocab as u32).collect();
    SplitMix64::new(seed).shuffle(&mut perm);
    perm
}

fn greedy_perm(counts: &[u64], vocab: usize) -> Result<Vec<u32>> {
    if counts.len() != vocab {
        return Err(Error::CountsLength { expected: vocab, got: counts.len() });
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyCounts);
    }
    let mut order: Vec<usize> = (0..vocab).collect();
    // Descending count, ties by ascending id.
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut perm = vec![0u32; vocab];
    let (mut lo, mut hi) = (0usize, vocab - 1);
    for new_index in 0..vocab {
        let rank = if new_index % 2 == 0 {
            lo += 1;
            lo - 1
        } else {
            hi -= 1;
            hi + 1
        };
        perm[order[rank]] = new_index as u32;
    }
    Ok(perm)
}

/// FNV-1a 64 over the permutation entries as little-endian `u32`s.
pub fn perm_checksum(perm: &[u32]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    for p in perm {
        h.write(&p.to_le_bytes());
    }
    h.finish()
}

/// On-disk JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtokenizerFile {
    pub format_version: u32,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub ell: usize,
    pub b: usize,
    pub strategy: StrategyKind,
    pub seed: Option<u64>,
    pub perm: Vec<u32>,
    pub checksum: String,
}

impl SubtokenizerFile {
    pub fn validate(self) -> Result<Subtokenizer> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::CorruptFile(format!("unsupported format_version {}", self.format_version)));
        }
        let expected = format!("{:016x}", perm_checksum(&self.perm));
        if expected != self.checksum {
            return Err(Error::CorruptFile(format!("checksum {} != {expected}", self.checksum)));
        }
        let st = Subtokenizer::from_perm(self.vocab, self.ell, self.perm, self.strategy, self.seed)
            .map_err(|e| match e {
                Error::CorruptFile(m) => Error::CorruptFile(m),
                other => Error::CorruptFile(other.to_string()),
            })?;
        if st.base != self.b {
            return Err(Error::CorruptFile(format!("b = {} but ceil root gives {}", self.b, st.base)));
        }
        match (self.strategy, self.seed) {
            (StrategyKind::Identity, _) => {
                if st.perm.iter().enumerate().any(|(i, &p)| p as usize != i) {
                    return Err(Error::CorruptFile("identity strategy with non-identity perm".into()));
                }
            }
            (StrategyKind::Random, Some(seed)) => {
                if random_perm(st.vocab, seed) != st.perm {
                    return Err(Error::CorruptFile("perm does not match its seed".into()));
                }
            }
            (StrategyKind::Random, None) => {
                return Err(Error::CorruptFile("random strategy without seed".into()));
            }
            (StrategyKind::Greedy, _) => {}
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use super::Strategy;

    #[test]
    fn base_matches_published_maxima() {
        assert_eq!(base_for(50257, 16), 2);
        assert_eq!(base_for(50257, 8), 4);
        assert_eq!(base_for(50257, 4), 15);
        assert_eq!(base_for(50257, 2), 225);
        assert_eq!(max_granularity(50257), 16);
        assert_eq!(max_granularity(8), 3);
        assert_eq!(max_granularity(5), 3);
    }

    #[test]
    fn identity_build() {
        let st = Subtokenizer::build(8, 3, Strategy::Identity).unwrap();
        assert_eq!(st.base(), 2);
        assert_eq!(st.perm(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        let st = Subtokenizer::build(50257, 2, Strategy::Identity).unwrap();
        assert_eq!(st.base(), 225);
        assert!(((225f64).log2() - 7.8138).abs() < 5e-5);
    }

    #[test]
    fn granularity_limit() {
        assert!(matches!(
            Subtokenizer::build(8, 4, Strategy::Identity),
            Err(Error::GranularityTooLarge { max: 3, .. })
        ));
        assert!(matches!(Subtokenizer::build(1, 1, Strategy::Identity), Err(Error::VocabTooSmall(1))));
    }

    #[test]
    fn greedy_alternates_extremes() {
        let st = Subtokenizer::build(4, 2, Strategy::Greedy(&[40, 30, 20, 10])).unwrap();
        assert_eq!(st.perm(), &[0, 2, 3, 1]);
        assert!(matches!(
            Subtokenizer::build(4, 2, Strategy::Greedy(&[0, 0, 0, 0])),
            Err(Error::EmptyCounts)
        ));
    }

    #[test]
    fn greedy_ties_by_id() {
        let st = Subtokenizer::build(4, 2, Strategy::Greedy(&[5, 5, 5, 5])).unwrap();
        // ranks follow ids: 0 -> 0, 3 -> 1, 1 -> 2, 2 -> 3
        assert_eq!(st.perm(), &[0, 2, 3, 1]);
    }

    #[test]
    fn encode_decode_examples() {
        let st = Subtokenizer::build(8, 3, Strategy::Identity).unwrap();
        assert_eq!(&*st.encode(5).unwrap(), &[1, 0, 1]);
        assert_eq!(&*st.encode(0).unwrap(), &[0, 0, 0]);
        assert_eq!(st.decode(&[1, 0, 1]).unwrap(), 5);
        assert!(matches!(st.encode(8), Err(Error::TokenOutOfRange { .. })));

        let mut perm: Vec<u32> = (0..8).collect();
        perm.swap(5, 2);
        let st = Subtokenizer::from_perm(8, 3, perm, StrategyKind::Greedy, None).unwrap();
        assert_eq!(&*st.encode(5).unwrap(), &[0, 1, 0]);
        assert_eq!(st.decode(&[0, 1, 0]).unwrap(), 5);

        let st = Subtokenizer::build(5, 3, Strategy::Identity).unwrap();
        assert!(matches!(st.decode(&[1, 1, 1]), Err(Error::InvalidCode(_))));
        assert!(matches!(st.decode(&[2, 0, 0]), Err(Error::InvalidCode(_))));
    }

    #[test]
    fn refine_examples() {
        let st = Subtokenizer::build(256, 2, Strategy::Identity).unwrap();
        assert_eq!(st.base(), 16);
        let code = st.encode(171).unwrap();
        assert_eq!(&*code, &[10, 11]);
        assert_eq!(&*st.refine(&code, 8).unwrap(), &[1, 0, 1, 0, 1, 0, 1, 1]);
        assert_eq!(st.refine(&code, 2).unwrap(), code);

        let st15 = Subtokenizer::build(50257, 4, Strategy::Identity).unwrap();
        let code = st15.encode(1234).unwrap();
        assert!(matches!(st15.refine(&code, 8), Err(Error::IncompatibleBases { from: 15, to: 4 })));
    }

    #[test]
    fn refine_is_exhaustively_consistent_for_gpt2_vocab() {
        let coarse = Subtokenizer::build(50257, 8, Strategy::Random(3)).unwrap();
        let fine = coarse.with_granularity(16).unwrap();
        let mut code = vec![0; 8];
        for x in 0..50257 {
            coarse.encode_into(x, &mut code).unwrap();
            assert_eq!(coarse.refine(&code, 16).unwrap(), fine.encode(x).unwrap());
        }
    }

    #[test]
    fn round_trip_exhaustive() {
        for &(v, ell) in &[(65536usize, 16usize), (50257, 2), (1000, 3)] {
            let st = Subtokenizer::build(v, ell, Strategy::Random(11)).unwrap();
            let mut code = vec![0; ell];
            for x in 0..v {
                st.encode_into(x, &mut code).unwrap();
                assert_eq!(st.decode(&code).unwrap(), x);
            }
        }
    }

    #[test]
    fn json_round_trip_and_corruption() {
        let st = Subtokenizer::build(8, 3, Strategy::Random(42)).unwrap();
        let text = st.to_json();
        assert_eq!(Subtokenizer::from_json(&text).unwrap(), st);

        let mut file = st.to_file();
        file.perm.swap(0, 1);
        let bad = serde_json::to_string(&file).unwrap();
        assert!(matches!(Subtokenizer::from_json(&bad), Err(Error::CorruptFile(_))));

        // Consistent checksum but the perm no longer matches the seed.
        file.checksum = format!("{:016x}", perm_checksum(&file.perm));
        let bad = serde_json::to_string(&file).unwrap();
        assert!(matches!(Subtokenizer::from_json(&bad), Err(Error::CorruptFile(_))));
    }

    proptest! {
        #[test]
        fn random_build_is_deterministic_permutation(v in 2usize..300, seed: u64) {
            let a = Subtokenizer::build(v, 1, Strategy::Random(seed)).unwrap();
            let b = Subtokenizer::build(v, 1, Strategy::Random(seed)).unwrap();
            prop_assert_eq!(a.perm(), b.perm());
            let mut sorted = a.perm().to_vec();
            sorted.sort_unstable();
            prop_assert!(sorted.iter().enumerate().all(|(i, &p)| p as usize == i));
            for (i, &p) in a.perm().iter().enumerate() {
                prop_assert_eq!(a.inv_perm()[p as usize] as usize, i);
            }
        }

        #[test]
        fn codes_are_injective(v in 2usize..200, seed: u64) {
            let ell = max_granularity(v);
            let st = Subtokenizer::build(v, ell, Strategy::Random(seed)).unwrap();
            let codes: std::collections::HashSet<_> = (0..v).map(|x| st.encode(x).unwrap()).collect();
            prop_assert_eq!(codes.len(), v);
        }
    }
}
