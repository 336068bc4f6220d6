//! Verification suites over the built-in enumerable instances. Each check
//! records both sides of a relation and whether it held.

use serde::Serialize;

use crate::error::Result;
use crate::kernels::Schedule;
use crate::oracle::{
    best_assignment_bruteforce, entropy_bound, entropy_yt, kl_equality_gap, lemma_a1_check, lemma_a3_check,
    lemma_a5_check, lemma_a6_check, optimal_nelbo, ExactInstance, TokenDist,
};
use crate::quadrature::Quadrature;
use crate::subtok::{Strategy, StrategyKind, Subtokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// `|lhs - rhs| <= tolerance`
    Eq,
    /// `lhs <= rhs + tolerance`
    Le,
    /// `lhs < rhs - tolerance`
    Lt,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub instance: String,
    pub name: String,
    pub relation: Relation,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(instance: &str, name: impl Into<String>, relation: Relation, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let pass = match relation {
            Relation::Eq => (lhs - rhs).abs() <= tolerance,
            Relation::Le => lhs <= rhs + tolerance,
            Relation::Lt => lhs < rhs - tolerance,
        };
        Self { instance: instance.into(), name: name.into(), relation, lhs, rhs, tolerance, pass }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub suite: String,
    pub budget: u64,
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

pub const SUITES: &[&str] = &["bound", "routes", "granularity", "single-token", "lemmas", "kl-gap", "assignment"];

/// A named data distribution plus the granularities to examine.
pub struct Instance {
    pub name: &'static str,
    pub dist: TokenDist,
    pub ells: Vec<usize>,
    pub strategy: StrategyKind,
}

impl Instance {
    pub fn subtokenizer(&self, ell: usize) -> Result<Subtokenizer> {
        match self.strategy {
            StrategyKind::Random => Subtokenizer::build(self.dist.vocab(), ell, Strategy::Random(7)),
            _ => Subtokenizer::build(self.dist.vocab(), ell, Strategy::Identity),
        }
    }
}

/// The shipped instances. Granularity lists only contain nested bases.
pub fn default_instances() -> Result<Vec<Instance>> {
    let zipf4 = [0.5, 0.25, 0.15, 0.10];
    let zipf16 = crate::corpus::zipf_probs(16, 1.0);
    let sticky = |v: usize| -> Vec<Vec<f64>> {
        (0..v).map(|a| (0..v).map(|b| if a == b { 0.55 } else { 0.45 / (v - 1) as f64 }).collect()).collect()
    };
    Ok(vec![
        Instance { name: "uniform-V2-L1", dist: TokenDist::uniform(2, 1)?, ells: vec![1], strategy: StrategyKind::Identity },
        Instance { name: "product-uniform-V4-L1", dist: TokenDist::uniform(4, 1)?, ells: vec![1, 2], strategy: StrategyKind::Identity },
        Instance { name: "zipf-V4-L1", dist: TokenDist::iid(&zipf4, 1)?, ells: vec![1, 2], strategy: StrategyKind::Identity },
        Instance { name: "zipf-V4-L2-shuffled", dist: TokenDist::iid(&zipf4, 2)?, ells: vec![1, 2], strategy: StrategyKind::Random },
        Instance { name: "markov-V4-L2", dist: TokenDist::markov(&zipf4, &sticky(4), 2)?, ells: vec![1, 2], strategy: StrategyKind::Identity },
        Instance { name: "markov-V2-L4", dist: TokenDist::markov(&[0.7, 0.3], &sticky(2), 4)?, ells: vec![1], strategy: StrategyKind::Identity },
        Instance { name: "zipf-V16-L1", dist: TokenDist::iid(&zipf16, 1)?, ells: vec![1, 2, 4], strategy: StrategyKind::Identity },
    ])
}

fn push(checks: &mut Vec<Check>, c: Check) {
    checks.push(c);
}

pub fn run_suite(suite: &str, budget: u64) -> Result<Report> {
    let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    let instances = default_instances()?;
    let quad = Quadrature::default();
    let mut checks = Vec::new();
    for name in names {
        match name {
            "bound" => bound_suite(&instances, budget, &mut checks)?,
            "routes" => routes_suite(&instances, &quad, budget, &mut checks)?,
            "granularity" => granularity_suite(&instances, &quad, budget, &mut checks)?,
            "single-token" => single_token_suite(&instances, &quad, budget, &mut checks)?,
            "lemmas" => lemma_suite(&instances, &quad, budget, &mut checks)?,
            "kl-gap" => kl_suite(&instances, &quad, budget, &mut checks)?,
            "assignment" => assignment_suite(&quad, budget, &mut checks)?,
            other => return Err(crate::Error::InvalidConfig(format!("unknown suite `{other}`; expected one of {SUITES:?} or all"))),
        }
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    Ok(Report { suite: suite.into(), budget, failed: checks.len() - passed, passed, checks })
}

fn alpha_grid() -> impl Iterator<Item = f64> {
    (0..=20).map(|i| i as f64 / 20.0)
}

fn bound_suite(instances: &[Instance], budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances {
        for &ell in &inst.ells {
            let st = inst.subtokenizer(ell)?;
            let label = format!("{} ell={ell}", inst.name);
            let exact = ExactInstance::new(&inst.dist, &st, budget)?;
            let uniform_cells = inst.name.contains("uniform") && st.base().pow(ell as u32) == st.vocab();
            for alpha in alpha_grid() {
                let h = exact.latent_entropy(alpha) / std::f64::consts::LN_2;
                let bound = entropy_bound(inst.dist.len(), ell, st.base(), alpha);
                let rel = if uniform_cells { Relation::Eq } else { Relation::Le };
                push(checks, Check::new(&label, format!("entropy bound at alpha={alpha:.2}"), rel, h, bound, 1e-9));
            }
        }
    }
    Ok(())
}

fn routes_suite(instances: &[Instance], quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances {
        for &ell in &inst.ells {
            let st = inst.subtokenizer(ell)?;
            let r = optimal_nelbo(&inst.dist, &st, quad, budget)?;
            let label = format!("{} ell={ell}", inst.name);
            push(checks, Check::new(&label, "decomposition = posterior", Relation::Eq, r.route_decomposition, r.route_posterior, 1e-8));
        }
    }
    Ok(())
}

fn granularity_suite(instances: &[Instance], quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances.iter().filter(|i| i.ells.len() > 1) {
        let values = inst
            .ells
            .iter()
            .map(|&ell| Ok((ell, optimal_nelbo(&inst.dist, &inst.subtokenizer(ell)?, quad, budget)?.value)))
            .collect::<Result<Vec<_>>>()?;
        for w in values.windows(2) {
            let ((fine_ell, fine), (coarse_ell, coarse)) = (w[1], w[0]);
            push(
                checks,
                Check::new(inst.name, format!("nelbo ell={fine_ell} <= ell={coarse_ell}"), Relation::Le, fine, coarse, 1e-8),
            );
        }
    }
    Ok(())
}

fn single_token_suite(instances: &[Instance], quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances.iter().filter(|i| i.dist.len() == 1) {
        let st = inst.subtokenizer(1)?;
        let v = optimal_nelbo(&inst.dist, &st, quad, budget)?.value;
        push(checks, Check::new(inst.name, "single-token nelbo = H(x0)", Relation::Eq, v, inst.dist.entropy(), 1e-8));
        let inst_exact = ExactInstance::new(&inst.dist, &st, budget)?;
        for sched in [Schedule::power(2.0), Schedule::power(3.0)] {
            let r = lemma_a3_check(|s| inst_exact.conditional_entropy(s), &Schedule::Linear, &sched, quad);
            push(checks, Check::new(inst.name, format!("schedule-free nelbo ({sched:?})"), Relation::Eq, -r.rhs, inst.dist.entropy(), 1e-6));
        }
    }
    Ok(())
}

fn lemma_suite(instances: &[Instance], quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances {
        for &ell in inst.ells.iter().filter(|&&e| e > 1) {
            let st = inst.subtokenizer(ell)?;
            let label = format!("{} ell={ell}", inst.name);
            let q = &inst.dist;
            for t in [0.25, 0.5, 0.8] {
                let one = lemma_a1_check(q, &st, |_, _| 1.0, t, budget)?;
                push(checks, Check::new(&label, format!("transfer F=1 t={t}"), Relation::Eq, one.lhs, one.rhs, 1e-10));
                let all_masked = |_: &[usize], xt: &[Option<usize>]| if xt.iter().all(Option::is_none) { 1.0 } else { 0.0 };
                let r = lemma_a1_check(q, &st, all_masked, t, budget)?;
                push(checks, Check::new(&label, format!("transfer F=all-masked t={t}"), Relation::Eq, r.lhs, r.rhs, 1e-10));
                let nll = |x0: &[usize], xt: &[Option<usize>]| -q.posterior(x0, xt).ln();
                let r = lemma_a1_check(q, &st, nll, t, budget)?;
                push(checks, Check::new(&label, format!("transfer F=-log posterior t={t}"), Relation::Eq, r.lhs, r.rhs, 1e-10));
            }
            let n = q.len() * ell;
            for alpha in [0.1, 0.5, 0.9] {
                let r = lemma_a5_check(n, alpha);
                push(checks, Check::new(&label, format!("kernel log-likelihood alpha={alpha}"), Relation::Eq, r.lhs, r.rhs, 1e-10));
                for (c, r) in lemma_a6_check(q, &st, alpha, budget)?.into_iter().enumerate() {
                    push(checks, Check::new(&label, format!("cell {c} latent entropy alpha={alpha}"), Relation::Eq, r.lhs, r.rhs, 1e-10));
                }
            }
            let exact = ExactInstance::new(q, &st, budget)?;
            for sched in [Schedule::power(2.0), Schedule::power(3.0)] {
                let r = lemma_a3_check(|s| exact.conditional_entropy(s), &Schedule::Linear, &sched, quad);
                push(checks, Check::new(&label, format!("schedule invariance vs {sched:?}"), Relation::Eq, r.lhs, r.rhs, 1e-6));
            }
        }
    }
    let cubic = |s: f64| s * s * (1.0 - s);
    for sched in [Schedule::power(2.0), Schedule::power(3.0)] {
        let r = lemma_a3_check(cubic, &Schedule::Linear, &sched, quad);
        push(checks, Check::new("analytic", format!("schedule invariance s^2(1-s) vs {sched:?}"), Relation::Eq, r.lhs, r.rhs, 1e-6));
        push(checks, Check::new("analytic", format!("s^2(1-s) integral vs {sched:?}"), Relation::Eq, r.rhs, -1.0 / 3.0, 1e-10));
    }
    Ok(())
}

fn kl_suite(instances: &[Instance], quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    for inst in instances {
        for &ell in inst.ells.iter().filter(|&&e| e > 1) {
            let st = inst.subtokenizer(ell)?;
            let label = format!("{} ell={ell}", inst.name);
            for t in [0.2, 0.5, 0.8] {
                let gap = kl_equality_gap(&inst.dist, &st, ell, t, budget)?;
                push(checks, Check::new(&label, format!("expected KL >= 0 at t={t}"), Relation::Le, 0.0, gap, 0.0));
            }
        }
    }
    // deterministic data: nothing is left to infer from any partial reveal
    let point = TokenDist::new(4, 2, (0..16).map(|i| if i == 9 { 1.0 } else { 0.0 }).collect())?;
    let st = Subtokenizer::build(4, 2, Strategy::Identity)?;
    for t in [0.2, 0.5, 0.8] {
        let gap = kl_equality_gap(&point, &st, 2, t, budget)?;
        push(checks, Check::new("point-mass-V4-L2 ell=2", format!("expected KL = 0 at t={t}"), Relation::Eq, gap, 0.0, 1e-10));
    }
    // product-uniform data: the coarse and fine objectives coincide
    let uni = TokenDist::uniform(4, 2)?;
    let coarse = optimal_nelbo(&uni, &Subtokenizer::build(4, 1, Strategy::Identity)?, quad, budget)?.value;
    let fine = optimal_nelbo(&uni, &st, quad, budget)?.value;
    push(checks, Check::new("product-uniform-V4-L2", "nelbo ell=2 = ell=1", Relation::Eq, fine, coarse, 1e-8));
    Ok(())
}

fn assignment_suite(quad: &Quadrature, budget: u64, checks: &mut Vec<Check>) -> Result<()> {
    let probs = crate::corpus::zipf_probs(8, 1.0);
    let q = TokenDist::iid(&probs, 1)?;
    let best = best_assignment_bruteforce(&probs, 3)?;
    let st_best = Subtokenizer::from_perm(8, 3, best.perm.clone(), StrategyKind::Greedy, None)?;
    let st_id = Subtokenizer::build(8, 3, Strategy::Identity)?;
    let nb = optimal_nelbo(&q, &st_best, quad, budget)?.value;
    let ni = optimal_nelbo(&q, &st_id, quad, budget)?.value;
    push(checks, Check::new("zipf-V8-L1 ell=3", "nelbo best assignment < identity", Relation::Lt, nb, ni, 1e-6));
    let hb = entropy_yt(&q, &st_best, 0.5, budget)?;
    let hi = entropy_yt(&q, &st_id, 0.5, budget)?;
    push(checks, Check::new("zipf-V8-L1 ell=3", "latent entropy identity <= best assignment", Relation::Le, hi, hb, 1e-12));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_defaults() {
        let r = run_suite("all", crate::oracle::DEFAULT_BUDGET).unwrap();
        assert!(r.all_pass(), "{:#?}", r.failures());
        assert!(r.checks.len() > 300);
    }

    #[test]
    fn relations() {
        assert!(Check::new("i", "n", Relation::Lt, 1.0, 2.0, 0.5).pass);
        assert!(!Check::new("i", "n", Relation::Lt, 1.6, 2.0, 0.5).pass);
        assert!(Check::new("i", "n", Relation::Le, 2.0, 2.0, 0.0).pass);
        assert!(run_suite("nope", 4096).is_err());
    }
}
