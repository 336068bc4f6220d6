//! Train the toy denoiser on a sticky Markov chain and compare its NELBO
//! with the exact optimum.
//!
//! cargo run --release --example markov_training -- [lambda] [steps] [ell] [strategy]

use std::time::Instant;

use primelab::oracle::{nelbo_by_decomposition, ExactInstance};
use primelab::trainer::{eval_nelbo, train, EvalConfig, MarkovChain, TrainConfig};
use primelab::{Quadrature, StrategyKind};

fn main() -> primelab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lambda: f64 = args.first().map_or(0.1, |s| s.parse().unwrap());
    let steps: usize = args.get(1).map_or(5000, |s| s.parse().unwrap());
    let ell: usize = args.get(2).map_or(4, |s| s.parse().unwrap());
    let strategy = match args.get(3).map(String::as_str) {
        Some("random") => StrategyKind::Random,
        _ => StrategyKind::Identity,
    };
    let chain = MarkovChain::sticky_zipf(16, 1.0, lambda);
    let q = chain.to_dist(4)?;
    let cfg = TrainConfig { ell, steps, strategy, perm_seed: 1, ..TrainConfig::default() };
    let st = cfg.subtokenizer()?;
    let quad = Quadrature::default();
    let inst = ExactInstance::new(&q, &st, 1 << 16)?;
    let optimum = nelbo_by_decomposition(&inst, &quad);
    println!("H(x0) = {:.4} nats, optimum at ell = {ell}: {optimum:.4}", q.entropy());

    let start = Instant::now();
    let out = train(&cfg, |rng| chain.sample(4, rng))?;
    let secs = start.elapsed().as_secs_f64();
    let eval = eval_nelbo(&out.model, &q, &st, &quad, &EvalConfig { mc_samples: 20_000, ..EvalConfig::default() })?;
    println!(
        "trained {steps} steps in {secs:.1}s: NELBO {:.4} +- {:.4}, ratio to optimum {:.4}",
        eval.value,
        eval.std_error,
        eval.value / optimum
    );
    Ok(())
}
