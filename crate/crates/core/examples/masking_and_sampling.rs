//! Forward-mask a sentence of ids at a few times, then draw samples with the
//! exact posterior of a small Markov chain.

use primelab::kernels::{forward_mask, sample, Schedule, SubTokenGrid};
use primelab::oracle::ExactPosterior;
use primelab::trainer::MarkovChain;
use primelab::{Strategy, Subtokenizer};

fn show(g: &SubTokenGrid) -> String {
    (0..g.rows())
        .map(|r| g.row(r).iter().map(|c| c.map_or("_".to_string(), |v| v.to_string())).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> primelab::Result<()> {
    let st = Subtokenizer::build(8, 3, Strategy::Identity)?;
    let y0 = SubTokenGrid::encode(&st, &[5, 1, 7, 2])?;
    println!("t = 0.00  {}", show(&y0));
    for t in [0.25, 0.5, 0.75, 1.0] {
        let yt = forward_mask(&y0, &Schedule::Linear, t, 3)?;
        println!("t = {t:.2}  {}", show(&yt));
    }

    let chain = MarkovChain::sticky_zipf(8, 1.0, 0.5);
    let q = chain.to_dist(2)?;
    let post = ExactPosterior::new(&q, &st)?;
    let mut hits = vec![0usize; q.states()];
    let n = 4000;
    for seed in 0..n {
        let x = sample(&post, &st, 2, 16, &Schedule::Linear, seed)?;
        hits[q.index(&x)] += 1;
    }
    let mut top: Vec<usize> = (0..q.states()).collect();
    top.sort_by(|&a, &b| q.probs()[b].total_cmp(&q.probs()[a]));
    println!("\nsequence  q(x)    empirical");
    for &i in &top[..6] {
        println!("{:?}    {:.4}  {:.4}", q.tokens(i), q.probs()[i], hits[i] as f64 / n as f64);
    }
    Ok(())
}
