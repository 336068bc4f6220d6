//! Compare the hand-written backward pass with central differences.

use primelab::kernels::{Schedule, SubTokenGrid};
use primelab::trainer::{gradcheck, MarkovChain, ToyModel};
use primelab::{SplitMix64, Strategy, Subtokenizer};

fn main() -> primelab::Result<()> {
    let st = Subtokenizer::build(16, 2, Strategy::Random(1))?;
    let model = ToyModel::init(st.clone(), 4, 16, 32, 5);
    let chain = MarkovChain::sticky_zipf(16, 1.0, 0.2);
    let mut rng = SplitMix64::new(9);
    let batch = (0..6).map(|_| SubTokenGrid::encode(&st, &chain.sample(4, &mut rng))).collect::<primelab::Result<Vec<_>>>()?;
    for e in gradcheck(&model, &batch, &Schedule::Linear, 2, 12, 3, 1e-5)? {
        println!("{:>5} {:<3} analytic {:+.8}  numeric {:+.8}  rel {:.2e}", e.index, e.tensor, e.analytic, e.numeric, e.rel_err);
    }
    Ok(())
}
