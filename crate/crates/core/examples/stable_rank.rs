//! Singular values of a few hand-made matrices and of a freshly initialized
//! toy model's first layer.

use primelab::spectra::{singular_values, stable_rank, DenseMatrix};
use primelab::trainer::ToyModel;
use primelab::{Strategy, Subtokenizer};

fn main() -> primelab::Result<()> {
    let eye = DenseMatrix::identity(5);
    println!("I_5: stable rank {}", stable_rank(&eye)?);
    let d = DenseMatrix::diag(&[3.0, 1.0, 0.5]);
    println!("diag(3, 1, 0.5): sigma {:?}, stable rank {:.4}", singular_values(&d)?, stable_rank(&d)?);

    let st = Subtokenizer::build(16, 4, Strategy::Identity)?;
    let model = ToyModel::init(st, 4, 32, 64, 7);
    let w1 = model.to_checkpoint().matrix("W1")?;
    let sv = singular_values(&w1)?;
    println!("W1 {}x{}: top sigma {:.4}, stable rank {:.3}", w1.rows(), w1.cols(), sv[0], stable_rank(&w1)?);
    Ok(())
}
