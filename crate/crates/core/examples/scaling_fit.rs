//! Fit the power-law loss surface to noisy synthetic runs and extrapolate
//! the compute-optimal model size.

use primelab::scaling::{exponents, fit, log_grid, optimal_allocation, predict_loss, synthetic_points, ScalingFit};

fn main() -> primelab::Result<()> {
    let truth = ScalingFit::new(1.30, 400.0, 400.0, 0.37, 0.26);
    let points = synthetic_points(&truth, &log_grid(1e7, 1e10, 6), &log_grid(1e9, 1e12, 4), 0.005, 11);
    let report = fit(&points)?;
    let f = report.fit;
    println!("E = {:.3}  A = {:.1}  B = {:.1}  alpha = {:.3}  beta = {:.3}", f.e, f.a, f.b, f.alpha_n, f.beta_d);
    let x = exponents(&f);
    println!("a_hat = {:.3}  b_hat = {:.3}  G = {:.3}", x.a_hat, x.b_hat, x.g);
    for c in [1e19, 1e21, 1e23] {
        let a = optimal_allocation(&f, c);
        println!("C = {c:.0e}: N = {:.3e}, D = {:.3e}, loss {:.4}", a.n_opt, a.d_opt, predict_loss(&f, a.n_opt, a.d_opt));
    }
    Ok(())
}
