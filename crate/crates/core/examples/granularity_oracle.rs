//! Exact optimal NELBO of a Zipf instance as the granularity grows, next to
//! the data entropy.

use primelab::corpus::zipf_probs;
use primelab::oracle::{entropy_bound, entropy_yt, optimal_nelbo, TokenDist};
use primelab::{Quadrature, Strategy, Subtokenizer};

fn main() -> primelab::Result<()> {
    let q = TokenDist::iid(&zipf_probs(16, 1.0), 2)?;
    let quad = Quadrature::default();
    println!("H(x0) = {:.6} nats", q.entropy());
    for ell in [1, 2, 4] {
        let st = Subtokenizer::build(16, ell, Strategy::Identity)?;
        let r = optimal_nelbo(&q, &st, &quad, 1 << 16)?;
        let h = entropy_yt(&q, &st, 0.5, 1 << 16)?;
        let bound = entropy_bound(2, ell, st.base(), 0.5);
        println!(
            "ell = {ell}: nelbo {:.6} (posterior route {:.6}), H(y_t) at alpha 0.5 = {h:.4} bits <= {bound:.4}",
            r.route_decomposition, r.route_posterior
        );
    }
    Ok(())
}
