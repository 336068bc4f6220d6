//! Per-position sub-token entropy of Zipf counts under each index
//! assignment, printed as CSV.

use primelab::corpus::{entropy_report, report_csv, zipf_counts};

fn main() -> primelab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let vocab: usize = args.first().map_or(50257, |s| s.parse().unwrap());
    let ell: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let counts = zipf_counts(vocab, 1.0, 1 << 40);
    let rows = entropy_report(&counts, ell, &[1, 2, 3])?;
    for r in &rows {
        eprintln!("{:<8} {:>4} {:.4}", r.strategy, r.seed.map(|s| s.to_string()).unwrap_or_default(), r.average_bits);
    }
    print!("{}", report_csv(&rows)?);
    Ok(())
}
