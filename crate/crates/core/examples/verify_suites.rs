//! Run every oracle suite on the shipped instances and list any failures.

use primelab::verify::{run_suite, SUITES};

fn main() -> primelab::Result<()> {
    for suite in SUITES {
        let r = run_suite(suite, 4096)?;
        println!("{suite:<14} {:>4} passed {:>3} failed", r.passed, r.failed);
        for c in r.failures() {
            println!("  {} / {}: {} vs {}", c.instance, c.name, c.lhs, c.rhs);
        }
    }
    Ok(())
}
