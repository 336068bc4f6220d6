//! Build subtokenizers at every granularity for a GPT-2 sized vocabulary and
//! round-trip a few ids.

use primelab::subtok::{max_granularity, Strategy, Subtokenizer};

fn main() -> primelab::Result<()> {
    let vocab = 50257;
    for ell in [1, 2, 4, 8, 16] {
        let st = Subtokenizer::build(vocab, ell, Strategy::Random(42))?;
        let code = st.encode(50256)?;
        assert_eq!(st.decode(&code)?, 50256);
        println!("ell = {ell:>2}  b = {:>5}  code space {:>6}  50256 -> {:?}", st.base(), st.code_space(), &*code);
    }
    println!("finest granularity for V = {vocab}: {}", max_granularity(vocab));

    // ids outside the vocabulary have no token
    let st = Subtokenizer::build(10, 2, Strategy::Identity)?;
    println!("V = 10, ell = 2: b = {}, index 12 -> {:?}", st.base(), st.token_of_index(12));
    println!("{}", st.to_json());
    Ok(())
}
