//! How much closer the local two-sided predictor is to the full-context
//! predictor than the one-sided one, for random first-order sources and for
//! a long-range copy language.

use agr_lab::oracle::{locality_gap, LocalityOptions, MarkovSource};

fn main() -> agr_lab::Result<()> {
    let opts = LocalityOptions::default();
    println!("{:>3} {:>3} {:>9} {:>9} {:>9}", "V", "t", "uni", "bi", "gap");
    for (vocab, t) in [(2, 8), (4, 6), (6, 5), (8, 4)] {
        let src = MarkovSource::random(vocab, 1, 1.0, vocab as u64)?;
        let r = locality_gap(&src, t, &opts)?;
        println!("{vocab:>3} {t:>3} {:>9.5} {:>9.5} {:>+9.5}", r.uni, r.bi, r.gap);
    }
    let copy = locality_gap(&MarkovSource::copy(3, 4)?, 4, &opts)?;
    println!("copy, y_4 = y_0: gap {:+.4}", copy.gap);
    Ok(())
}
