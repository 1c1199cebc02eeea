//! One-sided one-sample t-test on per-run accuracy differences.

use agr_lab::stats::one_sample_t_test;

fn main() -> agr_lab::Result<()> {
    let deltas = [0.0012, -0.0004, 0.0020, 0.0008, 0.0011, 0.0003, 0.0016, -0.0001, 0.0009, 0.0014];
    let r = one_sample_t_test(&deltas)?;
    println!("t = {:.3}, df = {}, p = {:.5}", r.t, r.df, r.p);
    Ok(())
}
