//! Generate-then-refine with exact models of a small Markov source, showing
//! each candidate and the refiner's verdict.

use agr_lab::agr::{agr_predict, RefineConfig};
use agr_lab::oracle::{brute_force_agr, MarkovSource, NextOracle, SecondToLastOracle};

fn main() -> agr_lab::Result<()> {
    let src = MarkovSource::random(5, 1, 0.5, 7)?;
    let f_n = NextOracle { source: &src, block_size: 32 };
    let f_s = SecondToLastOracle { source: &src, l: 2, block_size: 32 };
    let cfg = RefineConfig { k: 4, w: 0.5, l: 2, ..Default::default() };

    let mut rng = rand::rng();
    for _ in 0..3 {
        let ctx = src.sample(6, &mut rng);
        let (chosen, trace) = agr_predict(&f_n, &f_s, &ctx, &cfg)?;
        println!("context {ctx:?}, previous token {}", trace.prev);
        for c in &trace.candidates {
            println!("  candidate {}  p = {:.3}  refiner says {}  verdict {}", c.id, c.p_n, c.refiner_argmax, c.verdict);
        }
        println!("  plain {}  refined {chosen}  brute force {}", trace.plain, brute_force_agr(&src, &ctx, cfg.k, cfg.w)?);
    }
    Ok(())
}
