//! Exact accuracy of refinement with an ideal refiner whose verdicts are
//! flipped with probability eps, over a grid of boost factors.

use agr_lab::oracle::{oracle_agr_sweep, MarkovSource, RefinerKind, DEFAULT_BUDGET};

fn main() -> agr_lab::Result<()> {
    let src = MarkovSource::random(5, 1, 1.0, 3)?;
    let ws = [0.0, 0.05, 0.1, 0.5, 1.0, 2.0];
    let eps = [0.0, 0.2, 0.4, 0.5, 0.6];
    let rows = oracle_agr_sweep(&src, 4, 3, &ws, &eps, RefinerKind::Ideal, DEFAULT_BUDGET)?;
    println!("plain accuracy {:.4}", rows[0].plain);
    print!("{:>6}", "eps\\w");
    for w in ws {
        print!("{w:>9}");
    }
    println!();
    for e in eps {
        print!("{e:>6}");
        for r in rows.iter().filter(|r| r.eps == e) {
            print!("{:>+9.4}", r.agr - r.plain);
        }
        println!();
    }
    Ok(())
}
