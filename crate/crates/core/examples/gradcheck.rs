//! Compares every autograd primitive against central finite differences.

use agr_lab::gradcheck::{check_all_primitives, MAX_REL_ERR};

fn main() {
    let mut worst = 0.0f64;
    for (name, r) in check_all_primitives() {
        println!("{name:<24} {:>4} coords  max rel err {:.2e}", r.checked, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst {worst:.2e} (limit {MAX_REL_ERR:.0e})");
}
