use agr_lab::gradcheck::{check_all_primitives, MAX_REL_ERR};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, report) in check_all_primitives() {
        println!("{name:<24} {:>4} coords  max rel err {:.2e}", report.checked, report.max_rel_err);
        assert!(report.checked >= 50, "{name}: only {} coordinates", report.checked);
        if report.max_rel_err >= MAX_REL_ERR {
            failures.push(format!("{name}: {:.3e}", report.max_rel_err));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
