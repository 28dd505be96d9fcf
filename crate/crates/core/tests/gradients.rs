mod common;

use common::{block_checks, op_checks};

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_checks();
    for c in &checks {
        println!("{:<18} err={:.3e} tol={:.0e}", c.name, c.error, c.tolerance);
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    assert!(failed.is_empty(), "gradient mismatch: {failed:?}");
}

#[test]
fn composed_blocks_match_finite_differences() {
    for c in block_checks() {
        println!("{:<18} err={:.3e}", c.name, c.error);
        assert!(c.passed(), "{} err={:.3e}", c.name, c.error);
    }
}
