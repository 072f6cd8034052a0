//! Runs the full gradient audit in f64 and prints one line per check.

use std::time::Instant;

use ktda::audit::{all_passed, run_suite};

fn main() -> ktda::Result<()> {
    let start = Instant::now();
    let reports = run_suite(false)?;
    for r in &reports {
        let status = if r.passed { "ok  " } else { "FAIL" };
        println!("{status} {:<22} max_rel_error {:.3e}  (tol {:.0e})", r.op_name, r.max_rel_error, r.tolerance);
    }
    println!("{} checks in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if !all_passed(&reports) {
        std::process::exit(1);
    }
    Ok(())
}
