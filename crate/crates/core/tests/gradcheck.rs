use latt::grad::suite::{default_suite, run_suite};
use latt::grad::FdConfig;

#[test]
fn f64_suite_passes() {
    let cases = default_suite(42);
    let report = run_suite(&cases, FdConfig::default(), false).unwrap();
    for r in &report.rows {
        eprintln!(
            "{} {:.2e} {:.2e} skip={}",
            r.name, r.max_rel_err, r.max_abs_err, r.skipped
        );
    }
    assert!(report.passes(1e-6), "max rel err {:.3e}", report.max_rel_err());
    assert!(report.skipped() >= 2);
}

#[test]
fn mixed_suite_passes() {
    let cases = default_suite(42);
    let report = run_suite(&cases, FdConfig::mixed(), true).unwrap();
    let mut worst: Vec<_> = report.rows.iter().collect();
    worst.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    for r in worst.iter().take(10) {
        eprintln!("{} {:.2e} {:.2e}", r.name, r.max_rel_err, r.max_abs_err);
    }
    assert!(report.passes(1e-4), "max rel err {:.3e}", report.max_rel_err());
}
