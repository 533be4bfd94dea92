use nfmm_core::verify::{run_checks, VerifyOptions};

#[test]
fn all_checks_pass() {
    let results = run_checks(VerifyOptions::default());
    assert_eq!(results.len(), 8);
    for r in &results {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}

#[test]
fn corrupted_tables_fail_only_the_partition_check() {
    let results = run_checks(VerifyOptions { corrupt_tables: true });
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert_eq!(failed, ["partition exactness"]);
}
