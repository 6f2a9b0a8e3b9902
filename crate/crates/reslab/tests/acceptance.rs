//! Runs `verify` on the shipped default config and prints one line per acceptance row.
//! Verdicts are printed, not asserted: a failing row is a measured outcome.

use reslab::harness::{run_and_emit, Command, ExperimentConfig};
use std::io::Write;

#[test]
fn acceptance_rows() {
    let path = std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml"));
    let loaded = ExperimentConfig::load(path, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run_and_emit(Command::Verify, &loaded, Some(dir.path())).unwrap();

    // Written to the stderr handle directly so the lines show without --nocapture.
    let mut out = std::io::stderr().lock();
    let ids: Vec<u8> = report.checks.iter().map(|c| c.id).collect();
    assert_eq!(ids, (1..=11).collect::<Vec<u8>>());
    for c in &report.checks {
        writeln!(
            out,
            "criterion {:>2} [{}] {}: {} (tolerance {})",
            c.id,
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        )
        .unwrap();
        assert!(!c.measured.starts_with("error"), "row {} did not run: {}", c.id, c.measured);
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    writeln!(out, "acceptance: {passed}/11 criteria pass").unwrap();
    assert!(dir.path().join("verify-report.txt").exists());
}
