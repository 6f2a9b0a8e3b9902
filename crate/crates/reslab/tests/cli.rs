use reslab::harness::{read_series, run, Command, ExperimentConfig, SERIES_HEADER};
use std::process::Command as Process;

const SMALL: &[&str] = &[
    "grid.half_width=64.0",
    "grid.points=512",
    "model.eps=[0.2, 0.1]",
    "run.eps=0.2",
    "dynamics.tail_gamma_t=4.0",
    "ladder.multiple=8.0",
    "ladder.rungs=3",
];

fn small(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn default_config() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml")).unwrap()
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[dynamics]\ndt = 1e-3\nstep_size = 0.1\n").unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_reslab"))
        .args(["spectrum", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("step_size"), "{stderr}");
}

#[test]
fn spectrum_report_is_deterministic_and_echoes_config() {
    let text = default_config();
    let loaded = ExperimentConfig::parse(&text, &small(&[])).unwrap();
    let first = run(Command::Spectrum, &loaded, None).unwrap().render();
    let second = run(Command::Spectrum, &loaded, None).unwrap().render();
    assert_eq!(first, second);
    for line in text.lines() {
        assert!(first.contains(&format!("| {line}\n")), "missing echo of {line:?}");
    }
    for o in SMALL {
        assert!(first.contains(&format!("| {o}\n")));
    }
    assert!(first.contains("completeness_residual"));
    assert!(!first.contains("[timing]"));
}

#[test]
fn cli_exit_code_follows_the_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, default_config()).unwrap();
    let mut cmd = Process::new(env!("CARGO_BIN_EXE_reslab"));
    cmd.args(["fgr", "--config"]).arg(&path).arg("--out").arg(dir.path());
    for o in small(&[]) {
        cmd.args(["--override", &o]);
    }
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.starts_with("row ")).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    let all_pass = rows.iter().all(|r| r.contains(" PASS "));
    assert_eq!(out.status.success(), all_pass);
    let saved = std::fs::read_to_string(dir.path().join("fgr-report.txt")).unwrap();
    assert_eq!(saved, stdout);
}

#[test]
fn evolve_writes_a_series_that_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = ExperimentConfig::parse(&default_config(), &small(&[])).unwrap();
    let report = run(Command::Evolve, &loaded, Some(dir.path())).unwrap();
    assert_eq!(report.checks.iter().map(|c| c.id).collect::<Vec<_>>(), vec![8]);
    let path = report.artifacts.iter().find(|p| p.extension().is_some_and(|e| e == "csv")).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.lines().any(|l| l == format!("# {SERIES_HEADER}")));
    let series = read_series(path).unwrap();
    assert!(series.times.len() > 100);
    assert_eq!(series.times[0], 0.0);
    assert!((series.a0.norm() - 1.0).abs() < 1e-6);
    let last = series.amplitude.last().unwrap().norm();
    assert!(last < 0.1, "amplitude should have decayed, got {last}");
    assert!(series.weighted_norm.iter().all(|w| w.is_finite() && *w >= 0.0));
}
