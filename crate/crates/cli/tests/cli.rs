//! End-to-end checks of the binary: determinism, round trips, exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn streamqoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamqoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn print_config_shows_defaults_and_roundtrips() {
    let out = streamqoe(&["--print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("admission_cap = 10"));
    assert!(text.contains("offered_load = 0.96"));
    // The printed config is itself a valid config file.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("printed.toml");
    write(&cfg, &text);
    let again = streamqoe(&["--config", cfg.to_str().unwrap(), "--print-config"]);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn solve_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[system]\nadmission_cap = 4\n[solve]\nstartup_thresholds_s = [0.0, 15.0]\n",
    );
    let a = streamqoe(&["solve", "--config", cfg.to_str().unwrap()]);
    let b = streamqoe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines.len(), 5); // header + 2 thresholds x 2 classes
    assert!(lines[0].starts_with("admission_cap,"));
    // Every data row parses back to numbers/known tokens.
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert!(fields[5] == "short" || fields[5] == "long");
        let p: f64 = fields[6].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn solve_k1_never_starves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[system]\nadmission_cap = 1\n[solve]\nstartup_thresholds_s = [0.0]\n",
    );
    let out = streamqoe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for row in text.trim().lines().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        let p: f64 = fields[6].parse().unwrap();
        assert_eq!(p, 0.0, "row {row}");
    }
}

#[test]
fn simulate_is_seed_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[system]\nadmission_cap = 3\n\
         [solve]\nstartup_thresholds_s = [0.0]\n\
         [simulate]\naccepted_flows = 2000\nreplicas = 2\nwarmup_flows = 200\n",
    );
    let a = streamqoe(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    let b = streamqoe(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    let c = streamqoe(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "8"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn compare_reports_gaps_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[system]\nadmission_cap = 3\n\
         [solve]\nstartup_thresholds_s = [10.0]\n\
         [simulate]\naccepted_flows = 20000\nreplicas = 2\nwarmup_flows = 2000\n\
         [compare]\ntolerance = 0.03\n",
    );
    let out = streamqoe(&["compare", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[8], "true", "row outside tolerance: {row}");
    }
}

#[test]
fn fit_selects_the_generating_family() {
    // Synthetic mixture trace through the public generator, written in the
    // view-record format, fitted back.
    let records = streamqoe::flowsim::generate_workload(
        &streamqoe::workload::reference_viewing_params(),
        0.01,
        0.6,
        60_000,
        12,
    );
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("records.csv");
    let mut buf = Vec::new();
    streamqoe::trace::write_view_records(&mut buf, &records).unwrap();
    std::fs::write(&trace, &buf).unwrap();

    let out_path = dir.path().join("fit.json");
    let out = streamqoe(&[
        "fit",
        "--input",
        trace.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["selected_family"], "hyper_exp");
    assert_eq!(report["samples"], 60_000);
    let r2s: Vec<f64> = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["adjusted_r2"].as_f64().unwrap())
        .collect();
    assert!(r2s[0] > r2s[1] && r2s[1] > r2s[2]);
}

#[test]
fn infer_samples_from_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let table_path = dir.path().join("buckets.txt");
    let models = streamqoe::inference::synthetic_bucket_models(
        &streamqoe::inference::default_bucket_boundaries(),
    );
    streamqoe::inference::BucketTable::new(models)
        .unwrap()
        .write_file(&table_path)
        .unwrap();

    let out = streamqoe(&[
        "infer",
        "--table",
        table_path.to_str().unwrap(),
        "--duration",
        "637",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["bucket_lo_s"], 500.0);
    assert_eq!(v["bucket_hi_s"], 1000.0);
    let viewing = v["sampled_viewing_time_s"].as_f64().unwrap();
    assert!(viewing > 0.0 && viewing <= 1.05 * 637.0);
    let gamma = v["posterior_short"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&gamma));

    // Identical seed reproduces the draw.
    let again = streamqoe(&[
        "infer",
        "--table",
        table_path.to_str().unwrap(),
        "--duration",
        "637",
        "--seed",
        "3",
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn exit_codes_reflect_error_class() {
    // Validation error: no input for fit.
    let out = streamqoe(&["fit"]);
    assert_eq!(out.status.code(), Some(1));
    // Validation error: malformed trace.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    write(&bad, "not,a,header\n");
    let out = streamqoe(&["fit", "--input", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    // IO error: missing file.
    let out = streamqoe(&["fit", "--input", "/nonexistent/records.csv"]);
    assert_eq!(out.status.code(), Some(3));
    // Validation error: unknown config key.
    let cfg = dir.path().join("bad.toml");
    write(&cfg, "[system]\nadmission_gap = 3\n");
    let out = streamqoe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    // Validation error: empty sweep.
    let cfg2 = dir.path().join("empty.toml");
    write(&cfg2, "[solve]\nstartup_thresholds_s = []\n");
    let out = streamqoe(&["solve", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    // Success path exits zero.
    let out = streamqoe(&["--print-config"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn solve_matches_golden_file() {
    // Frozen from a run whose values were cross-checked against the
    // closed-form product distribution (rejection probability at K=3 is
    // 0.96^3 / sum(0.96^n) = 0.234906...) and the simulation oracle.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        "[system]\nadmission_cap = 3\n[solve]\nstartup_thresholds_s = [0.0, 10.0, 30.0]\n",
    );
    let out = streamqoe(&["solve", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let expected = include_str!("golden/solve_k3.csv");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);
}

#[test]
fn trace_driven_simulation_consumes_the_record_format() {
    let records = streamqoe::flowsim::generate_workload(
        &streamqoe::workload::reference_viewing_params(),
        0.0095,
        0.6,
        8_000,
        21,
    );
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut buf = Vec::new();
    streamqoe::trace::write_view_records(&mut buf, &records).unwrap();
    std::fs::write(&trace, &buf).unwrap();
    let cfg = dir.path().join("exp.toml");
    write(
        &cfg,
        &format!(
            "[solve]\nstartup_thresholds_s = [0.0]\n\
             [simulate]\naccepted_flows = 4000\nreplicas = 1\nwarmup_flows = 500\ntrace = \"{}\"\n",
            trace.display()
        ),
    );
    let out = streamqoe(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 3);
}
