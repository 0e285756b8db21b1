use std::path::Path;

use kfac_pipe::cli::run_with;
use kfac_pipe::trace::parse_trace;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("kfac-pipe").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const UNIT: &str = "[costs]\nt_f = 1.0\nt_b = 1.0\n";
const KFAC: &str = "[costs]\nt_f = 1.0\nt_b = 1.0\nt_curv = 1.0\nt_inv = 2.0\nt_prec = 0.25\n";

#[test]
fn schedule_prints_makespan_and_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let unit = write(dir.path(), "unit.cfg", UNIT);
    let (code, out, _) = run(&["schedule", "--method", "gpipe", "--depth", "4", "--micro", "4", "--costs", &unit]);
    assert_eq!(code, 0);
    assert!(out.contains("makespan: 14\n"), "{out}");
    assert!(out.contains("utilization: 0.571\n"), "{out}");
}

#[test]
fn schedule_trace_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let unit = write(dir.path(), "unit.cfg", UNIT);
    let trace = dir.path().join("s.trace");
    let json = dir.path().join("m.json");
    let (code, _, err) = run(&[
        "schedule", "--method", "gpipe", "--depth", "2", "--micro", "2", "--costs", &unit, "--trace",
        trace.to_str().unwrap(), "--out", json.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(parse_trace(&std::fs::read_to_string(&trace).unwrap()).unwrap().len(), 8);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(m["makespan"], 6.0);
}

#[test]
fn assign_writes_a_trace_and_reports_the_refresh_period() {
    let dir = tempfile::tempdir().unwrap();
    let kfac = write(dir.path(), "kfac.cfg", KFAC);
    let trace = dir.path().join("out.trace");
    let args = [
        "assign", "--method", "chimera", "--depth", "4", "--micro", "4", "--costs", &kfac, "--trace",
        trace.to_str().unwrap(),
    ];
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("refresh_period: "), "{out}");
    let first = std::fs::read(&trace).unwrap();
    assert!(!parse_trace(std::str::from_utf8(&first).unwrap()).unwrap().is_empty());
    run(&args);
    assert_eq!(std::fs::read(&trace).unwrap(), first);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        dir.path(),
        "all.toml",
        "[config]\nmethod = \"1f1b\"\ndepth = 4\nmicro_batches = 4\n[costs]\nt_f = 1.0\nt_b = 2.0\n",
    );
    let (code, out, _) = run(&["schedule", "--costs", &f]);
    assert_eq!(code, 0);
    assert!(out.contains("makespan: 21\n"), "{out}");
    let (code, out, _) = run(&["schedule", "--costs", &f, "--micro", "8"]);
    assert_eq!(code, 0);
    assert!(out.contains("makespan: 33\n"), "{out}");
}

#[test]
fn chimera_odd_depth_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let unit = write(dir.path(), "unit.cfg", UNIT);
    let (code, _, err) = run(&["model", "--method", "chimera", "--depth", "3", "--micro", "4", "--costs", &unit]);
    assert_eq!(code, 2);
    assert!(err.contains("even"), "{err}");
}

#[test]
fn unknown_flag_prints_usage() {
    let (code, _, err) = run(&["schedule", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "[costs]\nTf = 1.0\nt_b = 1.0\n");
    let (code, _, err) = run(&["schedule", "--method", "gpipe", "--depth", "2", "--micro", "2", "--costs", &bad]);
    assert_eq!(code, 2);
    assert!(err.contains("Tf"), "{err}");
}

#[test]
fn infeasible_assignment_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let kfac = write(dir.path(), "kfac.cfg", KFAC);
    let (code, _, err) = run(&[
        "assign", "--method", "gpipe", "--depth", "2", "--micro", "2", "--costs", &kfac, "--horizon-cap", "1",
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("unplaced"), "{err}");
}

#[test]
fn model_from_an_architecture_preset() {
    let (code, out, err) = run(&[
        "model", "--method", "1f1b", "--depth", "8", "--micro", "8", "--arch", "bert-base", "--device", "v100",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("critical path: C_f = 15, C_b = 15"), "{out}");
    assert!(out.contains("speedup_vs_skip: "), "{out}");
}

#[test]
fn sweep_writes_the_fixed_header() {
    let (code, out, _) = run(&["sweep", "--method", "gpipe", "--depth", "4", "--micro-batch-size", "1,2"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "method,D,N_micro,B_micro,S,recompute,T_pipe,T_bubble,M_pipe,T_kfac_plus,M_kfac_plus,utilization,throughput,ratio,refresh_period,speedup_vs_skip"
    );
    assert_eq!(lines.len(), 1 + 3 * 2);
}

#[test]
fn kfac_verify_and_demo() {
    let (code, out, _) = run(&["kfac", "verify"]);
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL"));
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let (code, out, _) = run(&["kfac", "demo", "--out", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("reached 1e-3 at step 5"), "{out}");
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("step,loss,staleness\n"));
}

#[test]
fn missing_costs_file_is_an_io_error() {
    let (code, _, err) = run(&["schedule", "--costs", "/nonexistent/x.cfg", "--method", "gpipe", "--depth", "2", "--micro", "2"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/x.cfg"), "{err}");
}
