use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geotrain::engine::run_problem;
use geotrain::fixtures::two_pipeline_cell;
use geotrain::schedule::Policy;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn geotrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geotrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = geotrain(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn metric(csv: &str, name: &str) -> f64 {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("no {name} in {csv}"))
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_cell_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("cell_two_pipelines.json");
    for policy in Policy::ALL {
        let out = dir.path().join(policy.name());
        run_ok(&["simulate", "--config", s(&cfg), "--policy", policy.name(), "--out", s(&out)]);
        let want = run_problem(&two_pipeline_cell(), policy, None).unwrap().makespan_ms();
        let got = metric(&fs::read_to_string(out.join("metrics.csv")).unwrap(), "iteration_ms");
        assert_eq!(got, want, "{policy}");
        let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
        assert!(!trace.as_array().unwrap().is_empty());
    }
    let varuna = fs::read_to_string(dir.path().join("varuna/metrics.csv")).unwrap();
    assert_eq!(metric(&varuna, "iteration_ms"), 38.0);
}

#[test]
fn failures_map_to_exit_codes_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.json");
    assert_eq!(geotrain(&["simulate", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"cell": {"pipelines": 0}}"#).unwrap();
    let o = geotrain(&["simulate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cell"));

    let testbed = config("testbed_12gpu.json");
    let o = geotrain(&["simulate", "--config", s(&testbed), "--mem-limit", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));

    let cell = config("cell_two_pipelines.json");
    assert_eq!(geotrain(&["select-dc", "--config", s(&cell), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(
        geotrain(&["simulate", "--config", s(&cell), "--policy", "pipedream", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert!(!out.exists());
}

#[test]
fn infeasible_placement_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(config("testbed_12gpu.json")).unwrap()).unwrap();
    doc["parallelism"]["D"] = 2.into();
    let cfg = dir.path().join("big.json");
    fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.path().join("out");
    assert_eq!(geotrain(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn bubbletea_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("testbed_12gpu.json");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        run_ok(&["bubbletea", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
        ["prefill_results.csv", "utilization.csv", "trace.json"].map(|f| fs::read(out.join(f)).unwrap())
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    assert_eq!(a, b);
    assert_ne!(a[0], c[0]);
    let util = String::from_utf8(a[1].clone()).unwrap();
    assert!(metric(&util, "utilization_after") >= 0.9);
}

#[test]
fn bubbletea_with_empty_trace_keeps_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("requests.csv");
    fs::write(&trace, "id,arrival_ms,tokens\n").unwrap();
    let out = dir.path().join("out");
    let cfg = config("testbed_12gpu.json");
    run_ok(&["bubbletea", "--config", s(&cfg), "--out", s(&out), s(&trace)]);
    let util = fs::read_to_string(out.join("utilization.csv")).unwrap();
    assert_eq!(metric(&util, "utilization_before"), metric(&util, "utilization_after"));
    assert_eq!(metric(&util, "accepted"), 0.0);
    assert_eq!(fs::read_to_string(out.join("prefill_results.csv")).unwrap().lines().count(), 1);
}

#[test]
fn select_dc_writes_the_staircase() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let table = run_ok(&["select-dc", "--config", s(&config("second_dc_sweep.json")), "--out", s(&out)]);
    assert!(table.contains("chosen"));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sweep.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 11);
    // Columns: fraction, second_dc_gpus, chosen_d, dcs_used, throughput, ...
    assert_eq!(rows[1][3], "1");
    let tput: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(tput.windows(2).all(|w| w[1] >= w[0]), "{tput:?}");
    assert!(out.join("selection.csv").exists());
}

#[test]
fn whatif_keeps_scenario_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_ok(&["whatif", "--config", s(&config("dc_set_1.json")), "--out", s(&out)]);
    let summary = fs::read_to_string(out.join("whatif_summary.csv")).unwrap();
    let names: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["1 DCs", "2 DCs", "3 DCs", "4 DCs", "5 DCs"]);
    let tput: Vec<f64> = summary.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(tput.windows(2).all(|w| w[1] > w[0]), "{tput:?}");
}

#[test]
fn trace_writes_task_and_transfer_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_ok(&["trace", "--config", s(&config("testbed_12gpu.json")), "--policy", "varuna", "--multi-conn", "true", "--out", s(&out)]);
    let tasks = fs::read_to_string(out.join("tasks.csv")).unwrap();
    assert!(tasks.starts_with("gpu_id,cell_id,pipeline_id,kind,microbatch,stage,start_ms,end_ms\n"));
    let transfers = fs::read_to_string(out.join("transfers.csv")).unwrap();
    // 3 pipelines x 4 microbatches x 3 boundaries x 2 directions.
    assert_eq!(transfers.lines().count(), 1 + 72);
}
