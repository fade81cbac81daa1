//! Trace and CSV renderings of a timeline.
//!
//! Chrome trace events: `{name, cat, ph: "X", ts, dur, pid, tid, args}` with
//! `ts`/`dur` in microseconds. Tasks use `pid` = cell id and `tid` = GPU id;
//! transfers use `pid` = cell id and `tid` = `LINK_TID_BASE + 2·boundary +
//! direction` (0 forward, 1 backward).

use serde::Serialize;

use crate::metrics::MetricsReport;
use crate::schedule::{Direction, Timeline};
use crate::select::{ScenarioResult, SweepRow};

pub const LINK_TID_BASE: u64 = 1_000_000;

#[derive(Debug, Serialize)]
struct TraceArgs {
    cell: u32,
    pipeline: u32,
    microbatch: u32,
    stage: u32,
}

#[derive(Debug, Serialize)]
struct TraceEvent {
    name: String,
    cat: &'static str,
    ph: &'static str,
    ts: f64,
    dur: f64,
    pid: u32,
    tid: u64,
    args: TraceArgs,
}

fn dir_index(d: Direction) -> u64 {
    match d {
        Direction::ActivationFwd => 0,
        Direction::GradientBwd => 1,
    }
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::ActivationFwd => "activation",
        Direction::GradientBwd => "gradient",
    }
}

pub fn chrome_trace(t: &Timeline) -> String {
    let us = |n: crate::units::Nanos| n.0 as f64 / 1000.0;
    let mut events: Vec<TraceEvent> = t
        .tasks
        .iter()
        .map(|x| TraceEvent {
            name: x.label(),
            cat: x.kind.short(),
            ph: "X",
            ts: us(x.start),
            dur: us(x.end - x.start),
            pid: x.cell_id,
            tid: x.gpu_id as u64,
            args: TraceArgs {
                cell: x.cell_id,
                pipeline: x.pipeline_id,
                microbatch: x.microbatch,
                stage: x.stage,
            },
        })
        .collect();
    events.extend(t.transfers.iter().map(|x| TraceEvent {
        name: format!("{} m{} s{}->s{}", dir_name(x.direction), x.microbatch, x.from_stage, x.to_stage),
        cat: "transfer",
        ph: "X",
        ts: us(x.start),
        dur: us(x.end - x.start),
        pid: x.cell_id,
        tid: LINK_TID_BASE + 2 * x.boundary() as u64 + dir_index(x.direction),
        args: TraceArgs {
            cell: x.cell_id,
            pipeline: x.pipeline_id,
            microbatch: x.microbatch,
            stage: x.from_stage,
        },
    }));
    serde_json::to_string(&events).expect("trace events serialize")
}

#[derive(Serialize)]
struct TaskRow {
    gpu_id: u32,
    cell_id: u32,
    pipeline_id: u32,
    kind: &'static str,
    microbatch: u32,
    stage: u32,
    start_ms: f64,
    end_ms: f64,
}

#[derive(Serialize)]
struct TransferRow {
    cell_id: u32,
    pipeline_id: u32,
    microbatch: u32,
    from_stage: u32,
    to_stage: u32,
    direction: &'static str,
    bytes: u64,
    start_ms: f64,
    wire_end_ms: f64,
    end_ms: f64,
    pooled_pipelines: u32,
}

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>, header: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for r in rows {
        w.serialize(r).expect("csv row");
        any = true;
    }
    if !any {
        w.write_record(header).expect("csv header");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

pub fn tasks_csv(t: &Timeline) -> String {
    to_csv(
        t.tasks.iter().map(|x| TaskRow {
            gpu_id: x.gpu_id,
            cell_id: x.cell_id,
            pipeline_id: x.pipeline_id,
            kind: x.kind.short(),
            microbatch: x.microbatch,
            stage: x.stage,
            start_ms: x.start_ms(),
            end_ms: x.end_ms(),
        }),
        &["gpu_id", "cell_id", "pipeline_id", "kind", "microbatch", "stage", "start_ms", "end_ms"],
    )
}

pub fn transfers_csv(t: &Timeline) -> String {
    to_csv(
        t.transfers.iter().map(|x| TransferRow {
            cell_id: x.cell_id,
            pipeline_id: x.pipeline_id,
            microbatch: x.microbatch,
            from_stage: x.from_stage,
            to_stage: x.to_stage,
            direction: dir_name(x.direction),
            bytes: x.bytes,
            start_ms: x.start.as_ms(),
            wire_end_ms: x.wire_end.as_ms(),
            end_ms: x.end.as_ms(),
            pooled_pipelines: x.pooled_pipelines,
        }),
        &[
            "cell_id",
            "pipeline_id",
            "microbatch",
            "from_stage",
            "to_stage",
            "direction",
            "bytes",
            "start_ms",
            "wire_end_ms",
            "end_ms",
            "pooled_pipelines",
        ],
    )
}

/// `metric,value` rows; per-GPU utilization follows as `gpu_<id>_utilization`.
pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("iteration_ms".into(), r.iteration_ms.to_string()),
        ("throughput_iters_per_s".into(), r.throughput_iters_per_s.to_string()),
        ("horizon_ms".into(), r.horizon_ms.to_string()),
        ("mean_utilization".into(), r.mean_utilization.to_string()),
        ("bubble_fraction".into(), r.bubble_fraction.to_string()),
    ];
    if let Some(s) = r.slowdown_vs_reference {
        rows.push(("slowdown_vs_reference".into(), s.to_string()));
    }
    for w in &r.wan_busy {
        rows.push((format!("wan_busy_{}", dir_name(w.direction)), w.fraction.to_string()));
    }
    for g in &r.per_gpu {
        rows.push((format!("gpu_{}_utilization", g.gpu_id), g.utilization.to_string()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"]).expect("csv header");
    for (k, v) in rows {
        w.write_record([k, v]).expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

/// Partition counts per DC joined with `;`, e.g. `30;30;0`.
fn counts(p: &[u32]) -> String {
    p.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Serialize)]
struct SelectionCsvRow<'a> {
    scenario: &'a str,
    d: u32,
    partitions: String,
    pp_time_ms: f64,
    allreduce_time_ms: f64,
    total_time_ms: f64,
    throughput: f64,
    chosen: bool,
}

/// One row per (scenario, D). Infeasible rows carry `inf` times and zero
/// throughput.
pub fn selection_csv(results: &[ScenarioResult]) -> String {
    to_csv(
        results.iter().flat_map(|r| {
            r.report.rows.iter().map(|row| SelectionCsvRow {
                scenario: &r.name,
                d: row.d,
                partitions: counts(&row.partitions),
                pp_time_ms: row.pp_time_ms,
                allreduce_time_ms: row.allreduce_time_ms,
                total_time_ms: row.total_time_ms,
                throughput: row.throughput,
                chosen: r.report.chosen_d == Some(row.d),
            })
        }),
        &[
            "scenario",
            "d",
            "partitions",
            "pp_time_ms",
            "allreduce_time_ms",
            "total_time_ms",
            "throughput",
            "chosen",
        ],
    )
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    scenario: &'a str,
    chosen_d: Option<u32>,
    gpus_used: u64,
    throughput: f64,
    varuna_pipelines: Option<u32>,
    varuna_throughput: Option<f64>,
    gain_over_varuna_pct: Option<f64>,
}

/// One row per scenario: the chosen D against the Varuna baseline.
pub fn whatif_summary_csv(results: &[ScenarioResult]) -> String {
    to_csv(
        results.iter().map(|r| SummaryRow {
            scenario: &r.name,
            chosen_d: r.report.chosen_d,
            gpus_used: r.report.gpus_used,
            throughput: r.report.throughput(),
            varuna_pipelines: r.varuna.as_ref().map(|v| v.pipelines),
            varuna_throughput: r.varuna.as_ref().map(|v| v.throughput),
            gain_over_varuna_pct: r.gain_over_varuna().map(|g| 100.0 * g),
        }),
        &[
            "scenario",
            "chosen_d",
            "gpus_used",
            "throughput",
            "varuna_pipelines",
            "varuna_throughput",
            "gain_over_varuna_pct",
        ],
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    to_csv(
        rows,
        &[
            "fraction",
            "second_dc_gpus",
            "chosen_d",
            "dcs_used",
            "throughput",
            "normalized",
            "cross_dc_total_ms",
            "cross_dc_inflation",
        ],
    )
}

/// Aligned plain-text table of a CSV document, for terminals.
pub fn pretty_table(csv_text: &str) -> String {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = rd
        .records()
        .map(|r| r.expect("own csv parses").iter().map(str::to_string).collect())
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:>w$}", w = width[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
