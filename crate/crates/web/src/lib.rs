//! Browser bindings for the demo page: run one slot-level cell under a
//! policy, look up WAN bandwidth for a latency, and pick a DP-cell count
//! for a set of datacenters. Results cross the boundary as JSON strings.

use geotrain::comm::{single_tcp_bandwidth, transfer_time};
use geotrain::engine::run_problem;
use geotrain::fixtures::{named_topology, sim_input, INTRA_BW_GBPS, WAN_LATENCY_MS};
use geotrain::metrics::utilization;
use geotrain::schedule::{CellProblem, LinkSpec, Policy};
use geotrain::select::{select, varuna_baseline};
use geotrain::topology::WanProfile;
use geotrain::units::{Bandwidth, Nanos};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Bar {
    gpu: u32,
    kind: &'static str,
    label: String,
    start: f64,
    end: f64,
}

#[derive(Serialize)]
struct CellRun {
    policy: &'static str,
    makespan: f64,
    utilization: f64,
    gpus: u32,
    bars: Vec<Bar>,
}

/// Cell of `pipelines` pipelines over `stages` unit stages, two stages per
/// DC, so every second boundary crosses the WAN. A WAN hop costs
/// `spatial_wire` units per pipeline or `pooled_wire` when pooled.
pub fn cell_json(
    policy: &str,
    pipelines: u32,
    stages: u32,
    microbatches: u32,
    spatial_wire: f64,
    pooled_wire: f64,
    recompute: bool,
) -> Result<String, String> {
    let policy: Policy = policy.parse().map_err(|e: geotrain::schedule::UnknownPolicy| e.to_string())?;
    if !(1..=8).contains(&pipelines) || !(1..=12).contains(&stages) || !(1..=16).contains(&microbatches) {
        return Err("pipelines 1-8, stages 1-12, microbatches 1-16".into());
    }
    if !(spatial_wire >= 0.0 && pooled_wire >= 0.0 && spatial_wire <= 100.0 && pooled_wire <= 100.0) {
        return Err("wire times must lie in 0-100 units".into());
    }
    let unit = Nanos::from_ms(1.0);
    let links = (0..stages - 1)
        .map(|b| {
            if b % 2 == 1 {
                LinkSpec::wan(Nanos::ZERO, Nanos::from_ms(spatial_wire), Nanos::from_ms(pooled_wire))
            } else {
                LinkSpec::intra(Nanos::ZERO, Nanos::ZERO)
            }
        })
        .collect();
    let pr = CellProblem::uniform(
        pipelines,
        stages,
        microbatches,
        unit,
        Nanos(2 * unit.0),
        recompute.then_some(unit),
        links,
    );
    let t = run_problem(&pr, policy, None).map_err(|e| e.to_string())?;
    let run = CellRun {
        policy: policy.name(),
        makespan: t.makespan_ms(),
        utilization: utilization(&t, t.makespan),
        gpus: pipelines * stages,
        bars: t
            .tasks
            .iter()
            .map(|x| Bar {
                gpu: x.gpu_id,
                kind: x.kind.short(),
                label: x.label(),
                start: x.start_ms(),
                end: x.end_ms(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&run).expect("cell run serializes"))
}

#[derive(Serialize)]
struct Link {
    latency_ms: f64,
    single_mbps: f64,
    transfer_ms: f64,
}

/// Single-connection bandwidth at `latency_ms` and the time to move
/// `mib` MiB over it.
pub fn link_json(latency_ms: f64, mib: f64) -> Result<String, String> {
    if !(latency_ms >= 0.0 && latency_ms <= 1000.0) || !(mib > 0.0 && mib <= 1e6) {
        return Err("latency must lie in 0-1000 ms and size in (0, 1e6] MiB".into());
    }
    let bw = single_tcp_bandwidth(latency_ms, &WanProfile::with_latencies(vec![vec![0.0]]));
    let bytes = (mib * (1u64 << 20) as f64).round() as u64;
    let link = Link {
        latency_ms,
        single_mbps: bw.as_mbps(),
        transfer_ms: transfer_time(bytes, bw, latency_ms).map_err(|e| e.to_string())?,
    };
    Ok(serde_json::to_string(&link).expect("link serializes"))
}

#[derive(Serialize)]
struct Row {
    d: u32,
    partitions: Vec<u32>,
    total_ms: f64,
    throughput: f64,
}

#[derive(Serialize)]
struct Selection {
    rows: Vec<Row>,
    chosen_d: Option<u32>,
    gpus_used: u64,
    varuna_pipelines: Option<u32>,
    varuna_throughput: Option<f64>,
}

/// DP-cell count choice for DCs of the given GPU counts (comma separated),
/// 60 single-layer partitions and 60 microbatches, 40 ms between DCs.
pub fn select_json(gpus: &str, c: u32) -> Result<String, String> {
    let counts: Vec<u32> = gpus
        .split(',')
        .map(|x| x.trim().parse::<u32>().map_err(|_| format!("`{}` is not a GPU count", x.trim())))
        .collect::<Result<_, _>>()?;
    if counts.is_empty() || counts.len() > 8 || counts.iter().any(|&n| n == 0 || n > 5000) {
        return Err("1-8 datacenters of 1-5000 GPUs each".into());
    }
    if !(1..=8).contains(&c) {
        return Err("C must lie in 1-8".into());
    }
    let topo = named_topology(&counts, WAN_LATENCY_MS, Bandwidth::from_gbps(INTRA_BW_GBPS));
    let inp = sim_input(topo, c);
    let report = select(&inp).map_err(|e| e.to_string())?;
    let varuna = varuna_baseline(&inp).map_err(|e| e.to_string())?;
    let out = Selection {
        rows: report
            .rows
            .iter()
            .map(|r| Row {
                d: r.d,
                partitions: r.partitions.clone(),
                total_ms: if r.feasible() { r.total_time_ms } else { -1.0 },
                throughput: r.throughput,
            })
            .collect(),
        chosen_d: report.chosen_d,
        gpus_used: report.gpus_used,
        varuna_pipelines: varuna.as_ref().map(|v| v.pipelines),
        varuna_throughput: varuna.map(|v| v.throughput),
    };
    Ok(serde_json::to_string(&out).expect("selection serializes"))
}

#[wasm_bindgen]
pub fn simulate_cell(
    policy: &str,
    pipelines: u32,
    stages: u32,
    microbatches: u32,
    spatial_wire: f64,
    pooled_wire: f64,
    recompute: bool,
) -> Result<String, JsError> {
    cell_json(policy, pipelines, stages, microbatches, spatial_wire, pooled_wire, recompute).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn wan_link(latency_ms: f64, mib: f64) -> Result<String, JsError> {
    link_json(latency_ms, mib).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn select_cells(gpus: &str, c: u32) -> Result<String, JsError> {
    select_json(gpus, c).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use geotrain::fixtures::two_pipeline_cell;

    fn parse(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn default_cell_is_the_fixture() {
        for policy in ["varuna", "atlas"] {
            let v = parse(&cell_json(policy, 2, 6, 4, 2.0, 1.0, true).unwrap());
            let want = run_problem(&two_pipeline_cell(), policy.parse().unwrap(), None).unwrap();
            assert_eq!(v["makespan"], want.makespan_ms());
            assert_eq!(v["bars"].as_array().unwrap().len(), want.tasks.len());
        }
        assert!(cell_json("pipedream", 2, 6, 4, 2.0, 1.0, true).is_err());
        assert!(cell_json("atlas", 0, 6, 4, 2.0, 1.0, true).is_err());
    }

    #[test]
    fn link_reproduces_the_table() {
        let v = parse(&link_json(40.0, 96.0).unwrap());
        assert_eq!(v["single_mbps"], 293.0);
        let t = v["transfer_ms"].as_f64().unwrap();
        assert!((t - (40.0 + (96u64 << 20) as f64 / 36_625.0)).abs() < 1e-9);
        assert!(link_json(-1.0, 1.0).is_err());
    }

    #[test]
    fn selection_picks_a_row() {
        let v = parse(&select_json("600, 60", 2).unwrap());
        assert_eq!(v["chosen_d"], 5);
        assert!(select_json("600,x", 2).is_err());
        assert!(select_json("600", 0).is_err());
    }
}
