//! Pure data parallelism: every GPU holds the whole model, runs its
//! microbatches, then joins one ring all-reduce over all GPUs.

use crate::comm::{allreduce_time, WanMode};
use crate::schedule::{Policy, ScheduledTask, TaskKind, Timeline};
use crate::topology::ClusterTopology;
use crate::units::{Bandwidth, Nanos};
use crate::workload::{ModelSpec, PhaseDurations};

/// Slowest edge of a ring that visits GPUs in topology order: intra-DC
/// edges use the DC fabric, and each DC-to-DC hop the WAN pair bandwidth.
pub fn ring_bandwidth(topo: &ClusterTopology, wan_mode: WanMode) -> Bandwidth {
    let used: Vec<usize> = (0..topo.num_dcs()).filter(|&d| topo.datacenters[d].gpu_count > 0).collect();
    let mut bw = Bandwidth(f64::INFINITY);
    for &d in &used {
        if topo.datacenters[d].gpu_count > 1 {
            bw = bw.min(topo.datacenters[d].intra_bw);
        }
    }
    if used.len() > 1 {
        for (i, &a) in used.iter().enumerate() {
            let b = used[(i + 1) % used.len()];
            bw = bw.min(wan_mode.pair_bandwidth(topo.latency_ms(a, b), &topo.wan));
        }
    }
    bw
}

/// One iteration on every GPU of `topo`. `durations` are per partition;
/// each GPU runs all partitions back to back, forward then backward per
/// microbatch.
pub fn dp_timeline(model: &ModelSpec, topo: &ClusterTopology, durations: PhaseDurations, wan_mode: WanMode) -> Timeline {
    let parts = model.partitions() as f64;
    let fwd = Nanos::from_ms(durations.fwd_ms * parts);
    let bwd = Nanos::from_ms(durations.bwd_ms * parts);
    let n = topo.total_gpus() as u32;
    let params = model.num_layers as u64 * model.params_per_layer();
    let ar = Nanos::from_ms(allreduce_time(params, n, ring_bandwidth(topo, wan_mode)));
    let mut tasks = Vec::new();
    let mut compute_end = Nanos::ZERO;
    for g in 0..n {
        let mut now = Nanos::ZERO;
        for m in 0..model.num_microbatches {
            for (kind, d) in [(TaskKind::Forward, fwd), (TaskKind::Backward, bwd)] {
                tasks.push(ScheduledTask {
                    gpu_id: g,
                    cell_id: 0,
                    pipeline_id: g,
                    kind,
                    microbatch: m,
                    stage: 0,
                    start: now,
                    end: now + d,
                });
                now += d;
            }
        }
        compute_end = compute_end.max(now);
    }
    for g in 0..n {
        tasks.push(ScheduledTask {
            gpu_id: g,
            cell_id: 0,
            pipeline_id: g,
            kind: TaskKind::AllReduce,
            microbatch: 0,
            stage: 0,
            start: compute_end,
            end: compute_end + ar,
        });
    }
    let mut t = Timeline {
        policy: Policy::GPipe,
        tasks,
        transfers: vec![],
        makespan: compute_end + ar,
        gpus: (0..n).collect(),
    };
    t.sort();
    t
}

/// Share of the iteration spent in the all-reduce.
pub fn allreduce_share(t: &Timeline) -> f64 {
    let ar = t
        .tasks
        .iter()
        .filter(|x| x.kind == TaskKind::AllReduce)
        .map(|x| x.duration().0)
        .max()
        .unwrap_or(0);
    ar as f64 / t.makespan.0 as f64
}
