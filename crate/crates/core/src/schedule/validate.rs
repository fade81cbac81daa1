//! Independent checks of a timeline against the problem it claims to solve.

use std::collections::{BTreeSet, HashMap};

use crate::units::Nanos;

use super::list::stage_caps;
use super::{CellProblem, Direction, TaskKind, Timeline};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub detail: String,
}

type Tm = (u32, u32, u32, u32);

/// Every constraint broken by `t`; empty means valid.
///
/// Links are exclusive per (cell, boundary, direction) when a transfer
/// pools the cell's bandwidth and per (cell, pipeline, boundary, direction)
/// otherwise. Occupancy is the serialization interval `[start, wire_end)`.
pub fn validate_timeline(t: &Timeline, pr: &CellProblem, mem_limit: Option<u32>) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut bad = |rule: &'static str, detail: String| v.push(Violation { rule, detail });

    let mut by_gpu: HashMap<u32, Vec<(Nanos, Nanos, String)>> = HashMap::new();
    let mut fwd: HashMap<Tm, (Nanos, Nanos)> = HashMap::new();
    let mut bwd: HashMap<Tm, (Nanos, Nanos, u32)> = HashMap::new();
    let mut rec: HashMap<Tm, (Nanos, Nanos, u32)> = HashMap::new();
    let mut cells = BTreeSet::new();
    let mut end_max = Nanos::ZERO;
    for task in &t.tasks {
        end_max = end_max.max(task.end);
        let key = (task.cell_id, task.pipeline_id, task.microbatch, task.stage);
        let positive = task.end > task.start;
        if task.kind == TaskKind::Prefill {
            if positive {
                by_gpu
                    .entry(task.gpu_id)
                    .or_default()
                    .push((task.start, task.end, task.label()));
            }
            continue;
        }
        if task.kind != TaskKind::AllReduce && !positive {
            bad("positive_duration", task.label());
        }
        if task.start.0 < 0 || task.end < task.start {
            bad("positive_duration", task.label());
        }
        if positive {
            by_gpu
                .entry(task.gpu_id)
                .or_default()
                .push((task.start, task.end, task.label()));
        }
        let dup = match task.kind {
            TaskKind::Forward => fwd.insert(key, (task.start, task.end)).is_some(),
            TaskKind::Backward => bwd.insert(key, (task.start, task.end, task.gpu_id)).is_some(),
            TaskKind::Recompute => rec.insert(key, (task.start, task.end, task.gpu_id)).is_some(),
            TaskKind::AllReduce | TaskKind::Prefill => false,
        };
        if dup {
            bad("conservation", format!("duplicate {} in cell {}", task.label(), task.cell_id));
        }
        cells.insert(task.cell_id);
    }

    for (gpu, mut iv) in by_gpu {
        iv.sort();
        for w in iv.windows(2) {
            if w[1].0 < w[0].1 {
                bad("gpu_exclusive", format!("gpu {gpu}: {} overlaps {}", w[0].2, w[1].2));
            }
        }
    }

    for &c in &cells {
        for p in 0..pr.pipelines {
            for s in 0..pr.stages {
                for m in 0..pr.microbatches {
                    let key = (c, p, m, s);
                    if !fwd.contains_key(&key) || !bwd.contains_key(&key) {
                        bad("conservation", format!("missing F/B c{c} p{p} m{m} s{s}"));
                        continue;
                    }
                    let wants_r = pr.recompute[s as usize].0 > 0;
                    match (rec.get(&key), wants_r) {
                        (Some(&(_, r_end, r_gpu)), true) => {
                            let (b_start, _, b_gpu) = bwd[&key];
                            if r_end != b_start || r_gpu != b_gpu {
                                bad("recompute_adjacent", format!("c{c} p{p} m{m} s{s}"));
                            }
                        }
                        (None, false) => {}
                        _ => bad("conservation", format!("recompute mismatch c{c} p{p} m{m} s{s}")),
                    }
                    if fwd[&key].1 > bwd[&key].0 {
                        bad("dependency", format!("backward before forward c{c} p{p} m{m} s{s}"));
                    }
                }
            }
        }
    }

    let mut seen_xfer: HashMap<(u32, u32, u32, u32, Direction), ()> = HashMap::new();
    let mut links: HashMap<(u32, u32, Direction, Option<u32>), Vec<(Nanos, Nanos)>> = HashMap::new();
    for x in &t.transfers {
        end_max = end_max.max(x.end);
        let b = x.boundary();
        let (c, p, m) = (x.cell_id, x.pipeline_id, x.microbatch);
        if b + 1 >= pr.stages {
            bad("transfer_shape", format!("boundary {b} out of range"));
            continue;
        }
        let oriented = match x.direction {
            Direction::ActivationFwd => x.from_stage == b && x.to_stage == b + 1,
            Direction::GradientBwd => x.from_stage == b + 1 && x.to_stage == b,
        };
        if !oriented {
            bad("transfer_shape", format!("direction/boundary mismatch c{c} p{p} m{m} b{b}"));
        }
        if seen_xfer.insert((c, p, m, b, x.direction), ()).is_some() {
            bad("conservation", format!("duplicate transfer c{c} p{p} m{m} b{b}"));
        }
        let link = pr.links[b as usize];
        let pooled = x.pooled_pipelines > 1 || link.shared_under(t.policy);
        let wire = if pooled { link.pooled_wire } else { link.spatial_wire };
        if x.wire_end - x.start != wire || x.end - x.wire_end != link.latency {
            bad("transfer_time", format!("c{c} p{p} m{m} b{b} {:?}", x.direction));
        }
        let (producer, consumer) = match x.direction {
            Direction::ActivationFwd => (fwd.get(&(c, p, m, b)).map(|f| f.1), fwd.get(&(c, p, m, b + 1)).map(|f| f.0)),
            Direction::GradientBwd => (bwd.get(&(c, p, m, b + 1)).map(|f| f.1), bwd.get(&(c, p, m, b)).map(|f| f.0)),
        };
        if producer.is_some_and(|e| x.start < e) {
            bad("dependency", format!("transfer before producer c{c} p{p} m{m} b{b} {:?}", x.direction));
        }
        if consumer.is_some_and(|s| s < x.end) {
            bad("dependency", format!("consumer before arrival c{c} p{p} m{m} b{b} {:?}", x.direction));
        }
        let owner = if pooled { None } else { Some(p) };
        links
            .entry((c, b, x.direction, owner))
            .or_default()
            .push((x.start, x.wire_end));
    }
    let expected = cells.len() * (pr.pipelines * pr.microbatches * (pr.stages - 1) * 2) as usize;
    if seen_xfer.len() != expected {
        bad("conservation", format!("{} transfers, expected {expected}", seen_xfer.len()));
    }
    for ((c, b, dir, owner), mut iv) in links {
        iv.sort();
        for w in iv.windows(2) {
            if w[1].0 < w[0].1 {
                bad("link_exclusive", format!("c{c} b{b} {dir:?} pipeline {owner:?}"));
            }
        }
    }

    if let Ok(caps) = stage_caps(pr, t.policy, mem_limit) {
        for (key, &(f_start, _)) in &fwd {
            let (c, p, m, s) = *key;
            let Some(cap) = caps[s as usize] else { continue };
            let live = (0..pr.microbatches)
                .filter(|&m2| {
                    let k2 = (c, p, m2, s);
                    match (fwd.get(&k2), bwd.get(&k2)) {
                        (Some(f), Some(b)) => f.0 <= f_start && f_start < b.1,
                        _ => false,
                    }
                })
                .count();
            if live as u32 > cap {
                bad("memory_cap", format!("c{c} p{p} s{s}: {live} in flight when m{m} starts (cap {cap})"));
            }
        }
    }

    if end_max != t.makespan {
        bad("makespan", format!("makespan {} but last event ends {}", t.makespan, end_max));
    }
    v
}
