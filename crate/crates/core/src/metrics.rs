//! Quantities derived from a finished timeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::schedule::{Direction, Timeline};
use crate::units::Nanos;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuUtilization {
    pub gpu_id: u32,
    pub busy_ms: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WanBusy {
    pub direction: Direction,
    /// Mean over (cell, WAN boundary) links of wire-busy time over the
    /// horizon; 0 when nothing crosses the WAN.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iteration_ms: f64,
    pub throughput_iters_per_s: f64,
    pub horizon_ms: f64,
    pub per_gpu: Vec<GpuUtilization>,
    pub mean_utilization: f64,
    /// `1 - mean_utilization`.
    pub bubble_fraction: f64,
    pub slowdown_vs_reference: Option<f64>,
    pub wan_busy: Vec<WanBusy>,
}

/// Busy time per GPU inside `[0, horizon)`, counting every task kind.
pub fn busy_per_gpu(t: &Timeline, horizon: Nanos) -> Vec<(u32, Nanos)> {
    t.busy_intervals()
        .into_iter()
        .map(|(g, iv)| {
            let busy = iv
                .iter()
                .map(|&(s, e)| Nanos(e.min(horizon).0.saturating_sub(s.0).max(0)))
                .fold(Nanos::ZERO, |a, b| a + b);
            (g, busy)
        })
        .collect()
}

/// Mean over GPUs of busy time over `horizon`; 0 for an empty run.
pub fn utilization(t: &Timeline, horizon: Nanos) -> f64 {
    if t.gpus.is_empty() || horizon.0 <= 0 {
        return 0.0;
    }
    let busy: i64 = busy_per_gpu(t, horizon).iter().map(|(_, b)| b.0).sum();
    busy as f64 / (horizon.0 as f64 * t.gpus.len() as f64)
}

pub fn bubble_fraction(t: &Timeline, horizon: Nanos) -> f64 {
    1.0 - utilization(t, horizon)
}

fn union_len(mut iv: Vec<(Nanos, Nanos)>, horizon: Nanos) -> i64 {
    iv.sort();
    let mut total = 0;
    let mut cur: Option<(Nanos, Nanos)> = None;
    for (s, e) in iv {
        let (s, e) = (s.min(horizon), e.min(horizon));
        match cur {
            Some((_, ce)) if s <= ce => cur = cur.map(|(cs, ce)| (cs, ce.max(e))),
            _ => {
                if let Some((cs, ce)) = cur {
                    total += (ce - cs).0;
                }
                cur = Some((s, e));
            }
        }
    }
    if let Some((cs, ce)) = cur {
        total += (ce - cs).0;
    }
    total
}

/// `wan[b]` marks the boundaries between stage `b` and `b + 1` that
/// cross datacenters. The horizon is the iteration makespan.
pub fn report(t: &Timeline, reference: Option<&Timeline>, wan: &[bool]) -> MetricsReport {
    let horizon = t.makespan;
    let h = horizon.0 as f64;
    let per_gpu: Vec<GpuUtilization> = busy_per_gpu(t, horizon)
        .into_iter()
        .map(|(gpu_id, b)| GpuUtilization {
            gpu_id,
            busy_ms: b.as_ms(),
            utilization: if h > 0.0 { b.0 as f64 / h } else { 0.0 },
        })
        .collect();
    let mean = utilization(t, horizon);

    let mut links: BTreeMap<(Direction, u32, u32), Vec<(Nanos, Nanos)>> = BTreeMap::new();
    for x in &t.transfers {
        let b = x.boundary();
        if wan.get(b as usize).copied().unwrap_or(false) {
            links.entry((x.direction, x.cell_id, b)).or_default().push((x.start, x.wire_end));
        }
    }
    let wan_busy = [Direction::ActivationFwd, Direction::GradientBwd]
        .into_iter()
        .map(|d| {
            let fracs: Vec<f64> = links
                .iter()
                .filter(|((dir, _, _), _)| *dir == d)
                .map(|(_, iv)| union_len(iv.clone(), horizon) as f64 / h)
                .collect();
            let fraction = if fracs.is_empty() || h <= 0.0 {
                0.0
            } else {
                fracs.iter().sum::<f64>() / fracs.len() as f64
            };
            WanBusy { direction: d, fraction }
        })
        .collect();

    let iteration_ms = t.makespan_ms();
    MetricsReport {
        iteration_ms,
        throughput_iters_per_s: if iteration_ms > 0.0 { 1000.0 / iteration_ms } else { 0.0 },
        horizon_ms: iteration_ms,
        per_gpu,
        mean_utilization: mean,
        bubble_fraction: 1.0 - mean,
        slowdown_vs_reference: reference.map(|r| crate::schedule::slowdown(t, r)),
        wan_busy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_problem;
    use crate::schedule::{CellProblem, LinkSpec, Policy, ScheduledTask, TaskKind};

    fn ms(x: i64) -> Nanos {
        Nanos(x * 1_000_000)
    }

    fn task(gpu: u32, s: i64, e: i64) -> ScheduledTask {
        ScheduledTask {
            gpu_id: gpu,
            cell_id: 0,
            pipeline_id: 0,
            kind: TaskKind::Forward,
            microbatch: 0,
            stage: gpu,
            start: ms(s),
            end: ms(e),
        }
    }

    fn timeline(tasks: Vec<ScheduledTask>, gpus: Vec<u32>, makespan: i64) -> Timeline {
        Timeline {
            policy: Policy::Atlas,
            tasks,
            transfers: vec![],
            makespan: ms(makespan),
            gpus,
        }
    }

    #[test]
    fn empty_and_full() {
        assert_eq!(utilization(&timeline(vec![], vec![], 0), Nanos::ZERO), 0.0);
        let full = timeline(vec![task(0, 0, 4), task(1, 0, 2), task(1, 2, 4)], vec![0, 1], 4);
        assert_eq!(utilization(&full, full.makespan), 1.0);
    }

    #[test]
    fn utilization_and_bubbles_sum_to_one_per_gpu() {
        let pr = CellProblem::uniform(2, 3, 4, ms(1), ms(2), Some(ms(1)), vec![LinkSpec::wan(ms(1), ms(4), ms(2)); 2]);
        let t = run_problem(&pr, Policy::Atlas, None).unwrap();
        let r = report(&t, Some(&t), &[true, true]);
        assert_eq!(r.slowdown_vs_reference, Some(1.0));
        assert!((r.mean_utilization + r.bubble_fraction - 1.0).abs() < 1e-12);
        for g in &r.per_gpu {
            let sum: i64 = t.tasks.iter().filter(|x| x.gpu_id == g.gpu_id).map(|x| x.duration().0).sum();
            assert!((g.busy_ms - Nanos(sum).as_ms()).abs() < 1e-9);
        }
        // Each pooled link carries 2 pipelines x 4 microbatches x 2 ms per direction.
        for w in &r.wan_busy {
            assert!((w.fraction - 16.0 / r.iteration_ms).abs() < 1e-9, "{w:?}");
        }
    }

    #[test]
    fn report_is_pure() {
        let t = timeline(vec![task(0, 1, 3)], vec![0, 1], 4);
        assert_eq!(report(&t, None, &[]), report(&t, None, &[]));
        assert_eq!(report(&t, None, &[]).mean_utilization, 0.25);
    }
}
