//! Training-iteration schedules for GPipe, 1F1B, Varuna-style spatial
//! sharing and ATLAS temporal sharing.
//!
//! Scheduling happens per DP-cell on a [`CellProblem`]; cells are
//! independent and identical, so a plan-wide [`Timeline`] replicates the
//! cell schedule with each cell's GPU ids.

mod list;
mod problem;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::allreduce_time;
use crate::error::SimError;
use crate::topology::ClusterTopology;
use crate::units::Nanos;
use crate::workload::{ModelSpec, ParallelismPlan};

pub use list::schedule_cell;
pub(crate) use list::{stage_caps, tie, untie, Item, Reservations};
pub use problem::{CellProblem, LinkSpec, ProblemOptions};
pub use validate::{validate_timeline, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "gpipe")]
    GPipe,
    #[serde(rename = "1f1b")]
    OneFOneB,
    #[serde(rename = "varuna")]
    Varuna,
    #[serde(rename = "atlas")]
    Atlas,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::GPipe, Policy::OneFOneB, Policy::Varuna, Policy::Atlas];

    pub fn name(self) -> &'static str {
        match self {
            Policy::GPipe => "gpipe",
            Policy::OneFOneB => "1f1b",
            Policy::Varuna => "varuna",
            Policy::Atlas => "atlas",
        }
    }

    /// Whether backward work wins ties against forward work.
    pub fn backward_first(self) -> bool {
        !matches!(self, Policy::GPipe)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownPolicy(pub String);

impl fmt::Display for UnknownPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown policy `{}` (expected gpipe, 1f1b, varuna or atlas)", self.0)
    }
}

impl std::error::Error for UnknownPolicy {}

impl FromStr for Policy {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gpipe" => Ok(Policy::GPipe),
            "1f1b" | "onef1b" | "megatron" => Ok(Policy::OneFOneB),
            "varuna" => Ok(Policy::Varuna),
            "atlas" => Ok(Policy::Atlas),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Forward,
    Backward,
    Recompute,
    AllReduce,
    /// Inference prefill placed into a bubble; never part of training.
    Prefill,
}

impl TaskKind {
    pub fn short(self) -> &'static str {
        match self {
            TaskKind::Forward => "F",
            TaskKind::Backward => "B",
            TaskKind::Recompute => "R",
            TaskKind::AllReduce => "AR",
            TaskKind::Prefill => "P",
        }
    }

    pub fn is_training(self) -> bool {
        self != TaskKind::Prefill
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    ActivationFwd,
    GradientBwd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub gpu_id: u32,
    pub cell_id: u32,
    pub pipeline_id: u32,
    pub kind: TaskKind,
    pub microbatch: u32,
    pub stage: u32,
    pub start: Nanos,
    pub end: Nanos,
}

impl ScheduledTask {
    pub fn start_ms(&self) -> f64 {
        self.start.as_ms()
    }

    pub fn end_ms(&self) -> f64 {
        self.end.as_ms()
    }

    pub fn duration(&self) -> Nanos {
        self.end - self.start
    }

    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::AllReduce => format!("AR s{}", self.stage),
            TaskKind::Prefill => format!("P{} g{}", self.microbatch, self.gpu_id),
            k => format!("{}{} s{}", k.short(), self.microbatch, self.stage),
        }
    }
}

/// A point-to-point message between adjacent stages of one pipeline.
///
/// `[start, wire_end)` occupies the link; the payload lands at `end`, one
/// propagation latency later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduledTransfer {
    pub cell_id: u32,
    pub pipeline_id: u32,
    pub microbatch: u32,
    pub from_stage: u32,
    pub to_stage: u32,
    pub direction: Direction,
    pub bytes: u64,
    pub start: Nanos,
    pub wire_end: Nanos,
    pub end: Nanos,
    /// Pipelines whose bandwidth this transfer uses at once.
    pub pooled_pipelines: u32,
}

impl ScheduledTransfer {
    /// Boundary index: the lower of the two stages.
    pub fn boundary(&self) -> u32 {
        self.from_stage.min(self.to_stage)
    }
}

/// Realized execution of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub policy: Policy,
    pub tasks: Vec<ScheduledTask>,
    pub transfers: Vec<ScheduledTransfer>,
    pub makespan: Nanos,
    /// Every GPU that belongs to the run, busy or not.
    pub gpus: Vec<u32>,
}

/// A precomputed schedule has the same shape as an executed one.
pub type Schedule = Timeline;

impl Timeline {
    pub fn makespan_ms(&self) -> f64 {
        self.makespan.as_ms()
    }

    /// Sorted, disjoint busy intervals per GPU, in `gpus` order.
    pub fn busy_intervals(&self) -> Vec<(u32, Vec<(Nanos, Nanos)>)> {
        let mut per: std::collections::BTreeMap<u32, Vec<(Nanos, Nanos)>> =
            self.gpus.iter().map(|&g| (g, Vec::new())).collect();
        for t in &self.tasks {
            if t.end > t.start {
                per.entry(t.gpu_id).or_default().push((t.start, t.end));
            }
        }
        per.into_iter()
            .map(|(g, mut v)| {
                v.sort();
                let mut merged: Vec<(Nanos, Nanos)> = Vec::with_capacity(v.len());
                for (s, e) in v {
                    match merged.last_mut() {
                        Some(last) if s <= last.1 => last.1 = last.1.max(e),
                        _ => merged.push((s, e)),
                    }
                }
                (g, merged)
            })
            .collect()
    }

    /// Stable order used for export and byte-level comparisons.
    pub fn sort(&mut self) {
        self.tasks.sort_by_key(|t| (t.start, t.gpu_id, t.kind, t.microbatch, t.end));
        self.transfers
            .sort_by_key(|t| (t.start, t.cell_id, t.pipeline_id, t.direction, t.from_stage, t.microbatch));
    }
}

/// Makespan of `t`.
pub fn iteration_time(t: &Timeline) -> f64 {
    t.makespan_ms()
}

/// Ratio of `t`'s makespan to the baseline's.
pub fn slowdown(t: &Timeline, baseline: &Timeline) -> f64 {
    t.makespan.0 as f64 / baseline.makespan.0 as f64
}

/// Output of scheduling one cell: ids are local (pipeline = LocalDPRank).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSchedule {
    pub tasks: Vec<CellTask>,
    pub transfers: Vec<CellTransfer>,
    pub makespan: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellTask {
    pub pipeline: u32,
    pub stage: u32,
    pub microbatch: u32,
    pub kind: TaskKind,
    pub start: Nanos,
    pub end: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellTransfer {
    pub pipeline: u32,
    pub microbatch: u32,
    /// Boundary between stage `boundary` and `boundary + 1`.
    pub boundary: u32,
    pub direction: Direction,
    pub start: Nanos,
    pub wire_end: Nanos,
    pub end: Nanos,
    pub pooled_pipelines: u32,
}

impl CellSchedule {
    /// Plan-wide timeline: the cell schedule repeated for every cell with
    /// `gpu_of(cell, pipeline, stage)` supplying GPU ids.
    pub fn replicate(
        &self,
        policy: Policy,
        cells: u32,
        bytes: u64,
        gpus: Vec<u32>,
        gpu_of: impl Fn(u32, u32, u32) -> u32,
    ) -> Timeline {
        let all: Vec<&CellSchedule> = (0..cells).map(|_| self).collect();
        assemble(policy, &all, bytes, gpus, gpu_of)
    }
}

/// Joins per-cell schedules (index = cell id) into one timeline.
pub fn assemble(
    policy: Policy,
    cells: &[&CellSchedule],
    bytes: u64,
    gpus: Vec<u32>,
    gpu_of: impl Fn(u32, u32, u32) -> u32,
) -> Timeline {
    let mut tasks = Vec::new();
    let mut transfers = Vec::new();
    let mut makespan = Nanos::ZERO;
    for (cell, sched) in cells.iter().enumerate() {
        let cell = cell as u32;
        makespan = makespan.max(sched.makespan);
        tasks.extend(sched.tasks.iter().map(|t| ScheduledTask {
            gpu_id: gpu_of(cell, t.pipeline, t.stage),
            cell_id: cell,
            pipeline_id: t.pipeline,
            kind: t.kind,
            microbatch: t.microbatch,
            stage: t.stage,
            start: t.start,
            end: t.end,
        }));
        transfers.extend(sched.transfers.iter().map(|x| {
            let (from_stage, to_stage) = match x.direction {
                Direction::ActivationFwd => (x.boundary, x.boundary + 1),
                Direction::GradientBwd => (x.boundary + 1, x.boundary),
            };
            ScheduledTransfer {
                cell_id: cell,
                pipeline_id: x.pipeline,
                microbatch: x.microbatch,
                from_stage,
                to_stage,
                direction: x.direction,
                bytes,
                start: x.start,
                wire_end: x.wire_end,
                end: x.end,
                pooled_pipelines: x.pooled_pipelines,
            }
        }));
    }
    let mut t = Timeline {
        policy,
        tasks,
        transfers,
        makespan,
        gpus,
    };
    t.sort();
    t
}

/// Global GPU id lookup for `(cell, pipeline, stage)` in `plan`.
pub fn plan_gpu_of(plan: &ParallelismPlan) -> impl Fn(u32, u32, u32) -> u32 + '_ {
    move |c, p, s| plan.cells[c as usize].pipelines[p as usize][s as usize].lead_gpu()
}

/// Schedules one cell of `plan` under `opts.policy` and replicates it.
pub fn schedule_plan(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: crate::workload::PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    let problem = CellProblem::from_plan(plan, model, topo, durations, opts)?;
    let cell = schedule_cell(&problem, opts.policy, opts.mem_limit)?;
    Ok(cell.replicate(
        opts.policy,
        plan.num_cells() as u32,
        problem.bytes,
        plan.gpu_ids(),
        plan_gpu_of(plan),
    ))
}

pub fn gpipe_schedule(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: crate::workload::PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    schedule_plan(plan, model, topo, durations, &opts.with_policy(Policy::GPipe))
}

pub fn onef1b_schedule(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: crate::workload::PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    schedule_plan(plan, model, topo, durations, &opts.with_policy(Policy::OneFOneB))
}

pub fn varuna_schedule(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: crate::workload::PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    schedule_plan(plan, model, topo, durations, &opts.with_policy(Policy::Varuna))
}

pub fn atlas_schedule(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: crate::workload::PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    schedule_plan(plan, model, topo, durations, &opts.with_policy(Policy::Atlas))
}

/// Duration of one stage's gradient all-reduce across `ring` replicas.
pub fn stage_allreduce(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    stage: usize,
    ring: u32,
) -> Nanos {
    let (a, b) = plan.cells[0].pipelines[0][stage].partition_range;
    let params: u64 = (a..b)
        .map(|k| model.layers_in_partition(k) as u64 * model.params_per_layer())
        .sum();
    let bw = topo.datacenters[plan.stage_dcs[stage]].intra_bw;
    Nanos::from_ms(allreduce_time(params, ring, bw))
}

/// Appends one all-reduce per (cell, pipeline, stage) GPU after its last
/// backward; with a single replica the task is a zero-length marker.
pub fn append_allreduce(
    mut t: Timeline,
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
) -> Timeline {
    let ring = plan.num_pipelines() as u32;
    let durs: Vec<Nanos> = (0..plan.num_stages())
        .map(|s| stage_allreduce(plan, model, topo, s, ring))
        .collect();
    // Replicas of a stage reduce together, so each starts once all are done.
    let mut stage_ready = vec![Nanos::ZERO; plan.num_stages()];
    for task in &t.tasks {
        if task.kind == TaskKind::Backward {
            let s = task.stage as usize;
            stage_ready[s] = stage_ready[s].max(task.end);
        }
    }
    let mut added = Vec::new();
    for (c, cell) in plan.cells.iter().enumerate() {
        for (p, pipe) in cell.pipelines.iter().enumerate() {
            for (s, stage) in pipe.iter().enumerate() {
                let start = stage_ready[s];
                added.push(ScheduledTask {
                    gpu_id: stage.lead_gpu(),
                    cell_id: c as u32,
                    pipeline_id: p as u32,
                    kind: TaskKind::AllReduce,
                    microbatch: 0,
                    stage: s as u32,
                    start,
                    end: start + durs[s],
                });
            }
        }
    }
    for a in &added {
        t.makespan = t.makespan.max(a.end);
    }
    t.tasks.extend(added);
    t.sort();
    t
}
