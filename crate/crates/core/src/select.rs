//! DC selection: sweep the DP-cell count, place partitions greedily, and
//! keep the smallest cell count with the best throughput.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::comm::{allreduce_time, WanMode};
use crate::error::SimError;
use crate::schedule::{schedule_cell, CellProblem, Policy, ProblemOptions};
use crate::topology::ClusterTopology;
use crate::workload::{build_plan, greedy_partition_counts, ComputeProfile, ModelSpec, ParallelismPlan, PlanParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionInput {
    pub topo: ClusterTopology,
    /// `partitions()` of the model is P.
    pub model: ModelSpec,
    pub compute: ComputeProfile,
    pub cell_size: u32,
    /// Defaults to `total_gpus / (C·P·tp)`.
    pub d_max: Option<u32>,
    pub dc_order: Option<Vec<usize>>,
    pub tp_degree: u32,
    pub recompute: bool,
    pub mem_limit: Option<u32>,
}

impl SelectionInput {
    pub fn new(topo: ClusterTopology, model: ModelSpec, compute: ComputeProfile, cell_size: u32) -> Self {
        SelectionInput {
            topo,
            model,
            compute,
            cell_size,
            d_max: None,
            dc_order: None,
            tp_degree: 1,
            recompute: true,
            mem_limit: None,
        }
    }

    pub fn effective_d_max(&self) -> u32 {
        self.d_max.unwrap_or_else(|| {
            let per_cell = self.cell_size as u64 * self.model.partitions() as u64 * self.tp_degree as u64;
            (self.topo.total_gpus() / per_cell.max(1)) as u32
        })
    }

    fn params(&self, d: u32) -> PlanParams {
        PlanParams {
            dp_cells: d,
            cell_size: self.cell_size,
            tp_degree: self.tp_degree,
            dc_order: self.dc_order.clone(),
        }
    }

    fn options(&self, policy: Policy) -> ProblemOptions {
        ProblemOptions {
            policy,
            wan_mode: WanMode::MultiConnection,
            recompute: self.recompute,
            mem_limit: self.mem_limit,
        }
    }
}

/// One swept cell count. Infeasible rows have infinite time and zero
/// throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub d: u32,
    /// Partitions hosted per DC, in topology order; empty when infeasible.
    pub partitions: Vec<u32>,
    pub pp_time_ms: f64,
    pub allreduce_time_ms: f64,
    pub total_time_ms: f64,
    pub throughput: f64,
}

impl SelectionRow {
    pub fn feasible(&self) -> bool {
        self.total_time_ms.is_finite()
    }

    pub fn dcs_used(&self) -> usize {
        self.partitions.iter().filter(|&&n| n > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    /// `None` when no cell count fits.
    pub chosen_d: Option<u32>,
    pub gpus_used: u64,
}

impl SelectionReport {
    pub fn chosen(&self) -> Option<&SelectionRow> {
        let d = self.chosen_d?;
        self.rows.iter().find(|r| r.d == d)
    }

    pub fn throughput(&self) -> f64 {
        self.chosen().map_or(0.0, |r| r.throughput)
    }
}

/// Makespan of one ATLAS cell of `plan`, in ms.
pub fn get_latency_pp(inp: &SelectionInput, plan: &ParallelismPlan) -> Result<f64, SimError> {
    cell_makespan(inp, plan, Policy::Atlas)
}

fn cell_makespan(inp: &SelectionInput, plan: &ParallelismPlan, policy: Policy) -> Result<f64, SimError> {
    let durations = inp.compute.resolve(&inp.model, &inp.topo);
    let pr = CellProblem::from_plan(plan, &inp.model, &inp.topo, durations, &inp.options(policy))?;
    Ok(schedule_cell(&pr, policy, inp.mem_limit)?.makespan.as_ms())
}

/// Slowest stage all-reduce across `n` replicas, each over its DC's fabric.
pub fn get_latency_dp(model: &ModelSpec, topo: &ClusterTopology, plan: &ParallelismPlan, n: u32) -> f64 {
    let pipe = &plan.cells[0].pipelines[0];
    pipe.iter()
        .map(|stage| {
            let (a, b) = stage.partition_range;
            let params: u64 = (a..b)
                .map(|k| model.layers_in_partition(k) as u64 * model.params_per_layer())
                .sum();
            allreduce_time(params, n, topo.datacenters[stage.dc].intra_bw)
        })
        .fold(0.0, f64::max)
}

fn infeasible(d: u32) -> SelectionRow {
    SelectionRow {
        d,
        partitions: Vec::new(),
        pp_time_ms: f64::INFINITY,
        allreduce_time_ms: f64::INFINITY,
        total_time_ms: f64::INFINITY,
        throughput: 0.0,
    }
}

/// Sweeps D = 1..=D_max. Rows with the same placement share one cell
/// schedule, since the cell makespan does not depend on D otherwise.
pub fn select(inp: &SelectionInput) -> Result<SelectionReport, SimError> {
    let d_max = inp.effective_d_max();
    let partitions = inp.model.partitions();
    let mut cache: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut rows = Vec::with_capacity(d_max as usize);
    for d in 1..=d_max {
        let params = inp.params(d);
        let counts = match greedy_partition_counts(&inp.topo, partitions, &params) {
            Ok(c) => c,
            Err(crate::error::PlanError::InsufficientGpus { .. }) => {
                rows.push(infeasible(d));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let plan = build_plan(&inp.topo, &inp.model, &params)?;
        let pp = match cache.get(&counts) {
            Some(&t) => t,
            None => {
                let t = get_latency_pp(inp, &plan)?;
                cache.insert(counts.clone(), t);
                t
            }
        };
        let ar = get_latency_dp(&inp.model, &inp.topo, &plan, d * inp.cell_size);
        let total = pp + ar;
        rows.push(SelectionRow {
            d,
            partitions: counts,
            pp_time_ms: pp,
            allreduce_time_ms: ar,
            total_time_ms: total,
            throughput: (d * inp.cell_size) as f64 / total,
        });
    }
    // Ascending scan with a strict comparison keeps the smallest maximizer.
    let mut chosen: Option<&SelectionRow> = None;
    for r in rows.iter().filter(|r| r.feasible()) {
        if chosen.is_none_or(|c| r.throughput > c.throughput) {
            chosen = Some(r);
        }
    }
    let chosen_d = chosen.map(|r| r.d);
    let gpus_used = chosen_d.map_or(0, |d| {
        d as u64 * inp.cell_size as u64 * partitions as u64 * inp.tp_degree as u64
    });
    Ok(SelectionReport {
        rows,
        chosen_d,
        gpus_used,
    })
}

/// The baseline run with as many independent Varuna pipelines as the
/// GPUs allow; each pipeline gets its own node-pair WAN share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub pipelines: u32,
    pub partitions: Vec<u32>,
    pub pp_time_ms: f64,
    pub allreduce_time_ms: f64,
    pub total_time_ms: f64,
    pub throughput: f64,
}

/// Largest feasible pipeline count under the same greedy placement, or
/// `None` if not even one pipeline fits.
pub fn varuna_baseline(inp: &SelectionInput) -> Result<Option<BaselineRow>, SimError> {
    let partitions = inp.model.partitions();
    let per_pipeline = partitions as u64 * inp.tp_degree as u64;
    let mut n = (inp.topo.total_gpus() / per_pipeline.max(1)) as u32;
    while n > 0 {
        let params = PlanParams {
            dp_cells: n,
            cell_size: 1,
            tp_degree: inp.tp_degree,
            dc_order: inp.dc_order.clone(),
        };
        match greedy_partition_counts(&inp.topo, partitions, &params) {
            Ok(counts) => {
                let plan = build_plan(&inp.topo, &inp.model, &params)?;
                let pp = cell_makespan(inp, &plan, Policy::Varuna)?;
                let ar = get_latency_dp(&inp.model, &inp.topo, &plan, n);
                let total = pp + ar;
                return Ok(Some(BaselineRow {
                    pipelines: n,
                    partitions: counts,
                    pp_time_ms: pp,
                    allreduce_time_ms: ar,
                    total_time_ms: total,
                    throughput: n as f64 / total,
                }));
            }
            Err(crate::error::PlanError::InsufficientGpus { .. }) => n -= 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub input: SelectionInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub report: SelectionReport,
    pub varuna: Option<BaselineRow>,
}

impl ScenarioResult {
    /// ATLAS throughput over the Varuna baseline's, minus one.
    pub fn gain_over_varuna(&self) -> Option<f64> {
        let v = self.varuna.as_ref()?;
        (v.throughput > 0.0).then(|| self.report.throughput() / v.throughput - 1.0)
    }
}

fn evaluate(s: &Scenario) -> Result<ScenarioResult, SimError> {
    Ok(ScenarioResult {
        name: s.name.clone(),
        report: select(&s.input)?,
        varuna: varuna_baseline(&s.input)?,
    })
}

/// Evaluates every scenario; results keep the input order.
pub fn whatif(scenarios: &[Scenario]) -> Result<Vec<ScenarioResult>, SimError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        scenarios.par_iter().map(evaluate).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        scenarios.iter().map(evaluate).collect()
    }
}

/// One step of the second-DC sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Second-DC size as a fraction of the first.
    pub fraction: f64,
    pub second_dc_gpus: u32,
    pub chosen_d: Option<u32>,
    pub dcs_used: usize,
    pub throughput: f64,
    /// Throughput over the single-DC (F = 0) throughput.
    pub normalized: f64,
    /// The chosen D forced to place what it can in the second DC first;
    /// `None` when the chosen plan already spans both DCs or the second DC
    /// cannot host a partition.
    pub cross_dc_total_ms: Option<f64>,
    /// `cross_dc_total_ms` over the chosen row's total, minus one.
    pub cross_dc_inflation: Option<f64>,
}

/// Sweeps the second DC over `steps` equal fractions of the first.
/// `make` builds the input for a given two-DC topology.
pub fn f_sweep(
    first: u32,
    steps: u32,
    make: impl Fn(u32) -> SelectionInput + Sync,
) -> Result<Vec<SweepRow>, SimError> {
    let eval = |i: u32| -> Result<(u32, SelectionReport, Option<f64>), SimError> {
        let second = first * i / steps;
        let inp = make(second);
        let report = select(&inp)?;
        let forced = match report.chosen() {
            Some(row) if row.dcs_used() == 1 && second > 0 => {
                let mut forced = inp.clone();
                let mut order = inp.dc_order.clone().unwrap_or_else(|| inp.topo.default_dc_order());
                order.reverse();
                forced.dc_order = Some(order);
                forced.d_max = Some(row.d);
                let r = select(&forced)?;
                r.rows
                    .last()
                    .filter(|x| x.feasible() && x.dcs_used() > 1)
                    .map(|x| x.total_time_ms)
            }
            _ => None,
        };
        Ok((second, report, forced))
    };
    let results: Vec<_> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..=steps).into_par_iter().map(eval).collect::<Result<_, _>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..=steps).map(eval).collect::<Result<Vec<_>, _>>()?
        }
    };
    let base = results.first().map_or(0.0, |(_, r, _)| r.throughput());
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(i, (second, report, forced))| {
            let chosen = report.chosen();
            let total = chosen.map(|r| r.total_time_ms);
            SweepRow {
                fraction: i as f64 / steps as f64,
                second_dc_gpus: second,
                chosen_d: report.chosen_d,
                dcs_used: chosen.map_or(0, SelectionRow::dcs_used),
                throughput: report.throughput(),
                normalized: if base > 0.0 { report.throughput() / base } else { 0.0 },
                cross_dc_total_ms: forced,
                cross_dc_inflation: forced.zip(total).map(|(f, t)| f / t - 1.0),
            }
        })
        .collect())
}
