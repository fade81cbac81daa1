//! Named scenarios: the slot-level two-pipeline cell, the 12-GPU testbed,
//! the six-node GPT-B setups and the large simulated DC sets.
//!
//! Compute comes from a communication-to-compute ratio of 3 unless stated:
//! one forward pass takes a third of a pipeline's node-pair transfer time.

use crate::comm::WanMode;
use crate::error::SimError;
use crate::schedule::{schedule_plan, CellProblem, LinkSpec, ProblemOptions, Timeline};
use crate::select::SelectionInput;
use crate::topology::ClusterTopology;
use crate::units::{Bandwidth, Nanos};
use crate::workload::{build_plan, ComputeProfile, ModelSpec, ParallelismPlan, PhaseDurations, PlanParams};

pub const WAN_LATENCY_MS: f64 = 40.0;
pub const INTRA_BW_GBPS: f64 = 100.0;

/// Topology, model and placement parameters that together define a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub topo: ClusterTopology,
    pub model: ModelSpec,
    pub compute: ComputeProfile,
    pub params: PlanParams,
}

impl Cluster {
    pub fn plan(&self) -> ParallelismPlan {
        build_plan(&self.topo, &self.model, &self.params).expect("fixture plans fit")
    }

    pub fn durations(&self) -> PhaseDurations {
        self.compute.resolve(&self.model, &self.topo)
    }

    pub fn problem(&self, opts: &ProblemOptions) -> Result<CellProblem, SimError> {
        CellProblem::from_plan(&self.plan(), &self.model, &self.topo, self.durations(), opts)
    }

    pub fn timeline(&self, opts: &ProblemOptions) -> Result<Timeline, SimError> {
        schedule_plan(&self.plan(), &self.model, &self.topo, self.durations(), opts)
    }

    /// `wan[b]` for every stage boundary of the plan.
    pub fn wan_boundaries(&self) -> Vec<bool> {
        let plan = self.plan();
        (0..plan.num_stages().saturating_sub(1)).map(|b| plan.crosses_dc(b)).collect()
    }
}

pub fn named_topology(gpus: &[u32], latency_ms: f64, intra: Bandwidth) -> ClusterTopology {
    let names: Vec<String> = (1..=gpus.len()).map(|i| format!("dc{i}")).collect();
    let dcs: Vec<(&str, u32)> = names.iter().map(String::as_str).zip(gpus.iter().copied()).collect();
    ClusterTopology::uniform(&dcs, latency_ms, intra, 0.0).expect("fixture topology is valid")
}

/// 4K x 4K, one layer per partition.
pub fn gpt_a(layers: u32, microbatches: u32) -> ModelSpec {
    ModelSpec::new(layers, 4096, 4096, 1, microbatches, 1).expect("valid model")
}

/// 8K hidden, 6K sequence: 96 MiB of fp16 activations per microbatch.
pub fn gpt_b(layers: u32, microbatches: u32) -> ModelSpec {
    ModelSpec::new(layers, 8192, 6144, 1, microbatches, 1).expect("valid model")
}

/// Two pipelines of six unit stages, two stages per DC across three DCs.
/// Forward 1, backward 2, recompute 1 (none on the last stage); a WAN hop
/// costs 2 slots per pipeline or 1 slot pooled, with no latency.
pub fn two_pipeline_cell() -> CellProblem {
    let u = Nanos(1_000_000);
    let local = LinkSpec::intra(Nanos::ZERO, Nanos::ZERO);
    let wan = LinkSpec::wan(Nanos::ZERO, Nanos(2 * u.0), u);
    CellProblem::uniform(2, 6, 4, u, Nanos(2 * u.0), Some(u), vec![local, wan, local, wan, local])
}

/// The same cell derived from a topology: 1 slot = 1 ms. An activation of
/// 1.25 MB crosses a 5 Gbps node pair in 2 ms, the intra-DC fabric in
/// well under a nanosecond, and ratio 2 makes the forward pass 1 ms.
pub fn two_pipeline_cluster() -> Cluster {
    Cluster {
        topo: named_topology(&[4, 4, 4], 0.0, Bandwidth::from_gbps(1e9)),
        model: ModelSpec::new(6, 1000, 625, 1, 4, 1).expect("valid model"),
        compute: ComputeProfile::Ratio(2.0),
        params: PlanParams::new(1, 2),
    }
}

/// Twelve GPUs in three DCs (6, 3, 3), one cell of three pipelines of four
/// GPT-A stages, `latency_ms` between every DC pair.
pub fn testbed_12gpu(latency_ms: f64, microbatches: u32) -> Cluster {
    Cluster {
        topo: named_topology(&[6, 3, 3], latency_ms, Bandwidth::from_gbps(INTRA_BW_GBPS)),
        model: gpt_a(4, microbatches),
        compute: ComputeProfile::Ratio(3.0),
        params: PlanParams::new(1, 3),
    }
}

/// Six GPUs, two per DC, one GPT-B pipeline of six single-layer stages.
pub fn gpt_b_six_nodes(latency_ms: f64, microbatches: u32) -> Cluster {
    Cluster {
        topo: named_topology(&[2, 2, 2], latency_ms, Bandwidth::from_gbps(INTRA_BW_GBPS)),
        model: gpt_b(6, microbatches),
        compute: ComputeProfile::Ratio(3.0),
        params: PlanParams::new(1, 1),
    }
}

/// The six GPT-B nodes co-located in one DC.
pub fn gpt_b_six_nodes_one_dc(microbatches: u32) -> Cluster {
    Cluster {
        topo: named_topology(&[6], 0.0, Bandwidth::from_gbps(INTRA_BW_GBPS)),
        ..gpt_b_six_nodes(0.0, microbatches)
    }
}

/// Default options for the baselines at a given connection mode.
pub fn options(policy: crate::schedule::Policy, multi_conn: bool) -> ProblemOptions {
    ProblemOptions {
        policy,
        wan_mode: WanMode::from_multi_conn(multi_conn),
        recompute: true,
        mem_limit: None,
    }
}

/// 600 GPUs in each of `n` DCs.
pub fn dc_set_1(n: usize) -> ClusterTopology {
    named_topology(&vec![600; n], WAN_LATENCY_MS, Bandwidth::from_gbps(INTRA_BW_GBPS))
}

pub fn dc_set_2() -> ClusterTopology {
    named_topology(&[600, 500, 400, 300, 200], WAN_LATENCY_MS, Bandwidth::from_gbps(INTRA_BW_GBPS))
}

/// Sixty single-layer GPT-A partitions and sixty microbatches.
pub fn sim_model() -> ModelSpec {
    gpt_a(60, 60)
}

pub fn sim_input(topo: ClusterTopology, c: u32) -> SelectionInput {
    SelectionInput::new(topo, sim_model(), ComputeProfile::Ratio(c as f64), c)
}

/// Input for the second-DC sweep: 600 GPUs plus `second` more.
pub fn f_sweep_input(second: u32) -> SelectionInput {
    let gpus: Vec<u32> = if second == 0 { vec![600] } else { vec![600, second] };
    sim_input(named_topology(&gpus, WAN_LATENCY_MS, Bandwidth::from_gbps(INTRA_BW_GBPS)), 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Policy;

    #[test]
    fn topology_cell_lowers_to_the_slot_fixture() {
        let c = two_pipeline_cluster();
        let pr = c.problem(&ProblemOptions::default()).unwrap();
        let mut want = two_pipeline_cell();
        want.bytes = 1_250_000;
        assert_eq!(pr, want);
        assert_eq!(c.wan_boundaries(), vec![false, true, false, true, false]);
    }

    #[test]
    fn testbed_places_two_stages_in_the_large_dc() {
        let plan = testbed_12gpu(40.0, 4).plan();
        assert_eq!(plan.stage_dcs, vec![0, 0, 1, 2]);
        assert_eq!(plan.gpus_used(), 12);
        assert_eq!(plan.num_pipelines(), 3);
    }

    #[test]
    fn gpt_b_first_wan_hop_takes_seconds_on_one_connection() {
        let c = gpt_b_six_nodes(40.0, 4);
        let pr = c.problem(&options(Policy::Varuna, false)).unwrap();
        assert_eq!(pr.bytes, 100_663_296);
        assert!(pr.links[1].wan);
        // 96 MiB at 293 Mbps plus 40 ms.
        let lat_and_wire = pr.links[1].latency + pr.links[1].spatial_wire;
        assert_eq!(lat_and_wire, Nanos::from_ms(40.0) + Nanos::from_ms(100_663_296.0 / 36_625.0));
    }
}
