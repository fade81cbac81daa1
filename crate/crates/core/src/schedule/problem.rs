use crate::comm::WanMode;
use crate::error::SimError;
use crate::topology::ClusterTopology;
use crate::units::{Bandwidth, Nanos};
use crate::workload::{ModelSpec, ParallelismPlan, PhaseDurations};

use super::Policy;

/// The link joining stage `s` and `s + 1`, one per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkSpec {
    pub wan: bool,
    pub latency: Nanos,
    /// Serialization time at one pipeline's own share.
    pub spatial_wire: Nanos,
    /// Serialization time when the whole cell's WAN bandwidth is pooled.
    pub pooled_wire: Nanos,
}

impl LinkSpec {
    pub fn intra(latency: Nanos, wire: Nanos) -> Self {
        LinkSpec {
            wan: false,
            latency,
            spatial_wire: wire,
            pooled_wire: wire,
        }
    }

    pub fn wan(latency: Nanos, spatial_wire: Nanos, pooled_wire: Nanos) -> Self {
        LinkSpec {
            wan: true,
            latency,
            spatial_wire,
            pooled_wire,
        }
    }

    /// Whether `policy` reserves this link exclusively across the cell.
    pub fn shared_under(&self, policy: Policy) -> bool {
        self.wan && policy == Policy::Atlas
    }

    pub fn wire_under(&self, policy: Policy) -> Nanos {
        if self.shared_under(policy) {
            self.pooled_wire
        } else {
            self.spatial_wire
        }
    }
}

/// One DP-cell's worth of work: `pipelines × stages × microbatches` with
/// per-stage durations and per-boundary links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellProblem {
    pub pipelines: u32,
    pub stages: u32,
    pub microbatches: u32,
    pub fwd: Vec<Nanos>,
    pub bwd: Vec<Nanos>,
    /// Zero where no recompute runs.
    pub recompute: Vec<Nanos>,
    /// `stages - 1` entries.
    pub links: Vec<LinkSpec>,
    pub bytes: u64,
    /// Start recompute ahead of the incoming gradient so the backward can
    /// begin the moment it lands.
    pub recompute_early: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemOptions {
    pub policy: Policy,
    /// Connection mode of the baselines; ATLAS always opens many.
    pub wan_mode: WanMode,
    pub recompute: bool,
    /// In-flight microbatch cap per stage for Varuna and ATLAS; defaults to the stage
    /// count.
    pub mem_limit: Option<u32>,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            policy: Policy::Atlas,
            wan_mode: WanMode::MultiConnection,
            recompute: true,
            mem_limit: None,
        }
    }
}

impl ProblemOptions {
    pub fn with_policy(&self, policy: Policy) -> Self {
        ProblemOptions {
            policy,
            ..self.clone()
        }
    }
}

impl CellProblem {
    /// Identical stages; the last stage never recomputes.
    pub fn uniform(
        pipelines: u32,
        stages: u32,
        microbatches: u32,
        fwd: Nanos,
        bwd: Nanos,
        recompute: Option<Nanos>,
        links: Vec<LinkSpec>,
    ) -> Self {
        let n = stages as usize;
        let mut rec = vec![recompute.unwrap_or(Nanos::ZERO); n];
        if let Some(last) = rec.last_mut() {
            *last = Nanos::ZERO;
        }
        CellProblem {
            pipelines,
            stages,
            microbatches,
            fwd: vec![fwd; n],
            bwd: vec![bwd; n],
            recompute: rec,
            links,
            bytes: 0,
            recompute_early: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidProblem(m.to_string()));
        if self.pipelines == 0 || self.stages == 0 || self.microbatches == 0 {
            return bad("pipelines, stages and microbatches must be positive");
        }
        let n = self.stages as usize;
        if self.fwd.len() != n || self.bwd.len() != n || self.recompute.len() != n {
            return bad("per-stage duration vectors must have one entry per stage");
        }
        if self.links.len() != n - 1 {
            return bad("expected one link per stage boundary");
        }
        if self.fwd.iter().chain(&self.bwd).any(|d| d.0 <= 0) {
            return bad("forward and backward durations must be positive");
        }
        if self.recompute.iter().any(|d| d.0 < 0) {
            return bad("recompute durations must be non-negative");
        }
        if self
            .links
            .iter()
            .any(|l| l.latency.0 < 0 || l.spatial_wire.0 < 0 || l.pooled_wire.0 < 0)
        {
            return bad("link times must be non-negative");
        }
        Ok(())
    }

    /// Lowers one cell of `plan` to durations and link times.
    pub fn from_plan(
        plan: &ParallelismPlan,
        model: &ModelSpec,
        topo: &ClusterTopology,
        durations: PhaseDurations,
        opts: &ProblemOptions,
    ) -> Result<Self, SimError> {
        let n = plan.num_stages();
        let bytes = model.activation_bytes();
        let lpp = model.layers_per_partition as f64;
        let scale = |s: usize| {
            let (a, b) = plan.cells[0].pipelines[0][s].partition_range;
            (a..b).map(|k| model.layers_in_partition(k) as f64).sum::<f64>() / lpp
        };
        let fwd = (0..n).map(|s| Nanos::from_ms(durations.fwd_ms * scale(s))).collect();
        let bwd = (0..n).map(|s| Nanos::from_ms(durations.bwd_ms * scale(s))).collect();
        let recompute = (0..n)
            .map(|s| {
                if opts.recompute && s + 1 < n {
                    Nanos::from_ms(durations.recompute_ms * scale(s))
                } else {
                    Nanos::ZERO
                }
            })
            .collect();
        let wire = |bw: Bandwidth| Nanos::from_ms(bytes as f64 / bw.bytes_per_ms());
        let links = (0..n.saturating_sub(1))
            .map(|b| {
                let (da, db) = (plan.stage_dcs[b], plan.stage_dcs[b + 1]);
                if da == db {
                    let dc = &topo.datacenters[da];
                    LinkSpec::intra(Nanos::from_ms(dc.intra_latency_ms), wire(dc.intra_bw))
                } else {
                    let lat = topo.latency_ms(da, db);
                    let spatial = opts.wan_mode.pair_bandwidth(lat, &topo.wan);
                    let mut pooled = topo.wan.pair_bw_cap.scale(plan.cell_size as f64);
                    if let Some(cap) = topo.wan.aggregate_pair_cap {
                        pooled = pooled.min(cap);
                    }
                    LinkSpec::wan(Nanos::from_ms(lat), wire(spatial), wire(pooled))
                }
            })
            .collect();
        let p = CellProblem {
            pipelines: plan.cell_size,
            stages: n as u32,
            microbatches: model.num_microbatches,
            fwd,
            bwd,
            recompute,
            links,
            bytes,
            recompute_early: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Busy time of one pipeline's stage `s` over the whole iteration.
    pub fn stage_work(&self, s: usize) -> Nanos {
        Nanos((self.fwd[s].0 + self.bwd[s].0 + self.recompute[s].0) * self.microbatches as i64)
    }
}
