//! The training job and its placement: pipeline stages across datacenters,
//! data-parallel replicas within them, grouped into DP-cells.

use serde::{Deserialize, Serialize};

use crate::comm::{activation_bytes, TensorShape};
use crate::error::PlanError;
use crate::topology::ClusterTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub hidden: u32,
    pub seq_len: u32,
    pub microbatch: u32,
    pub num_microbatches: u32,
    pub layers_per_partition: u32,
    /// Defaults to `12·H²` when absent.
    pub params_per_layer: Option<u64>,
    pub bytes_per_element: u8,
}

impl ModelSpec {
    /// Model with fp16 activations and the default parameter count.
    pub fn new(
        num_layers: u32,
        hidden: u32,
        seq_len: u32,
        microbatch: u32,
        num_microbatches: u32,
        layers_per_partition: u32,
    ) -> Result<Self, PlanError> {
        let spec = ModelSpec {
            num_layers,
            hidden,
            seq_len,
            microbatch,
            num_microbatches,
            layers_per_partition,
            params_per_layer: None,
            bytes_per_element: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("seq_len", self.seq_len),
            ("microbatch", self.microbatch),
            ("num_microbatches", self.num_microbatches),
            ("layers_per_partition", self.layers_per_partition),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(PlanError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.params_per_layer == Some(0) {
            return Err(PlanError::InvalidParameter("params_per_layer must be positive".into()));
        }
        if !matches!(self.bytes_per_element, 1 | 2 | 4) {
            return Err(PlanError::InvalidParameter("bytes_per_element must be 1, 2 or 4".into()));
        }
        Ok(())
    }

    /// `P = ceil(num_layers / layers_per_partition)`.
    pub fn partitions(&self) -> u32 {
        self.num_layers.div_ceil(self.layers_per_partition)
    }

    pub fn params_per_layer(&self) -> u64 {
        self.params_per_layer
            .unwrap_or(12 * self.hidden as u64 * self.hidden as u64)
    }

    /// Layers held by partition `k` (the last one may be short).
    pub fn layers_in_partition(&self, k: u32) -> u32 {
        let start = k * self.layers_per_partition;
        (start + self.layers_per_partition).min(self.num_layers) - start
    }

    pub fn activation_shape(&self) -> TensorShape {
        TensorShape {
            batch: self.microbatch,
            seq_len: self.seq_len,
            hidden: self.hidden,
            bytes_per_element: self.bytes_per_element,
        }
    }

    /// Bytes crossing a stage boundary per microbatch, each way.
    pub fn activation_bytes(&self) -> u64 {
        activation_bytes(self.activation_shape())
    }
}

/// Per-microbatch, per-partition compute durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ComputeProfile {
    Explicit {
        fwd_ms: f64,
        bwd_ms: f64,
        recompute_ms: f64,
    },
    /// Communication-to-compute ratio: the forward pass takes `1/C` of the
    /// time one pipeline needs to push an activation through its WAN share.
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub recompute_ms: f64,
}

impl ComputeProfile {
    /// Forward-only profile; backward is twice the forward and recompute
    /// repeats it.
    pub fn from_fwd(fwd_ms: f64) -> Self {
        ComputeProfile::Explicit {
            fwd_ms,
            bwd_ms: 2.0 * fwd_ms,
            recompute_ms: fwd_ms,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = match *self {
            ComputeProfile::Explicit {
                fwd_ms,
                bwd_ms,
                recompute_ms,
            } => fwd_ms > 0.0 && bwd_ms > 0.0 && recompute_ms > 0.0,
            ComputeProfile::Ratio(c) => c > 0.0 && c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(PlanError::InvalidParameter("compute durations and ratio_C must be positive".into()))
        }
    }

    /// Durations for one full partition.
    pub fn resolve(&self, model: &ModelSpec, topo: &ClusterTopology) -> PhaseDurations {
        match *self {
            ComputeProfile::Explicit {
                fwd_ms,
                bwd_ms,
                recompute_ms,
            } => PhaseDurations {
                fwd_ms,
                bwd_ms,
                recompute_ms,
            },
            ComputeProfile::Ratio(c) => {
                let comm = model.activation_bytes() as f64 / topo.wan.pair_bw_cap.bytes_per_ms();
                let fwd_ms = comm / c;
                PhaseDurations {
                    fwd_ms,
                    bwd_ms: 2.0 * fwd_ms,
                    recompute_ms: fwd_ms,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// Position of the hosting DC in the topology.
    pub dc: usize,
    pub dc_id: String,
    pub gpu_ids: Vec<u32>,
    /// Half-open partition range `[start, end)`.
    pub partition_range: (u32, u32),
    pub tp_degree: u32,
}

impl Stage {
    /// The GPU that stands for the stage's TP group in timelines.
    pub fn lead_gpu(&self) -> u32 {
        self.gpu_ids[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpCell {
    /// Indexed by LocalDPRank.
    pub pipelines: Vec<Vec<Stage>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub cells: Vec<DpCell>,
    pub cell_size: u32,
    pub tp_degree: u32,
    /// DC index of every stage; shared by all pipelines.
    pub stage_dcs: Vec<usize>,
    /// Partitions hosted per DC, indexed like the topology.
    pub partitions_per_dc: Vec<u32>,
}

impl ParallelismPlan {
    pub fn num_stages(&self) -> usize {
        self.stage_dcs.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_pipelines(&self) -> usize {
        self.cells.len() * self.cell_size as usize
    }

    /// Boundary `s` joins stage `s` and `s + 1`.
    pub fn crosses_dc(&self, boundary: usize) -> bool {
        self.stage_dcs[boundary] != self.stage_dcs[boundary + 1]
    }

    pub fn gpus_used(&self) -> u64 {
        self.num_pipelines() as u64 * self.num_stages() as u64 * self.tp_degree as u64
    }

    /// Every GPU in the plan, ascending.
    pub fn gpu_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .cells
            .iter()
            .flat_map(|c| c.pipelines.iter().flatten())
            .flat_map(|s| s.gpu_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanParams {
    pub dp_cells: u32,
    pub cell_size: u32,
    pub tp_degree: u32,
    /// Defaults to decreasing GPU count.
    pub dc_order: Option<Vec<usize>>,
}

impl PlanParams {
    pub fn new(dp_cells: u32, cell_size: u32) -> Self {
        PlanParams {
            dp_cells,
            cell_size,
            tp_degree: 1,
            dc_order: None,
        }
    }
}

fn check_order(order: &[usize], n: usize) -> Result<(), PlanError> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(PlanError::BadOrder(format!("expected {n} entries, got {}", order.len())));
    }
    for &i in order {
        if i >= n || seen[i] {
            return Err(PlanError::BadOrder(format!("index {i} out of range or repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Partitions hosted by each DC under the greedy walk, or the number of
/// partitions left unplaced.
pub fn greedy_partition_counts(
    topo: &ClusterTopology,
    partitions: u32,
    params: &PlanParams,
) -> Result<Vec<u32>, PlanError> {
    if params.dp_cells == 0 || params.cell_size == 0 || params.tp_degree == 0 {
        return Err(PlanError::InvalidParameter("D, C and tp_degree must be at least 1".into()));
    }
    let order = match &params.dc_order {
        Some(o) => {
            check_order(o, topo.num_dcs())?;
            o.clone()
        }
        None => topo.default_dc_order(),
    };
    let per_partition = params.dp_cells as u64 * params.cell_size as u64 * params.tp_degree as u64;
    let mut counts = vec![0u32; topo.num_dcs()];
    let mut left = partitions;
    for dc in order {
        if left == 0 {
            break;
        }
        let fit = (topo.datacenters[dc].gpu_count as u64 / per_partition).min(left as u64) as u32;
        counts[dc] = fit;
        left -= fit;
    }
    if left > 0 {
        return Err(PlanError::InsufficientGpus {
            partitions,
            partitions_left: left,
            dp_cells: params.dp_cells,
            cell_size: params.cell_size,
        });
    }
    Ok(counts)
}

/// Greedy placement: walking `dc_order`, each DC hosts as many consecutive
/// partitions as it has GPUs for `D·C·tp` replicas, one partition per stage.
pub fn build_plan(
    topo: &ClusterTopology,
    model: &ModelSpec,
    params: &PlanParams,
) -> Result<ParallelismPlan, PlanError> {
    model.validate()?;
    let partitions = model.partitions();
    let counts = greedy_partition_counts(topo, partitions, params)?;
    let order = params.dc_order.clone().unwrap_or_else(|| topo.default_dc_order());

    let mut stage_dcs = Vec::with_capacity(partitions as usize);
    for &dc in &order {
        stage_dcs.extend(std::iter::repeat(dc).take(counts[dc] as usize));
    }

    let d = params.dp_cells;
    let c = params.cell_size;
    let tp = params.tp_degree;
    // Position of each stage among the stages its DC hosts.
    let mut local_rank = vec![0u32; stage_dcs.len()];
    let mut seen = vec![0u32; topo.num_dcs()];
    for (s, &dc) in stage_dcs.iter().enumerate() {
        local_rank[s] = seen[dc];
        seen[dc] += 1;
    }

    let cells = (0..d)
        .map(|cell| DpCell {
            pipelines: (0..c)
                .map(|p| {
                    let replica = cell * c + p;
                    stage_dcs
                        .iter()
                        .enumerate()
                        .map(|(s, &dc)| {
                            let k = counts[dc];
                            let first = topo.gpu_offset(dc) + (replica * k + local_rank[s]) * tp;
                            Stage {
                                dc,
                                dc_id: topo.datacenters[dc].id.clone(),
                                gpu_ids: (first..first + tp).collect(),
                                partition_range: (s as u32, s as u32 + 1),
                                tp_degree: tp,
                            }
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();

    Ok(ParallelismPlan {
        cells,
        cell_size: c,
        tp_degree: tp,
        stage_dcs,
        partitions_per_dc: counts,
    })
}

/// Cross-DC activation transfer time over one pipeline's node-pair share,
/// divided by the forward time; the largest such ratio over WAN boundaries.
pub fn comm_compute_ratio(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    fwd_ms: f64,
) -> f64 {
    let bytes = model.activation_bytes() as f64;
    (0..plan.num_stages().saturating_sub(1))
        .filter(|&b| plan.crosses_dc(b))
        .map(|_| bytes / topo.wan.pair_bw_cap.bytes_per_ms() / fwd_ms)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::Bandwidth;

    fn topo(gpus: &[u32]) -> ClusterTopology {
        let names: Vec<String> = (1..=gpus.len()).map(|i| format!("dc{i}")).collect();
        let dcs: Vec<(&str, u32)> = names.iter().map(String::as_str).zip(gpus.iter().copied()).collect();
        ClusterTopology::uniform(&dcs, 40.0, Bandwidth::from_gbps(100.0), 0.0).unwrap()
    }

    fn model(p: u32) -> ModelSpec {
        ModelSpec::new(p, 8192, 6144, 1, 4, 1).unwrap()
    }

    #[test]
    fn one_large_dc_hosts_everything() {
        let plan = build_plan(&topo(&[600]), &model(60), &PlanParams::new(5, 2)).unwrap();
        assert_eq!(plan.partitions_per_dc, vec![60]);
        assert_eq!(plan.num_stages(), 60);
        assert_eq!(plan.num_pipelines(), 10);
        assert_eq!(plan.gpus_used(), 600);
        assert_eq!(plan.gpu_ids(), (0..600).collect::<Vec<_>>());
    }

    #[test]
    fn larger_dcs_get_more_stages() {
        let plan = build_plan(&topo(&[600, 500, 400, 300, 200]), &model(60), &PlanParams::new(1, 3)).unwrap();
        let counts = &plan.partitions_per_dc;
        assert_eq!(counts.iter().sum::<u32>(), 60);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn too_few_gpus() {
        let err = build_plan(&topo(&[100]), &model(60), &PlanParams::new(1, 2)).unwrap_err();
        assert_eq!(
            err,
            PlanError::InsufficientGpus {
                partitions: 60,
                partitions_left: 10,
                dp_cells: 1,
                cell_size: 2
            }
        );
    }

    #[test]
    fn twelve_gpu_layout() {
        let plan = build_plan(&topo(&[4, 4, 4]), &model(6), &PlanParams::new(1, 2)).unwrap();
        assert_eq!(plan.stage_dcs, vec![0, 0, 1, 1, 2, 2]);
        let p0: Vec<u32> = plan.cells[0].pipelines[0].iter().map(Stage::lead_gpu).collect();
        let p1: Vec<u32> = plan.cells[0].pipelines[1].iter().map(Stage::lead_gpu).collect();
        assert_eq!(p0, vec![0, 1, 4, 5, 8, 9]);
        assert_eq!(p1, vec![2, 3, 6, 7, 10, 11]);
        assert!(plan.crosses_dc(1) && !plan.crosses_dc(0));
    }

    #[test]
    fn explicit_order_and_tp() {
        let t = topo(&[8, 8]);
        let params = PlanParams {
            dp_cells: 1,
            cell_size: 2,
            tp_degree: 2,
            dc_order: Some(vec![1, 0]),
        };
        let plan = build_plan(&t, &model(4), &params).unwrap();
        assert_eq!(plan.stage_dcs, vec![1, 1, 0, 0]);
        assert_eq!(plan.cells[0].pipelines[0][0].gpu_ids, vec![8, 9]);
        assert_eq!(plan.gpus_used(), 16);
        let bad = PlanParams {
            dc_order: Some(vec![1, 1]),
            ..params
        };
        assert!(matches!(build_plan(&t, &model(4), &bad), Err(PlanError::BadOrder(_))));
    }

    #[test]
    fn partition_count_rounds_up() {
        let m = ModelSpec::new(10, 64, 64, 1, 1, 4).unwrap();
        assert_eq!(m.partitions(), 3);
        assert_eq!(m.layers_in_partition(2), 2);
        assert_eq!(m.params_per_layer(), 12 * 64 * 64);
    }

    #[test]
    fn ratio_examples() {
        let m = model(4);
        let single = build_plan(&topo(&[8]), &m, &PlanParams::new(1, 2)).unwrap();
        assert_eq!(comm_compute_ratio(&single, &m, &topo(&[8]), 80.5), 0.0);
        let t = topo(&[4, 4]);
        let split = build_plan(&t, &m, &PlanParams::new(1, 2)).unwrap();
        let r = comm_compute_ratio(&split, &m, &t, 80.5);
        assert!((r - 2.0).abs() < 0.01, "{r}");
        let fwd = ComputeProfile::Ratio(2.0).resolve(&m, &t).fwd_ms;
        assert!((comm_compute_ratio(&split, &m, &t, fwd) - 2.0).abs() < 1e-12);
    }
}
