//! Packs inference prefills into the idle windows of a training timeline
//! without moving any training task.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{activation_bytes, transfer_time, TensorShape};
use crate::schedule::{ScheduledTask, TaskKind, Timeline};
use crate::topology::ClusterTopology;
use crate::units::{Bandwidth, Nanos};
use crate::workload::ParallelismPlan;

pub const SATURATION_TOKENS: u32 = 8192;
pub const PREFILL_MS_AT_SATURATION: f64 = 300.0;
/// Prefill handoff bandwidth between GPUs of one DC. A calibration chosen
/// so that 32 hops of an 8K x 4K fp16 activation cost about 86 ms.
pub const DEFAULT_STAGE_BW: Bandwidth = Bandwidth(25_000_000.0);
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrefillError {
    #[error("request of {tokens} tokens outside 1..={max}")]
    TokensOutOfRange { tokens: u32, max: u32 },
    #[error("prefill pipeline {0}")]
    BadPipeline(String),
    #[error("request trace: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bubble {
    pub gpu_id: u32,
    pub start: Nanos,
    pub end: Nanos,
}

impl Bubble {
    pub fn len(&self) -> Nanos {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Maximal idle intervals of every GPU of `t` within `[0, horizon)`.
pub fn extract_bubbles(t: &Timeline, horizon: Nanos) -> BTreeMap<u32, Vec<Bubble>> {
    t.busy_intervals()
        .into_iter()
        .map(|(g, busy)| {
            let mut out = Vec::new();
            let mut cursor = Nanos::ZERO;
            for (s, e) in busy {
                let s = s.min(horizon);
                if s > cursor {
                    out.push(Bubble {
                        gpu_id: g,
                        start: cursor,
                        end: s,
                    });
                }
                cursor = cursor.max(e.min(horizon));
            }
            if horizon > cursor {
                out.push(Bubble {
                    gpu_id: g,
                    start: cursor,
                    end: horizon,
                });
            }
            (g, out)
        })
        .collect()
}

/// Prefill duration as a function of prompt length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillModel {
    pub ms_at_saturation: f64,
    pub max_tokens: u32,
    /// Share of the saturated duration that grows quadratically with the
    /// prompt; 0 is the linear model.
    pub attention_share: f64,
}

impl Default for PrefillModel {
    fn default() -> Self {
        PrefillModel {
            ms_at_saturation: PREFILL_MS_AT_SATURATION,
            max_tokens: SATURATION_TOKENS,
            attention_share: 0.0,
        }
    }
}

impl PrefillModel {
    pub fn duration_ms(&self, tokens: u32) -> Result<f64, PrefillError> {
        if tokens == 0 || tokens > self.max_tokens {
            return Err(PrefillError::TokensOutOfRange {
                tokens,
                max: self.max_tokens,
            });
        }
        let x = tokens as f64 / self.max_tokens as f64;
        let a = self.attention_share;
        Ok(self.ms_at_saturation * x * ((1.0 - a) + a * x))
    }
}

/// Linear prefill model: 300 ms at 8192 tokens.
pub fn prefill_duration(tokens: u32) -> Result<f64, PrefillError> {
    PrefillModel::default().duration_ms(tokens)
}

/// Handoff cost of a prefill split over `n_boundaries + 1` GPUs.
pub fn prefill_pp_overhead(shape: TensorShape, n_boundaries: u32, stage_bw: Bandwidth, intra_latency_ms: f64) -> f64 {
    if n_boundaries == 0 {
        return 0.0;
    }
    let hop = transfer_time(activation_bytes(shape), stage_bw, intra_latency_ms).expect("stage bandwidth is positive");
    n_boundaries as f64 * hop
}

/// GPUs of equal rank in consecutive DP-cells, all in one DC, each holding
/// an equal slice of the inference model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillPipeline {
    pub gpus: Vec<u32>,
    pub dc: usize,
    pub layers_per_gpu: u32,
    pub memory_bytes: u64,
}

impl PrefillPipeline {
    pub fn validate(&self, topo: &ClusterTopology, budget: u64) -> Result<(), PrefillError> {
        if self.gpus.is_empty() {
            return Err(PrefillError::BadPipeline("has no GPUs".into()));
        }
        let lo = topo.gpu_offset(self.dc);
        let hi = lo + topo.datacenters[self.dc].gpu_count;
        if let Some(g) = self.gpus.iter().find(|g| !(lo..hi).contains(*g)) {
            return Err(PrefillError::BadPipeline(format!("GPU {g} is outside DC {}", self.dc)));
        }
        if self.memory_bytes > budget {
            return Err(PrefillError::BadPipeline(format!(
                "needs {} bytes per GPU, budget {budget}",
                self.memory_bytes
            )));
        }
        Ok(())
    }
}

/// One prefill pipeline per (LocalDPRank, stage): the lead GPUs of that
/// slot in every cell. An inference model of `model_bytes` and
/// `model_layers` is split evenly across the cells.
pub fn same_rank_pipelines(plan: &ParallelismPlan, model_layers: u32, model_bytes: u64) -> Vec<PrefillPipeline> {
    let depth = plan.num_cells() as u32;
    let mut out = Vec::new();
    for p in 0..plan.cell_size as usize {
        for s in 0..plan.num_stages() {
            out.push(PrefillPipeline {
                gpus: plan.cells.iter().map(|c| c.pipelines[p][s].lead_gpu()).collect(),
                dc: plan.stage_dcs[s],
                layers_per_gpu: model_layers.div_ceil(depth),
                memory_bytes: model_bytes.div_ceil(depth as u64),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillRequest {
    pub id: u32,
    pub arrival_ms: f64,
    pub tokens: u32,
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStream {
    pub count: u32,
    pub min_tokens: u32,
    pub max_tokens: u32,
    /// Mean gap between arrivals; 0 puts every request at time 0.
    #[serde(default)]
    pub mean_interarrival_ms: f64,
}

/// Deterministic request stream for `seed`.
pub fn synthetic_requests(stream: &SyntheticStream, seed: u64) -> Vec<PrefillRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = (stream.mean_interarrival_ms > 0.0).then(|| Exp::new(1.0 / stream.mean_interarrival_ms).expect("positive rate"));
    let mut now = 0.0;
    (0..stream.count)
        .map(|id| {
            if let Some(g) = &gap {
                now += g.sample(&mut rng);
            }
            PrefillRequest {
                id,
                arrival_ms: now,
                tokens: rng.gen_range(stream.min_tokens..=stream.max_tokens),
                model_id: "default".into(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillConfig {
    pub model: PrefillModel,
    /// Hidden size of the inference model, for handoff activations.
    pub hidden: u32,
    pub stage_bw: Bandwidth,
    pub intra_latency_ms: f64,
    /// Gap kept free before the next training task.
    pub guard_ms: f64,
    pub memory_budget: u64,
    /// Time to ship the KV cache to a decode GPU after the last stage.
    pub decode_handoff_ms: f64,
}

impl Default for PrefillConfig {
    fn default() -> Self {
        PrefillConfig {
            model: PrefillModel::default(),
            hidden: 4096,
            stage_bw: DEFAULT_STAGE_BW,
            intra_latency_ms: 0.0,
            guard_ms: 0.0,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            decode_handoff_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub request_id: u32,
    pub pipeline: usize,
    /// `(gpu, start, end)` per prefill stage.
    pub intervals: Vec<(u32, Nanos, Nanos)>,
    pub start_ms: f64,
    pub finish_ms: f64,
    /// Handoff time added by splitting the prefill across GPUs.
    pub ttft_overhead_ms: f64,
    pub handoff_done_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    NoCapacity,
    InvalidTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub accepted: Vec<Placement>,
    pub rejected: Vec<(u32, RejectReason)>,
}

/// Free windows of one GPU. Windows that end at a training task carry the
/// guard; the one closing at the horizon does not.
struct Free {
    windows: Vec<(Nanos, Nanos)>,
}

impl Free {
    fn earliest(&self, from: Nanos, len: Nanos) -> Option<Nanos> {
        self.windows
            .iter()
            .find_map(|&(s, e)| {
                let start = s.max(from);
                (start + len <= e).then_some(start)
            })
    }

    fn take(&mut self, s: Nanos, e: Nanos) {
        let i = self
            .windows
            .iter()
            .position(|&(ws, we)| ws <= s && e <= we)
            .expect("placement lies inside a free window");
        let (ws, we) = self.windows.remove(i);
        if e < we {
            self.windows.insert(i, (e, we));
        }
        if ws < s {
            self.windows.insert(i, (ws, s));
        }
    }
}

/// FCFS over `requests` (sorted by arrival). Each goes to the pipeline
/// offering the earliest start, first pipeline on ties, with every stage
/// inside a bubble; training tasks are never touched.
pub fn schedule_prefills(
    t: &Timeline,
    horizon: Nanos,
    requests: &[PrefillRequest],
    pipelines: &[PrefillPipeline],
    cfg: &PrefillConfig,
) -> (PlacementResult, Timeline) {
    let guard = Nanos::from_ms(cfg.guard_ms);
    let mut free: BTreeMap<u32, Free> = extract_bubbles(t, horizon)
        .into_iter()
        .map(|(g, bs)| {
            let windows = bs
                .into_iter()
                .map(|b| if b.end < horizon { (b.start, b.end - guard) } else { (b.start, b.end) })
                .filter(|(s, e)| e > s)
                .collect();
            (g, Free { windows })
        })
        .collect();

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for req in requests {
        let Ok(total_ms) = cfg.model.duration_ms(req.tokens) else {
            rejected.push((req.id, RejectReason::InvalidTokens));
            continue;
        };
        let shape = TensorShape::fp16(1, req.tokens, cfg.hidden).expect("positive shape");
        let hop = prefill_pp_overhead(shape, 1, cfg.stage_bw, cfg.intra_latency_ms);
        let arrival = Nanos::from_ms(req.arrival_ms);
        let mut best: Option<(Nanos, usize, Vec<(u32, Nanos, Nanos)>)> = None;
        for (i, pipe) in pipelines.iter().enumerate() {
            let stage = Nanos::from_ms(total_ms / pipe.gpus.len() as f64);
            let hop = Nanos::from_ms(hop);
            // Stage-by-stage earliest fit. Later stages only move later,
            // so if this chain fails no later start succeeds either.
            let mut chain = Vec::with_capacity(pipe.gpus.len());
            let mut ready = arrival;
            for &g in &pipe.gpus {
                match free.get(&g).and_then(|f| f.earliest(ready, stage)) {
                    Some(s) => {
                        chain.push((g, s, s + stage));
                        ready = s + stage + hop;
                    }
                    None => {
                        chain.clear();
                        break;
                    }
                }
            }
            if let Some(&(_, s0, _)) = chain.first() {
                if best.as_ref().is_none_or(|(b, _, _)| s0 < *b) {
                    best = Some((s0, i, chain));
                }
            }
        }
        match best {
            Some((s0, i, chain)) => {
                for &(g, s, e) in &chain {
                    free.get_mut(&g).expect("gpu has windows").take(s, e);
                }
                let finish = chain.last().expect("non-empty chain").2.as_ms();
                accepted.push(Placement {
                    request_id: req.id,
                    pipeline: i,
                    start_ms: s0.as_ms(),
                    finish_ms: finish,
                    ttft_overhead_ms: hop * (chain.len() - 1) as f64,
                    handoff_done_ms: finish + cfg.decode_handoff_ms,
                    intervals: chain,
                });
            }
            None => rejected.push((req.id, RejectReason::NoCapacity)),
        }
    }

    let mut out = t.clone();
    for p in &accepted {
        for (k, &(g, s, e)) in p.intervals.iter().enumerate() {
            out.tasks.push(ScheduledTask {
                gpu_id: g,
                cell_id: 0,
                pipeline_id: p.pipeline as u32,
                kind: TaskKind::Prefill,
                microbatch: p.request_id,
                stage: k as u32,
                start: s,
                end: e,
            });
        }
    }
    out.sort();
    (PlacementResult { accepted, rejected }, out)
}

/// Parses `id,arrival_ms,tokens[,model_id]` rows with a header line.
pub fn read_requests_csv(text: &str) -> Result<Vec<PrefillRequest>, PrefillError> {
    #[derive(Deserialize)]
    struct Row {
        id: u32,
        arrival_ms: f64,
        tokens: u32,
        #[serde(default)]
        model_id: Option<String>,
    }
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<Row>().enumerate() {
        let r = row.map_err(|e| PrefillError::Trace(format!("row {}: {e}", i + 1)))?;
        out.push(PrefillRequest {
            id: r.id,
            arrival_ms: r.arrival_ms,
            tokens: r.tokens,
            model_id: r.model_id.unwrap_or_else(|| "default".into()),
        });
    }
    out.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    Ok(out)
}

/// `id,accepted,pipeline,start_ms,ttft_overhead_ms,reason`, ordered by id.
pub fn results_csv(r: &PlacementResult) -> String {
    #[derive(Serialize)]
    struct Row {
        id: u32,
        accepted: bool,
        pipeline: Option<usize>,
        start_ms: Option<f64>,
        ttft_overhead_ms: Option<f64>,
        reason: &'static str,
    }
    let mut rows: Vec<Row> = r
        .accepted
        .iter()
        .map(|p| Row {
            id: p.request_id,
            accepted: true,
            pipeline: Some(p.pipeline),
            start_ms: Some(p.start_ms),
            ttft_overhead_ms: Some(p.ttft_overhead_ms),
            reason: "",
        })
        .chain(r.rejected.iter().map(|&(id, why)| Row {
            id,
            accepted: false,
            pipeline: None,
            start_ms: None,
            ttft_overhead_ms: None,
            reason: match why {
                RejectReason::NoCapacity => "NoCapacity",
                RejectReason::InvalidTokens => "InvalidTokens",
            },
        }))
        .collect();
    rows.sort_by_key(|x| x.id);
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["id", "accepted", "pipeline", "start_ms", "ttft_overhead_ms", "reason"])
            .expect("csv header");
    }
    for row in rows {
        w.serialize(row).expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Policy;

    fn ms(x: i64) -> Nanos {
        Nanos(x * 1_000_000)
    }

    fn timeline(tasks: &[(u32, i64, i64)], gpus: Vec<u32>) -> Timeline {
        let mut t = Timeline {
            policy: Policy::Atlas,
            tasks: tasks
                .iter()
                .map(|&(g, s, e)| ScheduledTask {
                    gpu_id: g,
                    cell_id: 0,
                    pipeline_id: 0,
                    kind: TaskKind::Forward,
                    microbatch: 0,
                    stage: g,
                    start: ms(s),
                    end: ms(e),
                })
                .collect(),
            transfers: vec![],
            makespan: ms(tasks.iter().map(|t| t.2).max().unwrap_or(0)),
            gpus,
        };
        t.sort();
        t
    }

    fn single(g: u32) -> PrefillPipeline {
        PrefillPipeline {
            gpus: vec![g],
            dc: 0,
            layers_per_gpu: 32,
            memory_bytes: 0,
        }
    }

    fn req(id: u32, arrival: f64, tokens: u32) -> PrefillRequest {
        PrefillRequest {
            id,
            arrival_ms: arrival,
            tokens,
            model_id: "m".into(),
        }
    }

    #[test]
    fn durations() {
        assert_eq!(prefill_duration(8192).unwrap(), 300.0);
        assert_eq!(prefill_duration(4096).unwrap(), 150.0);
        assert!(prefill_duration(0).is_err());
        assert!(prefill_duration(8193).is_err());
        let quad = PrefillModel {
            attention_share: 0.5,
            ..PrefillModel::default()
        };
        assert_eq!(quad.duration_ms(8192).unwrap(), 300.0);
        assert_eq!(quad.duration_ms(4096).unwrap(), 112.5);
    }

    #[test]
    fn overhead_is_linear_in_hops() {
        let shape = TensorShape::fp16(1, 8192, 4096).unwrap();
        let one = 67_108_864.0 / 25_000_000.0;
        assert_eq!(prefill_pp_overhead(shape, 0, DEFAULT_STAGE_BW, 0.0), 0.0);
        assert!((prefill_pp_overhead(shape, 32, DEFAULT_STAGE_BW, 0.0) - 32.0 * one).abs() < 1e-9);
        assert!((prefill_pp_overhead(shape, 16, DEFAULT_STAGE_BW, 0.0) - 16.0 * one).abs() < 1e-9);
    }

    #[test]
    fn bubbles_complement_busy_time() {
        let t = timeline(&[(0, 0, 10), (0, 20, 30), (1, 5, 40)], vec![0, 1, 2]);
        let b = extract_bubbles(&t, ms(40));
        assert_eq!(b[&0].iter().map(|x| (x.start, x.end)).collect::<Vec<_>>(), vec![(ms(10), ms(20)), (ms(30), ms(40))]);
        assert_eq!(b[&1].len(), 1);
        assert_eq!(b[&2], vec![Bubble { gpu_id: 2, start: ms(0), end: ms(40) }]);
        let full = timeline(&[(0, 0, 40)], vec![0]);
        assert!(extract_bubbles(&full, ms(40))[&0].is_empty());
    }

    #[test]
    fn zero_requests_is_identity() {
        let t = timeline(&[(0, 0, 10)], vec![0]);
        let (r, out) = schedule_prefills(&t, ms(20), &[], &[single(0)], &PrefillConfig::default());
        assert!(r.accepted.is_empty() && r.rejected.is_empty());
        assert_eq!(out, t);
    }

    #[test]
    fn too_long_for_any_bubble_is_rejected() {
        // A 100 ms bubble cannot hold a 300 ms prefill.
        let t = timeline(&[(0, 0, 10), (0, 110, 500)], vec![0]);
        let (r, _) = schedule_prefills(&t, ms(500), &[req(0, 0.0, 8192)], &[single(0)], &PrefillConfig::default());
        assert_eq!(r.rejected, vec![(0, RejectReason::NoCapacity)]);
    }

    #[test]
    fn placements_fill_bubbles_without_touching_training() {
        let t = timeline(&[(0, 0, 10), (0, 200, 300), (1, 50, 300)], vec![0, 1]);
        let reqs: Vec<_> = (0..6).map(|i| req(i, 0.0, 4096)).collect();
        let cfg = PrefillConfig {
            guard_ms: 5.0,
            ..PrefillConfig::default()
        };
        let (r, out) = schedule_prefills(&t, ms(300), &reqs, &[single(0), single(1)], &cfg);
        // GPU 1 fits nothing (50 ms window minus guard); GPU 0 fits one
        // 150 ms prefill in [10, 195).
        assert_eq!(r.accepted.len(), 1);
        assert_eq!(r.accepted[0].intervals, vec![(0, ms(10), ms(160))]);
        let training: Vec<_> = out.tasks.iter().filter(|x| x.kind.is_training()).cloned().collect();
        assert_eq!(training, t.tasks);
    }

    #[test]
    fn stages_respect_handoff() {
        let t = timeline(&[], vec![0, 1]);
        let pipe = PrefillPipeline {
            gpus: vec![0, 1],
            dc: 0,
            layers_per_gpu: 16,
            memory_bytes: 0,
        };
        let (r, _) = schedule_prefills(&t, ms(1000), &[req(0, 0.0, 8192)], &[pipe], &PrefillConfig::default());
        let p = &r.accepted[0];
        let hop = 67_108_864.0 / 25_000_000.0;
        assert_eq!(p.intervals[1].1, p.intervals[0].2 + Nanos::from_ms(hop));
        assert!((p.ttft_overhead_ms - hop).abs() < 1e-9);
    }

    #[test]
    fn synthetic_stream_is_seeded() {
        let s = SyntheticStream {
            count: 50,
            min_tokens: 64,
            max_tokens: 8192,
            mean_interarrival_ms: 3.0,
        };
        assert_eq!(synthetic_requests(&s, 7), synthetic_requests(&s, 7));
        assert_ne!(synthetic_requests(&s, 7), synthetic_requests(&s, 8));
        assert!(synthetic_requests(&s, 7).windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
    }

    #[test]
    fn trace_round_trip() {
        let reqs = read_requests_csv("id,arrival_ms,tokens\n1, 5.0, 100\n0,1.5,8192\n").unwrap();
        assert_eq!(reqs.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1]);
        assert!(read_requests_csv("id,arrival_ms,tokens\nx,1,1\n").is_err());
        let empty = results_csv(&PlacementResult {
            accepted: vec![],
            rejected: vec![],
        });
        assert_eq!(empty, "id,accepted,pipeline,start_ms,ttft_overhead_ms,reason\n");
    }
}
