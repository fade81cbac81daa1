//! Run documents. One JSON object holds either a slot-level `cell`
//! problem, or a cluster: the topology sections (`datacenters`, `wan`)
//! plus `model`, `compute` and `parallelism`. Optional sections:
//! `selection`, `scenarios`, `sweep`, `prefill`.
//!
//! ```json
//! { "datacenters": [...], "wan": {...},
//!   "model": {"num_layers": 4, "hidden": 4096, "seq_len": 4096, "num_microbatches": 4},
//!   "compute": {"ratio_C": 3},
//!   "parallelism": {"D": 1, "C": 3, "dc_order": ["dc1", "dc2", "dc3"]},
//!   "prefill": {"requests": {"count": 500, "min_tokens": 64, "max_tokens": 8192}} }
//! ```
//!
//! A `cell` document lists durations in milliseconds:
//! `{"cell": {"pipelines": 2, "stages": 6, "microbatches": 4, "fwd_ms": 1,
//! "bwd_ms": 2, "recompute_ms": 1, "links": [{"wan": false}, {"wan": true,
//! "spatial_wire_ms": 2, "pooled_wire_ms": 1}, ...]}}`.

use serde::Deserialize;
use serde_json::Value;

use crate::bubbletea::{PrefillConfig, PrefillModel, SyntheticStream, DEFAULT_MEMORY_BUDGET};
use crate::error::ConfigError;
use crate::fixtures::Cluster;
use crate::schedule::{CellProblem, LinkSpec};
use crate::select::{Scenario, SelectionInput};
use crate::topology::{from_value_at, parse_document, topology_from_value, ClusterTopology};
use crate::units::{Bandwidth, Nanos};
use crate::workload::{ComputeProfile, ModelSpec, PlanParams};

fn one() -> u32 {
    1
}

fn two() -> u8 {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    num_layers: u32,
    hidden: u32,
    seq_len: u32,
    #[serde(default = "one")]
    microbatch: u32,
    num_microbatches: u32,
    #[serde(default = "one")]
    layers_per_partition: u32,
    #[serde(default)]
    params_per_layer: Option<u64>,
    #[serde(default = "two")]
    bytes_per_element: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompute {
    fwd_ms: Option<f64>,
    bwd_ms: Option<f64>,
    recompute_ms: Option<f64>,
    #[serde(rename = "ratio_C")]
    ratio_c: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParallelism {
    #[serde(rename = "D", default = "one")]
    d: u32,
    #[serde(rename = "C", default = "one")]
    c: u32,
    #[serde(default = "one")]
    tp_degree: u32,
    #[serde(default)]
    dc_order: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSelection {
    d_max: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    wan: bool,
    #[serde(default)]
    latency_ms: f64,
    /// Intra-DC links only.
    #[serde(default)]
    wire_ms: f64,
    #[serde(default)]
    spatial_wire_ms: f64,
    #[serde(default)]
    pooled_wire_ms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCell {
    pipelines: u32,
    stages: u32,
    microbatches: u32,
    fwd_ms: f64,
    bwd_ms: f64,
    #[serde(default)]
    recompute_ms: f64,
    links: Vec<RawLink>,
    #[serde(default)]
    bytes: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    steps: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrefill {
    #[serde(default)]
    requests: Option<SyntheticStream>,
    #[serde(default = "default_inference_layers")]
    inference_layers: u32,
    #[serde(default = "default_budget")]
    inference_model_bytes: u64,
    #[serde(default = "default_budget")]
    memory_budget_bytes: u64,
    #[serde(default)]
    guard_ms: f64,
    #[serde(default)]
    decode_handoff_ms: f64,
    #[serde(default)]
    model: Option<PrefillModel>,
    #[serde(default = "default_hidden")]
    hidden: u32,
    #[serde(default = "default_stage_bw_gbps")]
    stage_bw_gbps: f64,
    #[serde(default)]
    intra_latency_ms: f64,
}

fn default_inference_layers() -> u32 {
    32
}

fn default_budget() -> u64 {
    DEFAULT_MEMORY_BUDGET
}

fn default_hidden() -> u32 {
    4096
}

fn default_stage_bw_gbps() -> f64 {
    crate::bubbletea::DEFAULT_STAGE_BW.as_gbps()
}

/// Prefill settings of a document.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillSection {
    pub stream: Option<SyntheticStream>,
    pub inference_layers: u32,
    pub inference_model_bytes: u64,
    pub config: PrefillConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Cell(CellProblem),
    Cluster(Cluster),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunDocument {
    pub workload: Workload,
    pub d_max: Option<u32>,
    /// Second-DC sweep steps; needs exactly two DCs.
    pub sweep_steps: Option<u32>,
    pub prefill: PrefillSection,
    /// Raw document, kept so scenarios can override its sections.
    raw: Value,
}

fn positive(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::NonPositive {
            path: path.into(),
            value: v.to_string(),
        })
    }
}

fn non_negative(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::Negative {
            path: path.into(),
            value: v.to_string(),
        })
    }
}

/// A missing section reads as `{}`, so field defaults apply.
fn section<T: serde::de::DeserializeOwned>(doc: &Value, key: &str) -> Result<T, ConfigError> {
    match doc.get(key) {
        Some(v) => from_value_at(v, key),
        None => from_value_at(&Value::Object(Default::default()), key),
    }
}

fn required<'a>(doc: &'a Value, key: &str) -> Result<&'a Value, ConfigError> {
    doc.get(key).ok_or_else(|| ConfigError::schema(key, "missing field"))
}

fn cell_problem(v: &Value) -> Result<CellProblem, ConfigError> {
    let raw: RawCell = from_value_at(v, "cell")?;
    for (name, x) in [("pipelines", raw.pipelines), ("stages", raw.stages), ("microbatches", raw.microbatches)] {
        if x == 0 {
            return Err(ConfigError::NonPositive {
                path: format!("cell.{name}"),
                value: "0".into(),
            });
        }
    }
    let fwd = Nanos::from_ms(positive("cell.fwd_ms", raw.fwd_ms)?);
    let bwd = Nanos::from_ms(positive("cell.bwd_ms", raw.bwd_ms)?);
    let rec = Nanos::from_ms(non_negative("cell.recompute_ms", raw.recompute_ms)?);
    if raw.links.len() + 1 != raw.stages as usize {
        return Err(ConfigError::schema(
            "cell.links",
            format!("expected {} links for {} stages, got {}", raw.stages - 1, raw.stages, raw.links.len()),
        ));
    }
    let mut links = Vec::with_capacity(raw.links.len());
    for (i, l) in raw.links.iter().enumerate() {
        let at = |f: &str| format!("cell.links[{i}].{f}");
        let lat = Nanos::from_ms(non_negative(&at("latency_ms"), l.latency_ms)?);
        links.push(if l.wan {
            LinkSpec::wan(
                lat,
                Nanos::from_ms(non_negative(&at("spatial_wire_ms"), l.spatial_wire_ms)?),
                Nanos::from_ms(non_negative(&at("pooled_wire_ms"), l.pooled_wire_ms)?),
            )
        } else {
            LinkSpec::intra(lat, Nanos::from_ms(non_negative(&at("wire_ms"), l.wire_ms)?))
        });
    }
    let mut p = CellProblem::uniform(raw.pipelines, raw.stages, raw.microbatches, fwd, bwd, Some(rec), links);
    p.bytes = raw.bytes;
    Ok(p)
}

fn model(v: &Value) -> Result<ModelSpec, ConfigError> {
    let r: RawModel = from_value_at(v, "model")?;
    let m = ModelSpec {
        num_layers: r.num_layers,
        hidden: r.hidden,
        seq_len: r.seq_len,
        microbatch: r.microbatch,
        num_microbatches: r.num_microbatches,
        layers_per_partition: r.layers_per_partition,
        params_per_layer: r.params_per_layer,
        bytes_per_element: r.bytes_per_element,
    };
    m.validate().map_err(|e| ConfigError::schema("model", e.to_string()))?;
    Ok(m)
}

fn compute(v: &Value) -> Result<ComputeProfile, ConfigError> {
    let r: RawCompute = from_value_at(v, "compute")?;
    match (r.fwd_ms, r.ratio_c) {
        (Some(_), Some(_)) => Err(ConfigError::schema("compute", "give either fwd_ms or ratio_C, not both")),
        (None, None) => Err(ConfigError::schema("compute", "one of fwd_ms or ratio_C is required")),
        (None, Some(c)) => Ok(ComputeProfile::Ratio(positive("compute.ratio_C", c)?)),
        (Some(f), None) => {
            let f = positive("compute.fwd_ms", f)?;
            Ok(ComputeProfile::Explicit {
                fwd_ms: f,
                bwd_ms: positive("compute.bwd_ms", r.bwd_ms.unwrap_or(2.0 * f))?,
                recompute_ms: positive("compute.recompute_ms", r.recompute_ms.unwrap_or(f))?,
            })
        }
    }
}

fn params(doc: &Value, topo: &ClusterTopology) -> Result<PlanParams, ConfigError> {
    let r: RawParallelism = section(doc, "parallelism")?;
    for (name, x) in [("D", r.d), ("C", r.c), ("tp_degree", r.tp_degree)] {
        if x == 0 {
            return Err(ConfigError::NonPositive {
                path: format!("parallelism.{name}"),
                value: "0".into(),
            });
        }
    }
    let dc_order = match r.dc_order {
        None => None,
        Some(ids) => {
            if ids.len() != topo.num_dcs() {
                return Err(ConfigError::schema(
                    "parallelism.dc_order",
                    format!("expected {} datacenters, got {}", topo.num_dcs(), ids.len()),
                ));
            }
            let mut order = Vec::with_capacity(ids.len());
            for (i, id) in ids.into_iter().enumerate() {
                let path = format!("parallelism.dc_order[{i}]");
                let dc = topo
                    .dc_index(&id)
                    .ok_or_else(|| ConfigError::UnknownDatacenter { path: path.clone(), id: id.clone() })?;
                if order.contains(&dc) {
                    return Err(ConfigError::DuplicateId { path, id });
                }
                order.push(dc);
            }
            Some(order)
        }
    };
    Ok(PlanParams {
        dp_cells: r.d,
        cell_size: r.c,
        tp_degree: r.tp_degree,
        dc_order,
    })
}

fn cluster(doc: &Value) -> Result<Cluster, ConfigError> {
    let topo = topology_from_value(doc)?;
    let params = params(doc, &topo)?;
    Ok(Cluster {
        model: model(required(doc, "model")?)?,
        compute: compute(required(doc, "compute")?)?,
        params,
        topo,
    })
}

fn prefill(doc: &Value) -> Result<PrefillSection, ConfigError> {
    let r: RawPrefill = section(doc, "prefill")?;
    if let Some(s) = &r.requests {
        if s.min_tokens == 0 || s.min_tokens > s.max_tokens {
            return Err(ConfigError::schema("prefill.requests", "need 1 <= min_tokens <= max_tokens"));
        }
        non_negative("prefill.requests.mean_interarrival_ms", s.mean_interarrival_ms)?;
    }
    if r.inference_layers == 0 {
        return Err(ConfigError::NonPositive {
            path: "prefill.inference_layers".into(),
            value: "0".into(),
        });
    }
    let model = r.model.unwrap_or_default();
    positive("prefill.model.ms_at_saturation", model.ms_at_saturation)?;
    Ok(PrefillSection {
        stream: r.requests,
        inference_layers: r.inference_layers,
        inference_model_bytes: r.inference_model_bytes,
        config: PrefillConfig {
            model,
            hidden: r.hidden,
            stage_bw: Bandwidth::from_gbps(positive("prefill.stage_bw_gbps", r.stage_bw_gbps)?),
            intra_latency_ms: non_negative("prefill.intra_latency_ms", r.intra_latency_ms)?,
            guard_ms: non_negative("prefill.guard_ms", r.guard_ms)?,
            memory_budget: r.memory_budget_bytes,
            decode_handoff_ms: non_negative("prefill.decode_handoff_ms", r.decode_handoff_ms)?,
        },
    })
}

fn from_value(doc: Value) -> Result<RunDocument, ConfigError> {
    let workload = match doc.get("cell") {
        Some(v) => {
            if doc.get("datacenters").is_some() {
                return Err(ConfigError::schema("cell", "a cell document carries no topology"));
            }
            Workload::Cell(cell_problem(v)?)
        }
        None => Workload::Cluster(cluster(&doc)?),
    };
    let sel: RawSelection = section(&doc, "selection")?;
    let sweep_steps = match doc.get("sweep") {
        Some(v) => {
            let s: RawSweep = from_value_at(v, "sweep")?;
            if s.steps == 0 {
                return Err(ConfigError::NonPositive {
                    path: "sweep.steps".into(),
                    value: "0".into(),
                });
            }
            Some(s.steps)
        }
        None => None,
    };
    if let Some(v) = doc.get("scenarios") {
        if !v.is_array() {
            return Err(ConfigError::schema("scenarios", "must be a list"));
        }
    }
    Ok(RunDocument {
        workload,
        d_max: sel.d_max,
        sweep_steps,
        prefill: prefill(&doc)?,
        raw: doc,
    })
}

pub fn load_run(text: &str) -> Result<RunDocument, ConfigError> {
    from_value(parse_document(text)?)
}

impl RunDocument {
    pub fn cluster(&self) -> Option<&Cluster> {
        match &self.workload {
            Workload::Cluster(c) => Some(c),
            Workload::Cell(_) => None,
        }
    }

    /// Algorithm input for a cluster document, with the cell size taken
    /// from `parallelism.C`.
    pub fn selection_input(&self) -> Option<SelectionInput> {
        self.cluster().map(|c| selection_input(c, self.d_max))
    }

    /// One scenario per entry of `scenarios`; each entry names itself and
    /// replaces whole top-level sections of the base document. Without a
    /// `scenarios` list the document itself is the only scenario.
    pub fn scenarios(&self) -> Result<Vec<Scenario>, ConfigError> {
        let Some(list) = self.raw.get("scenarios").and_then(Value::as_array) else {
            return Ok(match self.selection_input() {
                Some(input) => vec![Scenario {
                    name: "base".into(),
                    input,
                }],
                None => vec![],
            });
        };
        let mut out = Vec::with_capacity(list.len());
        for (i, entry) in list.iter().enumerate() {
            let at = format!("scenarios[{i}]");
            let obj = entry.as_object().ok_or_else(|| ConfigError::schema(&at, "must be an object"))?;
            let name = obj
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| ConfigError::schema(format!("{at}.name"), "missing string field"))?
                .to_string();
            let mut merged = self.raw.clone();
            let base = merged.as_object_mut().expect("document root is an object");
            base.remove("scenarios");
            for (k, v) in obj.iter().filter(|(k, _)| *k != "name") {
                base.insert(k.clone(), v.clone());
            }
            let doc = from_value(merged).map_err(|e| prefix_error(e, &at))?;
            let input = doc
                .selection_input()
                .ok_or_else(|| ConfigError::schema(&at, "scenarios need a cluster document"))?;
            out.push(Scenario { name, input });
        }
        Ok(out)
    }
}

impl RunDocument {
    /// Input for the second-DC sweep: the first datacenter as given and
    /// the second resized to `second` GPUs, or dropped when `second` is 0.
    pub fn sweep_input(&self, second: u32) -> Option<SelectionInput> {
        let mut inp = self.selection_input()?;
        let topo = &mut inp.topo;
        if topo.num_dcs() != 2 {
            return None;
        }
        if second == 0 {
            let mut wan = crate::topology::WanProfile::with_latencies(vec![vec![0.0]]);
            wan.pair_bw_cap = topo.wan.pair_bw_cap;
            wan.tcp_table = topo.wan.tcp_table.clone();
            wan.aggregate_pair_cap = topo.wan.aggregate_pair_cap;
            *topo = ClusterTopology::new(vec![topo.datacenters[0].clone()], wan).expect("one DC of a valid topology is valid");
            inp.dc_order = None;
        } else {
            topo.datacenters[1].gpu_count = second;
        }
        Some(inp)
    }
}

fn selection_input(c: &Cluster, d_max: Option<u32>) -> SelectionInput {
    SelectionInput {
        d_max,
        dc_order: c.params.dc_order.clone(),
        tp_degree: c.params.tp_degree,
        ..SelectionInput::new(c.topo.clone(), c.model.clone(), c.compute, c.params.cell_size)
    }
}

fn prefix_error(e: ConfigError, at: &str) -> ConfigError {
    match e.path() {
        Some(p) => ConfigError::schema(format!("{at}.{p}"), e.to_string()),
        None => ConfigError::schema(at, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_problem;
    use crate::fixtures::{two_pipeline_cell, testbed_12gpu};
    use crate::schedule::Policy;

    const CELL_DOC: &str = r#"{"cell": {"pipelines": 2, "stages": 6, "microbatches": 4,
        "fwd_ms": 1, "bwd_ms": 2, "recompute_ms": 1,
        "links": [{"wan": false}, {"wan": true, "spatial_wire_ms": 2, "pooled_wire_ms": 1},
                  {"wan": false}, {"wan": true, "spatial_wire_ms": 2, "pooled_wire_ms": 1},
                  {"wan": false}]}}"#;

    const TESTBED: &str = r#"{
        "datacenters": [
            {"id": "dc1", "gpu_count": 6, "intra_bw_gbps": 100, "intra_latency_ms": 0},
            {"id": "dc2", "gpu_count": 3, "intra_bw_gbps": 100, "intra_latency_ms": 0},
            {"id": "dc3", "gpu_count": 3, "intra_bw_gbps": 100, "intra_latency_ms": 0}],
        "wan": {"latency_ms": {"dc1|dc2": 40, "dc1|dc3": 40, "dc2|dc3": 40}},
        "model": {"num_layers": 4, "hidden": 4096, "seq_len": 4096, "num_microbatches": 4},
        "compute": {"ratio_C": 3},
        "parallelism": {"D": 1, "C": 3}
    }"#;

    #[test]
    fn cell_document_matches_the_fixture() {
        let doc = load_run(CELL_DOC).unwrap();
        let Workload::Cell(p) = &doc.workload else { panic!("cell mode") };
        assert_eq!(p, &two_pipeline_cell());
        assert_eq!(run_problem(p, Policy::Varuna, None).unwrap().makespan_ms(), 38.0);
        assert!(doc.scenarios().unwrap().is_empty());
    }

    #[test]
    fn cluster_document_matches_the_testbed() {
        let doc = load_run(TESTBED).unwrap();
        assert_eq!(doc.cluster().unwrap(), &testbed_12gpu(40.0, 4));
        assert_eq!(doc.prefill.config, PrefillConfig::default());
        let sc = doc.scenarios().unwrap();
        assert_eq!(sc.len(), 1);
        assert_eq!(sc[0].input.cell_size, 3);
    }

    #[test]
    fn scenarios_replace_sections() {
        let mut v: Value = serde_json::from_str(TESTBED).unwrap();
        v["scenarios"] = serde_json::json!([
            {"name": "c1", "parallelism": {"D": 1, "C": 1}},
            {"name": "bad", "compute": {"ratio_C": -1}}
        ]);
        let doc = load_run(&v.to_string()).unwrap();
        let err = doc.scenarios().unwrap_err();
        assert_eq!(err.path(), Some("scenarios[1].compute.ratio_C"));
        v["scenarios"].as_array_mut().unwrap().pop();
        assert!(load_run(&v.to_string()).unwrap().sweep_input(0).is_none());
        let sc = load_run(&v.to_string()).unwrap().scenarios().unwrap();
        assert_eq!((sc[0].name.as_str(), sc[0].input.cell_size), ("c1", 1));
    }

    #[test]
    fn sweep_input_resizes_the_second_dc() {
        use crate::fixtures::f_sweep_input;
        let doc = r#"{"datacenters": [
            {"id": "dc1", "gpu_count": 600, "intra_bw_gbps": 100, "intra_latency_ms": 0},
            {"id": "dc2", "gpu_count": 1, "intra_bw_gbps": 100, "intra_latency_ms": 0}],
            "wan": {"latency_ms": {"dc1|dc2": 40}},
            "model": {"num_layers": 60, "hidden": 4096, "seq_len": 4096, "num_microbatches": 60},
            "compute": {"ratio_C": 2}, "parallelism": {"C": 2}, "sweep": {"steps": 10}}"#;
        let doc = load_run(doc).unwrap();
        assert_eq!(doc.sweep_steps, Some(10));
        for second in [0, 60, 600] {
            assert_eq!(doc.sweep_input(second).unwrap(), f_sweep_input(second), "{second}");
        }
    }

    #[test]
    fn errors_carry_paths() {
        let cases = [
            (r#"{"cell": {"pipelines": 0, "stages": 1, "microbatches": 1, "fwd_ms": 1, "bwd_ms": 1, "links": []}}"#, "cell.pipelines"),
            (r#"{"cell": {"pipelines": 1, "stages": 2, "microbatches": 1, "fwd_ms": 1, "bwd_ms": 1, "links": []}}"#, "cell.links"),
            (r#"{"cell": {"pipelines": 1, "stages": 1, "microbatches": 1, "fwd_ms": 1, "bwd_ms": 1, "links": [], "extra": 1}}"#, "cell.extra"),
        ];
        for (text, path) in cases {
            assert_eq!(load_run(text).unwrap_err().path(), Some(path), "{text}");
        }
        let mut v: Value = serde_json::from_str(TESTBED).unwrap();
        v["compute"] = serde_json::json!({"fwd_ms": 1, "ratio_C": 2});
        assert_eq!(load_run(&v.to_string()).unwrap_err().path(), Some("compute"));
        v["compute"] = serde_json::json!({"fwd_ms": 1});
        v["parallelism"]["dc_order"] = serde_json::json!(["dc1", "dc9", "dc3"]);
        assert_eq!(load_run(&v.to_string()).unwrap_err().path(), Some("parallelism.dc_order[1]"));
        v.as_object_mut().unwrap().remove("parallelism");
        v.as_object_mut().unwrap().remove("model");
        assert_eq!(load_run(&v.to_string()).unwrap_err().path(), Some("model"));
        assert!(matches!(load_run("[1]"), Err(ConfigError::Schema { .. })));
        assert!(matches!(load_run("{"), Err(ConfigError::Syntax(_))));
    }
}
