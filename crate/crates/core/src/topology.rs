//! Datacenters, their GPUs and fabrics, and the WAN that joins them.
//!
//! The on-disk form is a JSON document with `datacenters` and `wan` keys.
//! Bandwidths are written in Gbps/Mbps there and converted to bytes/ms on
//! load.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ConfigError;
use crate::units::Bandwidth;

/// Single-connection TCP calibration points as (one-way latency ms, Mbps).
pub const DEFAULT_TCP_TABLE_MBPS: [(f64, f64); 4] =
    [(10.0, 1220.0), (20.0, 600.0), (30.0, 396.0), (40.0, 293.0)];

/// Default per node-pair WAN cap reachable with many parallel connections.
pub const DEFAULT_PAIR_CAP_GBPS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Datacenter {
    pub id: String,
    pub gpu_count: u32,
    pub intra_bw: Bandwidth,
    pub intra_latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcpPoint {
    pub latency_ms: f64,
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WanProfile {
    /// One-way latency, indexed by datacenter position in the topology.
    latency_ms: Vec<Vec<f64>>,
    pub pair_bw_cap: Bandwidth,
    pub tcp_table: Vec<TcpPoint>,
    /// Optional ceiling on everything crossing one DC pair. `None` means only
    /// the per node-pair cap applies.
    pub aggregate_pair_cap: Option<Bandwidth>,
}

impl WanProfile {
    pub fn default_tcp_table() -> Vec<TcpPoint> {
        DEFAULT_TCP_TABLE_MBPS
            .iter()
            .map(|&(latency_ms, mbps)| TcpPoint {
                latency_ms,
                bandwidth: Bandwidth::from_mbps(mbps),
            })
            .collect()
    }

    /// A profile with the default cap and table and the given latency matrix.
    pub fn with_latencies(latency_ms: Vec<Vec<f64>>) -> Self {
        WanProfile {
            latency_ms,
            pair_bw_cap: Bandwidth::from_gbps(DEFAULT_PAIR_CAP_GBPS),
            tcp_table: Self::default_tcp_table(),
            aggregate_pair_cap: None,
        }
    }

    pub fn latency_ms(&self, a: usize, b: usize) -> f64 {
        self.latency_ms[a][b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    pub datacenters: Vec<Datacenter>,
    pub wan: WanProfile,
}

impl ClusterTopology {
    /// Validates and assembles a topology.
    pub fn new(datacenters: Vec<Datacenter>, wan: WanProfile) -> Result<Self, ConfigError> {
        let topo = ClusterTopology { datacenters, wan };
        topo.validate()?;
        Ok(topo)
    }

    /// Topology where every DC pair sees the same one-way latency.
    pub fn uniform(
        dcs: &[(&str, u32)],
        wan_latency_ms: f64,
        intra_bw: Bandwidth,
        intra_latency_ms: f64,
    ) -> Result<Self, ConfigError> {
        let n = dcs.len();
        let datacenters = dcs
            .iter()
            .map(|&(id, gpu_count)| Datacenter {
                id: id.to_string(),
                gpu_count,
                intra_bw,
                intra_latency_ms,
            })
            .collect();
        let latency = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| if a == b { 0.0 } else { wan_latency_ms })
                    .collect()
            })
            .collect();
        Self::new(datacenters, WanProfile::with_latencies(latency))
    }

    pub fn num_dcs(&self) -> usize {
        self.datacenters.len()
    }

    pub fn dc_index(&self, id: &str) -> Option<usize> {
        self.datacenters.iter().position(|dc| dc.id == id)
    }

    pub fn total_gpus(&self) -> u64 {
        self.datacenters.iter().map(|dc| dc.gpu_count as u64).sum()
    }

    /// Global id of the first GPU in datacenter `dc`.
    pub fn gpu_offset(&self, dc: usize) -> u32 {
        self.datacenters[..dc].iter().map(|d| d.gpu_count).sum()
    }

    pub fn latency_ms(&self, a: usize, b: usize) -> f64 {
        self.wan.latency_ms(a, b)
    }

    /// Largest one-way latency between any two datacenters (0 for one DC).
    pub fn max_wan_latency_ms(&self) -> f64 {
        self.wan
            .latency_ms
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// Datacenter indices sorted by decreasing GPU count; ties keep document order.
    pub fn default_dc_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_dcs()).collect();
        order.sort_by(|&a, &b| {
            self.datacenters[b]
                .gpu_count
                .cmp(&self.datacenters[a].gpu_count)
        });
        order
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.datacenters.is_empty() {
            return Err(ConfigError::schema("datacenters", "at least one datacenter is required"));
        }
        let mut seen = HashSet::new();
        for (i, dc) in self.datacenters.iter().enumerate() {
            if !seen.insert(dc.id.as_str()) {
                return Err(ConfigError::DuplicateId {
                    path: format!("datacenters[{i}].id"),
                    id: dc.id.clone(),
                });
            }
            if dc.id.contains('|') || dc.id.is_empty() {
                return Err(ConfigError::schema(
                    format!("datacenters[{i}].id"),
                    "ids must be non-empty and must not contain `|`",
                ));
            }
            if dc.gpu_count == 0 {
                return Err(ConfigError::NonPositive {
                    path: format!("datacenters[{i}].gpu_count"),
                    value: "0".into(),
                });
            }
            if !(dc.intra_bw.bytes_per_ms() > 0.0) {
                return Err(ConfigError::NonPositive {
                    path: format!("datacenters[{i}].intra_bw_gbps"),
                    value: dc.intra_bw.as_gbps().to_string(),
                });
            }
            if !(dc.intra_latency_ms >= 0.0) {
                return Err(ConfigError::Negative {
                    path: format!("datacenters[{i}].intra_latency_ms"),
                    value: dc.intra_latency_ms.to_string(),
                });
            }
        }
        let n = self.num_dcs();
        let m = &self.wan.latency_ms;
        if m.len() != n || m.iter().any(|row| row.len() != n) {
            return Err(ConfigError::schema("wan.latency_ms", "matrix shape does not match datacenters"));
        }
        for a in 0..n {
            if m[a][a] != 0.0 {
                return Err(ConfigError::schema(
                    format!("wan.latency_ms.{0}|{0}", self.datacenters[a].id),
                    "self latency must be 0",
                ));
            }
            for b in (a + 1)..n {
                let key = format!("wan.latency_ms.{}|{}", self.datacenters[a].id, self.datacenters[b].id);
                if m[a][b] != m[b][a] {
                    return Err(ConfigError::AsymmetricLatency {
                        path: key,
                        forward: m[a][b],
                        reverse: m[b][a],
                    });
                }
                if !(m[a][b] >= 0.0) {
                    return Err(ConfigError::Negative {
                        path: key,
                        value: m[a][b].to_string(),
                    });
                }
            }
        }
        if !(self.wan.pair_bw_cap.bytes_per_ms() > 0.0) {
            return Err(ConfigError::NonPositive {
                path: "wan.pair_bw_cap_gbps".into(),
                value: self.wan.pair_bw_cap.as_gbps().to_string(),
            });
        }
        if let Some(cap) = self.wan.aggregate_pair_cap {
            if !(cap.bytes_per_ms() > 0.0) {
                return Err(ConfigError::NonPositive {
                    path: "wan.aggregate_pair_cap_gbps".into(),
                    value: cap.as_gbps().to_string(),
                });
            }
        }
        let table = &self.wan.tcp_table;
        if table.is_empty() {
            return Err(ConfigError::schema("wan.tcp_table", "at least one calibration point is required"));
        }
        for (i, p) in table.iter().enumerate() {
            if !(p.latency_ms > 0.0) {
                return Err(ConfigError::NonPositive {
                    path: format!("wan.tcp_table[{i}][0]"),
                    value: p.latency_ms.to_string(),
                });
            }
            if !(p.bandwidth.bytes_per_ms() > 0.0) {
                return Err(ConfigError::NonPositive {
                    path: format!("wan.tcp_table[{i}][1]"),
                    value: p.bandwidth.as_mbps().to_string(),
                });
            }
            if i > 0 {
                let prev = table[i - 1];
                if p.latency_ms <= prev.latency_ms || p.bandwidth.bytes_per_ms() >= prev.bandwidth.bytes_per_ms() {
                    return Err(ConfigError::schema(
                        format!("wan.tcp_table[{i}]"),
                        "latencies must strictly increase and bandwidths strictly decrease",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical document form: pairs keyed `a|b` in datacenter order.
    pub fn to_value(&self) -> Value {
        let raw = RawTopology {
            datacenters: self
                .datacenters
                .iter()
                .map(|dc| RawDatacenter {
                    id: dc.id.clone(),
                    gpu_count: dc.gpu_count as i64,
                    intra_bw_gbps: dc.intra_bw.as_gbps(),
                    intra_latency_ms: dc.intra_latency_ms,
                })
                .collect(),
            wan: RawWan {
                latency_ms: {
                    let mut map = BTreeMap::new();
                    for a in 0..self.num_dcs() {
                        for b in (a + 1)..self.num_dcs() {
                            map.insert(
                                format!("{}|{}", self.datacenters[a].id, self.datacenters[b].id),
                                self.latency_ms(a, b),
                            );
                        }
                    }
                    map
                },
                pair_bw_cap_gbps: Some(self.wan.pair_bw_cap.as_gbps()),
                tcp_table: Some(
                    self.wan
                        .tcp_table
                        .iter()
                        .map(|p| [p.latency_ms, p.bandwidth.as_mbps()])
                        .collect(),
                ),
                aggregate_pair_cap_gbps: self.wan.aggregate_pair_cap.map(|b| b.as_gbps()),
            },
        };
        serde_json::to_value(raw).expect("topology serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("topology serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDatacenter {
    id: String,
    gpu_count: i64,
    intra_bw_gbps: f64,
    intra_latency_ms: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWan {
    #[serde(default)]
    latency_ms: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_bw_cap_gbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tcp_table: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aggregate_pair_cap_gbps: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTopology {
    datacenters: Vec<RawDatacenter>,
    wan: RawWan,
}

/// Deserializes `value` and reports failures with a `prefix.`-qualified path.
pub(crate) fn from_value_at<T: serde::de::DeserializeOwned>(
    value: &Value,
    prefix: &str,
) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." || inner.is_empty() {
            prefix.to_string()
        } else if prefix.is_empty() {
            inner
        } else if inner.starts_with('[') {
            format!("{prefix}{inner}")
        } else {
            format!("{prefix}.{inner}")
        };
        ConfigError::schema(path, e.into_inner().to_string())
    })
}

pub(crate) fn parse_document(text: &str) -> Result<Value, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if !value.is_object() {
        return Err(ConfigError::schema("", "document root must be an object"));
    }
    Ok(value)
}

/// Parses the `datacenters` and `wan` sections of a configuration document.
/// Other top-level keys are ignored.
pub fn load_topology(config_text: &str) -> Result<ClusterTopology, ConfigError> {
    topology_from_value(&parse_document(config_text)?)
}

pub(crate) fn topology_from_value(doc: &Value) -> Result<ClusterTopology, ConfigError> {
    let dcs_value = doc
        .get("datacenters")
        .ok_or_else(|| ConfigError::schema("datacenters", "missing field"))?;
    let raw_dcs: Vec<RawDatacenter> = from_value_at(dcs_value, "datacenters")?;
    let raw_wan: RawWan = match doc.get("wan") {
        Some(v) => from_value_at(v, "wan")?,
        None => RawWan::default(),
    };

    let mut datacenters: Vec<Datacenter> = Vec::with_capacity(raw_dcs.len());
    for (i, raw) in raw_dcs.into_iter().enumerate() {
        if datacenters.iter().any(|dc| dc.id == raw.id) {
            return Err(ConfigError::DuplicateId {
                path: format!("datacenters[{i}].id"),
                id: raw.id,
            });
        }
        if raw.gpu_count <= 0 {
            return Err(ConfigError::NonPositive {
                path: format!("datacenters[{i}].gpu_count"),
                value: raw.gpu_count.to_string(),
            });
        }
        let gpu_count = u32::try_from(raw.gpu_count).map_err(|_| {
            ConfigError::schema(format!("datacenters[{i}].gpu_count"), "value too large")
        })?;
        if !(raw.intra_bw_gbps > 0.0) {
            return Err(ConfigError::NonPositive {
                path: format!("datacenters[{i}].intra_bw_gbps"),
                value: raw.intra_bw_gbps.to_string(),
            });
        }
        datacenters.push(Datacenter {
            id: raw.id,
            gpu_count,
            intra_bw: Bandwidth::from_gbps(raw.intra_bw_gbps),
            intra_latency_ms: raw.intra_latency_ms,
        });
    }

    let n = datacenters.len();
    let index = |id: &str| datacenters.iter().position(|dc| dc.id == id);
    let mut matrix: Vec<Vec<Option<f64>>> = vec![vec![None; n]; n];
    for i in 0..n {
        matrix[i][i] = Some(0.0);
    }
    let mut given = std::collections::HashMap::new();
    for (key, &ms) in &raw_wan.latency_ms {
        let path = format!("wan.latency_ms.{key}");
        let (a, b) = key
            .split_once('|')
            .ok_or_else(|| ConfigError::schema(&path, "pair keys must look like `a|b`"))?;
        let ia = index(a).ok_or_else(|| ConfigError::UnknownDatacenter {
            path: path.clone(),
            id: a.to_string(),
        })?;
        let ib = index(b).ok_or_else(|| ConfigError::UnknownDatacenter {
            path: path.clone(),
            id: b.to_string(),
        })?;
        if !(ms >= 0.0) {
            return Err(ConfigError::Negative {
                path,
                value: ms.to_string(),
            });
        }
        if ia == ib {
            if ms != 0.0 {
                return Err(ConfigError::schema(path, "self latency must be 0"));
            }
            continue;
        }
        if let Some(&prev) = given.get(&(ib, ia)) {
            if prev != ms {
                return Err(ConfigError::AsymmetricLatency {
                    path,
                    forward: ms,
                    reverse: prev,
                });
            }
        }
        given.insert((ia, ib), ms);
        matrix[ia][ib] = Some(ms);
        matrix[ib][ia] = Some(ms);
    }
    let mut latency = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            latency[a][b] = matrix[a][b].ok_or_else(|| ConfigError::MissingPair {
                a: datacenters[a.min(b)].id.clone(),
                b: datacenters[a.max(b)].id.clone(),
            })?;
        }
    }

    let pair_cap_gbps = raw_wan.pair_bw_cap_gbps.unwrap_or(DEFAULT_PAIR_CAP_GBPS);
    if !(pair_cap_gbps > 0.0) {
        return Err(ConfigError::NonPositive {
            path: "wan.pair_bw_cap_gbps".into(),
            value: pair_cap_gbps.to_string(),
        });
    }
    let tcp_table = match raw_wan.tcp_table {
        Some(rows) => rows
            .into_iter()
            .map(|[latency_ms, mbps]| TcpPoint {
                latency_ms,
                bandwidth: Bandwidth::from_mbps(mbps),
            })
            .collect(),
        None => WanProfile::default_tcp_table(),
    };
    let wan = WanProfile {
        latency_ms: latency,
        pair_bw_cap: Bandwidth::from_gbps(pair_cap_gbps),
        tcp_table,
        aggregate_pair_cap: raw_wan.aggregate_pair_cap_gbps.map(Bandwidth::from_gbps),
    };
    ClusterTopology::new(datacenters, wan)
}
