//! Closed-form communication costs: WAN bandwidth per connection count,
//! point-to-point transfer time, ring all-reduce time and tensor sizes.

use serde::{Deserialize, Serialize};

use crate::topology::WanProfile;
use crate::units::Bandwidth;

/// Bandwidth reachable by one TCP connection at the given one-way latency.
///
/// Exact at calibration points, log-linear between them, clamped below the
/// first point and falling off as `1/latency` beyond the last.
pub fn single_tcp_bandwidth(latency_ms: f64, profile: &WanProfile) -> Bandwidth {
    let table = &profile.tcp_table;
    let first = table[0];
    if latency_ms <= first.latency_ms {
        return first.bandwidth;
    }
    let last = table[table.len() - 1];
    if latency_ms >= last.latency_ms {
        if latency_ms == last.latency_ms {
            return last.bandwidth;
        }
        return Bandwidth(last.bandwidth.0 * last.latency_ms / latency_ms);
    }
    for pair in table.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if latency_ms == hi.latency_ms {
            return hi.bandwidth;
        }
        if latency_ms < hi.latency_ms {
            let frac = (latency_ms - lo.latency_ms) / (hi.latency_ms - lo.latency_ms);
            let ln = lo.bandwidth.0.ln() + frac * (hi.bandwidth.0.ln() - lo.bandwidth.0.ln());
            return Bandwidth(ln.exp());
        }
    }
    unreachable!("latency inside table range")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthQuery {
    pub latency_ms: f64,
    pub n_connections: u32,
}

/// Aggregate bandwidth of `n_connections` parallel connections between one
/// node pair, limited by the pair cap.
pub fn effective_pair_bandwidth(q: BandwidthQuery, profile: &WanProfile) -> Bandwidth {
    let n = q.n_connections.max(1) as f64;
    single_tcp_bandwidth(q.latency_ms, profile)
        .scale(n)
        .min(profile.pair_bw_cap)
}

/// How many WAN connections each node pair opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WanMode {
    /// One connection per pair (framework default).
    SingleConnection,
    /// Enough parallel connections to reach the pair cap.
    MultiConnection,
}

impl WanMode {
    pub fn from_multi_conn(multi: bool) -> Self {
        if multi {
            WanMode::MultiConnection
        } else {
            WanMode::SingleConnection
        }
    }

    /// Per node-pair bandwidth at `latency_ms` under this mode.
    pub fn pair_bandwidth(self, latency_ms: f64, profile: &WanProfile) -> Bandwidth {
        match self {
            WanMode::SingleConnection => effective_pair_bandwidth(
                BandwidthQuery {
                    latency_ms,
                    n_connections: 1,
                },
                profile,
            ),
            WanMode::MultiConnection => profile.pair_bw_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("bandwidth must be positive")]
pub struct NonPositiveBandwidth;

/// Latency plus serialization time, charged once per message.
pub fn transfer_time(bytes: u64, bw: Bandwidth, latency_ms: f64) -> Result<f64, NonPositiveBandwidth> {
    if !(bw.0 > 0.0) {
        return Err(NonPositiveBandwidth);
    }
    Ok(latency_ms + bytes as f64 / bw.0)
}

/// Ring all-reduce over `ring_size` replicas of `params` fp16 parameters:
/// `4·P·(N−1) / (N·BW)`.
pub fn allreduce_time(params: u64, ring_size: u32, bw: Bandwidth) -> f64 {
    if ring_size <= 1 {
        return 0.0;
    }
    let n = ring_size as f64;
    4.0 * params as f64 * (n - 1.0) / (n * bw.0)
}

/// Activation (or gradient) tensor for one microbatch at a stage boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub batch: u32,
    pub seq_len: u32,
    pub hidden: u32,
    pub bytes_per_element: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid tensor shape: {0}")]
pub struct InvalidShape(pub String);

impl TensorShape {
    pub fn new(batch: u32, seq_len: u32, hidden: u32, bytes_per_element: u8) -> Result<Self, InvalidShape> {
        if batch == 0 || seq_len == 0 || hidden == 0 {
            return Err(InvalidShape(format!("B={batch}, L={seq_len}, H={hidden} must all be positive")));
        }
        if !matches!(bytes_per_element, 1 | 2 | 4) {
            return Err(InvalidShape(format!("bytes_per_element={bytes_per_element} not in {{1,2,4}}")));
        }
        Ok(TensorShape {
            batch,
            seq_len,
            hidden,
            bytes_per_element,
        })
    }

    /// fp16 shape.
    pub fn fp16(batch: u32, seq_len: u32, hidden: u32) -> Result<Self, InvalidShape> {
        Self::new(batch, seq_len, hidden, 2)
    }
}

/// `B·L·H·bytes_per_element`.
pub fn activation_bytes(shape: TensorShape) -> u64 {
    shape.batch as u64 * shape.seq_len as u64 * shape.hidden as u64 * shape.bytes_per_element as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> WanProfile {
        WanProfile::with_latencies(vec![vec![0.0]])
    }

    #[test]
    fn table_points_are_exact() {
        let p = profile();
        for (lat, mbps) in [(10.0, 1220.0), (20.0, 600.0), (30.0, 396.0), (40.0, 293.0)] {
            assert_eq!(single_tcp_bandwidth(lat, &p), Bandwidth::from_mbps(mbps));
        }
        assert_eq!(single_tcp_bandwidth(40.0, &p).bytes_per_ms(), 36_625.0);
    }

    #[test]
    fn beyond_table_falls_off_inversely() {
        let p = profile();
        // 293 Mbps * 40/80
        assert_eq!(single_tcp_bandwidth(80.0, &p), Bandwidth::from_mbps(146.5));
        assert_eq!(single_tcp_bandwidth(0.0, &p), Bandwidth::from_mbps(1220.0));
        assert_eq!(single_tcp_bandwidth(5.0, &p), Bandwidth::from_mbps(1220.0));
    }

    #[test]
    fn interpolation_is_log_linear() {
        let p = profile();
        let mid = single_tcp_bandwidth(15.0, &p).as_mbps();
        let expected = (1220.0f64 * 600.0).sqrt();
        assert!((mid - expected).abs() < 1e-9, "{mid} vs {expected}");
    }

    #[test]
    fn pair_bandwidth_examples() {
        let p = profile();
        let q = |latency_ms, n_connections| BandwidthQuery {
            latency_ms,
            n_connections,
        };
        assert_eq!(effective_pair_bandwidth(q(40.0, 32), &p), Bandwidth::from_gbps(5.0));
        assert_eq!(effective_pair_bandwidth(q(40.0, 1), &p), Bandwidth::from_mbps(293.0));
        assert_eq!(effective_pair_bandwidth(q(10.0, 2), &p), Bandwidth::from_mbps(2440.0));
    }

    #[test]
    fn transfer_time_examples() {
        let t = transfer_time(100_663_296, Bandwidth(36_625.0), 40.0).unwrap();
        assert!((t - 2788.5).abs() < 0.5, "{t}");
        assert_eq!(transfer_time(0, Bandwidth(1.0), 40.0).unwrap(), 40.0);
        let t = transfer_time(100_663_296, Bandwidth(625_000.0), 40.0).unwrap();
        assert!((t - 201.06).abs() < 0.01, "{t}");
        assert_eq!(transfer_time(1, Bandwidth(0.0), 0.0), Err(NonPositiveBandwidth));
    }

    #[test]
    fn allreduce_examples() {
        assert_eq!(allreduce_time(123, 1, Bandwidth(1.0)), 0.0);
        assert_eq!(allreduce_time(1_000_000_000, 4, Bandwidth(625_000.0)), 4800.0);
        let t = allreduce_time(1_000_000_000, 6, Bandwidth::from_gbps(100.0));
        assert!((t - 266.666_666).abs() < 1e-3);
    }

    #[test]
    fn activation_sizes() {
        let gpt_b = TensorShape::fp16(1, 6144, 8192).unwrap();
        assert_eq!(activation_bytes(gpt_b), 100_663_296);
        assert_eq!(activation_bytes(gpt_b), 96 * 1024 * 1024);
        let llama = TensorShape::fp16(1, 8192, 4096).unwrap();
        assert_eq!(activation_bytes(llama), 67_108_864);
        assert!(TensorShape::new(1, 1, 1, 0).is_err());
        assert!(TensorShape::new(1, 1, 1, 3).is_err());
        assert!(TensorShape::new(0, 1, 1, 2).is_err());
    }
}
