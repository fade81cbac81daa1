//! Canonical units: time in milliseconds (stored as integer nanoseconds),
//! data in bytes, bandwidth in bytes per millisecond.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Bytes per millisecond carried by a 1 Gbps link.
pub const BYTES_PER_MS_PER_GBPS: f64 = 125_000.0;
/// Bytes per millisecond carried by a 1 Mbps link.
pub const BYTES_PER_MS_PER_MBPS: f64 = 125.0;

/// A simulation instant or duration in integer nanoseconds.
///
/// All event arithmetic happens on this type so that tie-breaks are exact;
/// millisecond floats are only a view.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub i64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);
    pub const MAX: Nanos = Nanos(i64::MAX);

    /// Rounds a millisecond value to the nearest nanosecond.
    pub fn from_ms(ms: f64) -> Self {
        Nanos((ms * 1e6).round() as i64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_ms())
    }
}

/// Link bandwidth in bytes per millisecond.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bandwidth(pub f64);

impl Bandwidth {
    pub fn from_gbps(gbps: f64) -> Self {
        Bandwidth(gbps * BYTES_PER_MS_PER_GBPS)
    }

    pub fn from_mbps(mbps: f64) -> Self {
        Bandwidth(mbps * BYTES_PER_MS_PER_MBPS)
    }

    pub fn bytes_per_ms(self) -> f64 {
        self.0
    }

    pub fn as_gbps(self) -> f64 {
        self.0 / BYTES_PER_MS_PER_GBPS
    }

    pub fn as_mbps(self) -> f64 {
        self.0 / BYTES_PER_MS_PER_MBPS
    }

    pub fn scale(self, factor: f64) -> Self {
        Bandwidth(self.0 * factor)
    }

    pub fn min(self, other: Bandwidth) -> Bandwidth {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conversions() {
        assert_eq!(Bandwidth::from_gbps(5.0).bytes_per_ms(), 625_000.0);
        assert_eq!(Bandwidth::from_mbps(293.0).bytes_per_ms(), 36_625.0);
        assert_eq!(Bandwidth::from_gbps(100.0).as_gbps(), 100.0);
    }

    #[test]
    fn nanos_round_trip() {
        assert_eq!(Nanos::from_ms(1.5), Nanos(1_500_000));
        assert_eq!(Nanos::from_ms(2788.5).as_ms(), 2788.5);
        assert_eq!(Nanos(3) - Nanos(1) + Nanos(2), Nanos(4));
    }
}
