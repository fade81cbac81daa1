//! Random cell problems shared by the property and acceptance suites.

use geotrain::schedule::{CellProblem, LinkSpec};
use geotrain::units::Nanos;
use proptest::prelude::*;

fn ms(x: i64) -> Nanos {
    Nanos(x * 1_000_000)
}

/// Random cells with equal pair caps for every policy, so a pooled WAN
/// transfer is exactly `pipelines` times faster than a spatial one.
pub fn instance() -> impl Strategy<Value = CellProblem> {
    (1u32..=3, 1u32..=5, 1u32..=6, any::<bool>()).prop_flat_map(|(p, s, m, recompute)| {
        let n = s as usize;
        let link = (any::<bool>(), 0i64..=3, 1i64..=3, 0i64..=1).prop_map(move |(wan, lat, wire, local)| {
            if wan {
                LinkSpec::wan(ms(lat), ms(wire * p as i64), ms(wire))
            } else {
                LinkSpec::intra(ms(local), ms(local))
            }
        });
        (
            prop::collection::vec(1i64..=4, n),
            prop::collection::vec(1i64..=6, n),
            prop::collection::vec(link, n - 1),
        )
            .prop_map(move |(fwd, bwd, links)| {
                let last = fwd.len() - 1;
                CellProblem {
                    pipelines: p,
                    stages: s,
                    microbatches: m,
                    recompute: fwd
                        .iter()
                        .enumerate()
                        .map(|(i, &f)| if recompute && i < last { ms(f) } else { Nanos::ZERO })
                        .collect(),
                    fwd: fwd.into_iter().map(ms).collect(),
                    bwd: bwd.into_iter().map(ms).collect(),
                    links,
                    bytes: 1 << 20,
                    recompute_early: true,
                }
            })
    })
}
