//! Greedy list scheduler shared by all four policies.
//!
//! Work items are forwards `F(p, m, s)` and recompute+backward blocks
//! `RB(p, m, s)`; each stage runs both kinds in microbatch order. Items are
//! committed in non-decreasing start time through a lazy heap: a popped
//! candidate is re-evaluated and pushed back if its start moved. Every
//! quantity feeding a start time only grows as commits accumulate, so heap
//! keys stay lower bounds.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::SimError;
use crate::units::Nanos;

use super::{CellProblem, CellSchedule, CellTask, CellTransfer, Direction, Policy, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) enum Item {
    F,
    RB,
}

/// Disjoint half-open busy intervals sorted by start.
#[derive(Debug, Clone, Default)]
pub(crate) struct Reservations {
    iv: Vec<(Nanos, Nanos)>,
}

impl Reservations {
    /// Earliest `t >= t0` with `[t + offset, t + offset + len)` free.
    pub(crate) fn earliest(&self, t0: Nanos, offset: Nanos, len: Nanos) -> Nanos {
        if len.0 == 0 {
            return t0;
        }
        let mut x = t0 + offset;
        let from = self.iv.partition_point(|&(_, e)| e <= x);
        for &(s, e) in &self.iv[from..] {
            if s >= x + len {
                break;
            }
            x = x.max(e);
        }
        x - offset
    }

    pub(crate) fn insert(&mut self, s: Nanos, e: Nanos) {
        if e <= s {
            return;
        }
        let at = self.iv.partition_point(|&(a, _)| a < s);
        debug_assert!(at == 0 || self.iv[at - 1].1 <= s);
        debug_assert!(at == self.iv.len() || e <= self.iv[at].0);
        self.iv.insert(at, (s, e));
    }
}

/// `(start, priority rank, tie-break pair, stage, item)`.
type Key = (Nanos, u8, (u32, u32), u32, Item);

/// Equal-start candidates are taken by (pipeline, microbatch), except under
/// ATLAS where microbatch leads so pipelines sharing a link alternate.
pub(crate) fn tie(policy: Policy, p: u32, m: u32) -> (u32, u32) {
    if policy == Policy::Atlas {
        (m, p)
    } else {
        (p, m)
    }
}

pub(crate) fn untie(policy: Policy, t: (u32, u32)) -> (u32, u32) {
    tie(policy, t.0, t.1)
}

struct State<'a> {
    pr: &'a CellProblem,
    policy: Policy,
    caps: Vec<Option<u32>>,
    s_n: usize,
    m_n: usize,
    gpu_free: Vec<Nanos>,
    next: [Vec<u32>; 2],
    queued: [Vec<bool>; 2],
    f_end: Vec<Option<Nanos>>,
    b_end: Vec<Option<Nanos>>,
    act_arrival: Vec<Option<Nanos>>,
    grad_arrival: Vec<Option<Nanos>>,
    /// When the sender began the block producing that gradient.
    grad_known: Vec<Nanos>,
    link_free: Vec<[Nanos; 2]>,
    shared: Vec<[Reservations; 2]>,
    heap: BinaryHeap<Reverse<Key>>,
    out: CellSchedule,
}

fn slot(item: Item) -> usize {
    match item {
        Item::F => 0,
        Item::RB => 1,
    }
}

/// In-flight cap per stage implied by `policy`.
pub(crate) fn stage_caps(pr: &CellProblem, policy: Policy, mem_limit: Option<u32>) -> Result<Vec<Option<u32>>, SimError> {
    let n = pr.stages;
    Ok(match policy {
        Policy::GPipe => vec![None; n as usize],
        Policy::OneFOneB => (0..n).map(|s| Some(n - s)).collect(),
        Policy::Varuna | Policy::Atlas => {
            let cap = mem_limit.unwrap_or(n);
            if cap < 1 {
                return Err(SimError::InfeasibleMemLimit);
            }
            vec![Some(cap); n as usize]
        }
    })
}

impl<'a> State<'a> {
    fn ps(&self, p: u32, s: u32) -> usize {
        p as usize * self.s_n + s as usize
    }

    fn psm(&self, p: u32, s: u32, m: u32) -> usize {
        self.ps(p, s) * self.m_n + m as usize
    }

    fn rank(&self, item: Item) -> u8 {
        match (item, self.policy.backward_first()) {
            (Item::RB, true) | (Item::F, false) => 0,
            _ => 1,
        }
    }

    fn eval(&self, p: u32, s: u32, item: Item) -> Option<Nanos> {
        let m = self.next[slot(item)][self.ps(p, s)];
        if m as usize >= self.m_n {
            return None;
        }
        let pr = self.pr;
        let last = pr.stages - 1;
        let mut t = self.gpu_free[self.ps(p, s)];
        match item {
            Item::F => {
                if s > 0 {
                    t = t.max(self.act_arrival[self.psm(p, s, m)]?);
                }
                if let Some(cap) = self.caps[s as usize] {
                    if m >= cap {
                        t = t.max(self.b_end[self.psm(p, s, m - cap)]?);
                    }
                }
                if s < last && pr.links[s as usize].shared_under(self.policy) {
                    let wire = pr.links[s as usize].pooled_wire;
                    t = self.shared[s as usize][0].earliest(t, pr.fwd[s as usize], wire);
                }
            }
            Item::RB => {
                t = t.max(self.f_end[self.psm(p, s, m)]?);
                let r = pr.recompute[s as usize];
                if s == last {
                    if self.policy == Policy::GPipe {
                        t = t.max(self.f_end[self.psm(p, s, self.m_n as u32 - 1)]?);
                    }
                } else {
                    let arrival = self.grad_arrival[self.psm(p, s, m)]?;
                    let ready = if pr.recompute_early {
                        arrival.saturating_sub(r).max(self.grad_known[self.psm(p, s, m)])
                    } else {
                        arrival
                    };
                    t = t.max(ready);
                }
                if s > 0 && pr.links[s as usize - 1].shared_under(self.policy) {
                    let wire = pr.links[s as usize - 1].pooled_wire;
                    let offset = r + pr.bwd[s as usize];
                    t = self.shared[s as usize - 1][1].earliest(t, offset, wire);
                }
            }
        }
        Some(t)
    }

    fn refresh(&mut self, p: u32, s: u32, item: Item) {
        let k = self.ps(p, s);
        if self.queued[slot(item)][k] {
            return;
        }
        if let Some(t) = self.eval(p, s, item) {
            let m = self.next[slot(item)][k];
            self.queued[slot(item)][k] = true;
            self.heap.push(Reverse((t, self.rank(item), tie(self.policy, p, m), s, item)));
        }
    }

    fn send(&mut self, p: u32, m: u32, boundary: u32, dir: Direction, ready: Nanos) -> Nanos {
        let link = self.pr.links[boundary as usize];
        let shared = link.shared_under(self.policy);
        let wire = link.wire_under(self.policy);
        let d = match dir {
            Direction::ActivationFwd => 0,
            Direction::GradientBwd => 1,
        };
        let start = if shared {
            self.shared[boundary as usize][d].insert(ready, ready + wire);
            ready
        } else {
            let k = self.ps(p, boundary);
            let st = ready.max(self.link_free[k][d]);
            self.link_free[k][d] = st + wire;
            st
        };
        let end = start + wire + link.latency;
        self.out.transfers.push(CellTransfer {
            pipeline: p,
            microbatch: m,
            boundary,
            direction: dir,
            start,
            wire_end: start + wire,
            end,
            pooled_pipelines: if shared { self.pr.pipelines } else { 1 },
        });
        end
    }

    fn task(&mut self, p: u32, s: u32, m: u32, kind: TaskKind, start: Nanos, end: Nanos) {
        self.out.tasks.push(CellTask {
            pipeline: p,
            stage: s,
            microbatch: m,
            kind,
            start,
            end,
        });
    }

    fn commit(&mut self, p: u32, s: u32, m: u32, item: Item, start: Nanos) {
        let pr = self.pr;
        let last = pr.stages - 1;
        let k = self.ps(p, s);
        match item {
            Item::F => {
                let end = start + pr.fwd[s as usize];
                self.task(p, s, m, TaskKind::Forward, start, end);
                self.gpu_free[k] = end;
                let i = self.psm(p, s, m);
                self.f_end[i] = Some(end);
                self.next[0][k] += 1;
                if s < last {
                    let arrival = self.send(p, m, s, Direction::ActivationFwd, end);
                    let j = self.psm(p, s + 1, m);
                    self.act_arrival[j] = Some(arrival);
                    self.refresh(p, s + 1, Item::F);
                }
            }
            Item::RB => {
                let r = pr.recompute[s as usize];
                if r.0 > 0 {
                    self.task(p, s, m, TaskKind::Recompute, start, start + r);
                }
                let b0 = start + r;
                let end = b0 + pr.bwd[s as usize];
                self.task(p, s, m, TaskKind::Backward, b0, end);
                self.gpu_free[k] = end;
                let i = self.psm(p, s, m);
                self.b_end[i] = Some(end);
                self.next[1][k] += 1;
                if s > 0 {
                    let arrival = self.send(p, m, s - 1, Direction::GradientBwd, end);
                    let j = self.psm(p, s - 1, m);
                    self.grad_arrival[j] = Some(arrival);
                    self.grad_known[j] = start;
                    self.refresh(p, s - 1, Item::RB);
                }
            }
        }
        self.refresh(p, s, Item::F);
        self.refresh(p, s, Item::RB);
    }

    fn blocked(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in 0..self.pr.pipelines {
            for s in 0..self.pr.stages {
                let k = self.ps(p, s);
                for (item, name) in [(Item::F, "F"), (Item::RB, "RB")] {
                    let m = self.next[slot(item)][k];
                    if (m as usize) < self.m_n {
                        out.push(format!("{name}(p={p}, m={m}, s={s})"));
                    }
                }
            }
        }
        out.truncate(16);
        out
    }
}

/// Schedules one DP-cell under `policy`.
///
/// Varuna and ATLAS cap every stage at `mem_limit` in-flight microbatches,
/// defaulting to the stage count; 1F1B caps stage `s` at `stages - s` and
/// GPipe is uncapped.
pub fn schedule_cell(pr: &CellProblem, policy: Policy, mem_limit: Option<u32>) -> Result<CellSchedule, SimError> {
    pr.validate()?;
    let caps = stage_caps(pr, policy, mem_limit)?;
    let s_n = pr.stages as usize;
    let m_n = pr.microbatches as usize;
    let ps_n = pr.pipelines as usize * s_n;
    let psm_n = ps_n * m_n;
    let mut st = State {
        pr,
        policy,
        caps,
        s_n,
        m_n,
        gpu_free: vec![Nanos::ZERO; ps_n],
        next: [vec![0; ps_n], vec![0; ps_n]],
        queued: [vec![false; ps_n], vec![false; ps_n]],
        f_end: vec![None; psm_n],
        b_end: vec![None; psm_n],
        act_arrival: vec![None; psm_n],
        grad_arrival: vec![None; psm_n],
        grad_known: vec![Nanos::ZERO; psm_n],
        link_free: vec![[Nanos::ZERO; 2]; ps_n],
        shared: (0..s_n.saturating_sub(1)).map(|_| Default::default()).collect(),
        heap: BinaryHeap::new(),
        out: CellSchedule {
            tasks: Vec::with_capacity(psm_n * 3),
            transfers: Vec::with_capacity(psm_n * 2),
            makespan: Nanos::ZERO,
        },
    };
    let total = 2 * psm_n;
    let mut done = 0usize;
    for p in 0..pr.pipelines {
        st.refresh(p, 0, Item::F);
    }
    while let Some(Reverse((key, rank, pm, s, item))) = st.heap.pop() {
        let (p, m) = untie(policy, pm);
        let k = st.ps(p, s);
        st.queued[slot(item)][k] = false;
        if st.next[slot(item)][k] != m {
            st.refresh(p, s, item);
            continue;
        }
        match st.eval(p, s, item) {
            None => {}
            Some(t) if t > key => {
                st.queued[slot(item)][k] = true;
                st.heap.push(Reverse((t, rank, pm, s, item)));
            }
            Some(t) => {
                st.commit(p, s, m, item, t);
                done += 1;
            }
        }
    }
    if done < total {
        return Err(SimError::Deadlock {
            remaining: total - done,
            blocked: st.blocked(),
        });
    }
    let mut out = st.out;
    out.makespan = out
        .tasks
        .iter()
        .map(|t| t.end)
        .chain(out.transfers.iter().map(|t| t.end))
        .max()
        .unwrap_or(Nanos::ZERO);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::LinkSpec;

    fn ms(x: i64) -> Nanos {
        Nanos(x * 1_000_000)
    }

    fn zero_links(n: u32) -> Vec<LinkSpec> {
        (1..n).map(|_| LinkSpec::intra(Nanos::ZERO, Nanos::ZERO)).collect()
    }

    #[test]
    fn reservations_find_gaps() {
        let mut r = Reservations::default();
        r.insert(ms(2), ms(4));
        r.insert(ms(5), ms(6));
        assert_eq!(r.earliest(ms(0), ms(0), ms(2)), ms(0));
        assert_eq!(r.earliest(ms(1), ms(0), ms(2)), ms(6));
        assert_eq!(r.earliest(ms(1), ms(0), ms(1)), ms(1));
        assert_eq!(r.earliest(ms(3), ms(0), ms(1)), ms(4));
        assert_eq!(r.earliest(ms(0), ms(3), ms(1)), ms(1));
        assert_eq!(r.earliest(ms(3), ms(1), ms(5)), ms(5));
    }

    #[test]
    fn single_stage_single_microbatch() {
        for policy in Policy::ALL {
            let pr = CellProblem::uniform(1, 1, 1, ms(1), ms(2), Some(ms(1)), vec![]);
            let out = schedule_cell(&pr, policy, None).unwrap();
            assert_eq!(out.makespan, ms(3), "{policy}");
        }
    }

    #[test]
    fn two_stage_gpipe_needs_nine_units() {
        let pr = CellProblem::uniform(1, 2, 2, ms(1), ms(2), None, zero_links(2));
        let out = schedule_cell(&pr, Policy::GPipe, None).unwrap();
        assert_eq!(out.makespan, ms(9));
    }

    #[test]
    fn onef1b_caps_stage_zero() {
        let pr = CellProblem::uniform(1, 2, 4, ms(1), ms(2), None, zero_links(2));
        let peak = |policy| {
            let out = schedule_cell(&pr, policy, None).unwrap();
            let mut ev: Vec<(Nanos, i32)> = Vec::new();
            for t in out.tasks.iter().filter(|t| t.stage == 0) {
                match t.kind {
                    TaskKind::Forward => ev.push((t.start, 1)),
                    TaskKind::Backward => ev.push((t.end, -1)),
                    _ => {}
                }
            }
            ev.sort_by_key(|&(t, d)| (t, d));
            let mut cur = 0;
            let mut best = 0;
            for (_, d) in ev {
                cur += d;
                best = best.max(cur);
            }
            best
        };
        assert_eq!(peak(Policy::OneFOneB), 2);
        assert_eq!(peak(Policy::GPipe), 4);
    }

    #[test]
    fn atlas_rejects_zero_mem_limit() {
        let pr = CellProblem::uniform(1, 2, 2, ms(1), ms(2), None, zero_links(2));
        assert_eq!(schedule_cell(&pr, Policy::Atlas, Some(0)), Err(SimError::InfeasibleMemLimit));
    }

    #[test]
    fn pooled_transfers_never_overlap() {
        let links = vec![LinkSpec::wan(Nanos::ZERO, ms(2), ms(1))];
        let pr = CellProblem::uniform(2, 2, 4, ms(1), ms(2), Some(ms(1)), links);
        let out = schedule_cell(&pr, Policy::Atlas, None).unwrap();
        for dir in [Direction::ActivationFwd, Direction::GradientBwd] {
            let mut iv: Vec<_> = out
                .transfers
                .iter()
                .filter(|t| t.direction == dir)
                .map(|t| (t.start, t.wire_end))
                .collect();
            iv.sort();
            assert!(iv.windows(2).all(|w| w[0].1 <= w[1].0), "{iv:?}");
        }
    }
}
