//! Exhaustive search over rule-respecting schedules of small unit-duration
//! cells, compared with the greedy ATLAS generator.
//!
//! The oracle is written from the rules alone: every topological order of
//! the item DAG is tried, each item placed at its earliest feasible start.
//! Items are forwards `F` and recompute+backward blocks `RB`; per GPU both
//! kinds run in microbatch order; a forward into the shared WAN may only
//! start if its transfer can leave the moment it ends. Backward priority is
//! checked on complete schedules: no forward may start while the same
//! GPU's next backward block could.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use geotrain::schedule::{schedule_cell, CellProblem, LinkSpec, Policy};
use geotrain::units::Nanos;

#[derive(Clone, Copy, Debug)]
pub enum Link {
    Local,
    Wan { latency: i64 },
}

#[derive(Clone, Debug)]
pub struct Inst {
    pub p: usize,
    pub s: usize,
    pub m: usize,
    /// Recompute on every stage but the last.
    pub recompute: bool,
    pub links: Vec<Link>,
}

impl Inst {
    fn rec(&self, s: usize) -> i64 {
        i64::from(self.recompute && s + 1 < self.s)
    }

    pub fn problem(&self) -> CellProblem {
        let unit = Nanos::from_ms(1.0);
        let links = self
            .links
            .iter()
            .map(|l| match *l {
                Link::Local => LinkSpec::intra(Nanos::ZERO, Nanos::ZERO),
                Link::Wan { latency } => {
                    LinkSpec::wan(Nanos::from_ms(latency as f64), Nanos::from_ms(self.p as f64), unit)
                }
            })
            .collect();
        CellProblem::uniform(
            self.p as u32,
            self.s as u32,
            self.m as u32,
            unit,
            unit,
            self.recompute.then_some(unit),
            links,
        )
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    gpu_free: Vec<i64>,
    next_f: Vec<usize>,
    next_b: Vec<usize>,
    f_end: Vec<Option<i64>>,
    b_end: Vec<Option<i64>>,
    act: Vec<Option<i64>>,
    grad: Vec<Option<i64>>,
    /// Busy wire intervals per (boundary, direction).
    wan: Vec<Vec<(i64, i64)>>,
    end: i64,
}

struct Search<'a> {
    inst: &'a Inst,
    best: i64,
    /// Fingerprints of explored states.
    seen: HashSet<u64>,
}

impl Search<'_> {
    fn gs(&self, p: usize, s: usize) -> usize {
        p * self.inst.s + s
    }

    fn gsm(&self, p: usize, s: usize, m: usize) -> usize {
        self.gs(p, s) * self.inst.m + m
    }

    fn free_at(iv: &[(i64, i64)], mut t: i64, offset: i64, len: i64) -> i64 {
        loop {
            let a = t + offset;
            match iv.iter().find(|&&(s, e)| s < a + len && a < e) {
                Some(&(_, e)) => t = e - offset,
                None => return t,
            }
        }
    }

    /// Wire plus latency of boundary `b` at the pooled rate.
    fn hop(&self, b: usize) -> i64 {
        match self.inst.links[b] {
            Link::Local => 0,
            Link::Wan { latency } => 1 + latency,
        }
    }

    /// Longest path through the unplaced items with resource conflicts
    /// only counted per GPU, plus per-GPU remaining work.
    fn lower_bound(&self, st: &State) -> i64 {
        let inst = self.inst;
        let (last, mm) = (inst.s - 1, inst.m);
        let mut lb = st.end;
        for p in 0..inst.p {
            // Earliest forward ends, stage by stage.
            let mut f_end = vec![vec![0i64; mm]; inst.s];
            for s in 0..inst.s {
                let g = self.gs(p, s);
                let mut free = st.gpu_free[g];
                for m in 0..mm {
                    f_end[s][m] = match st.f_end[self.gsm(p, s, m)] {
                        Some(e) => e,
                        None => {
                            let mut t = free;
                            if s > 0 {
                                t = t.max(st.act[self.gsm(p, s, m)].unwrap_or(f_end[s - 1][m] + self.hop(s - 1)));
                            }
                            free = t + 1;
                            t + 1
                        }
                    };
                }
            }
            let mut b_end = vec![vec![0i64; mm]; inst.s];
            for s in (0..inst.s).rev() {
                let g = self.gs(p, s);
                let r = inst.rec(s);
                let mut free = st.gpu_free[g];
                for m in 0..mm {
                    b_end[s][m] = match st.b_end[self.gsm(p, s, m)] {
                        Some(e) => e,
                        None => {
                            let mut t = free.max(f_end[s][m]);
                            if s < last {
                                let arr = st.grad[self.gsm(p, s, m)].unwrap_or(b_end[s + 1][m] + self.hop(s));
                                t = t.max(arr - r);
                            }
                            free = t + r + 1;
                            t + r + 1
                        }
                    };
                    lb = lb.max(b_end[s][m]);
                }
            }
            for s in 0..inst.s {
                let g = self.gs(p, s);
                let work = (mm - st.next_f[g]) as i64 + (mm - st.next_b[g]) as i64 * (1 + inst.rec(s));
                let tail: i64 = (0..s).map(|k| self.hop(k) + 1).sum();
                let tail = if st.next_b[g] < mm { tail } else { 0 };
                lb = lb.max(st.gpu_free[g] + work + tail);
            }
        }
        lb
    }

    /// No forward starts while the GPU's next backward block could start.
    fn backward_first(&self, st: &State) -> bool {
        let inst = self.inst;
        for p in 0..inst.p {
            for s in 0..inst.s {
                let r = inst.rec(s);
                let b_start: Vec<i64> = (0..inst.m).map(|m| st.b_end[self.gsm(p, s, m)].unwrap() - r - 1).collect();
                for m in 0..inst.m {
                    let t = st.f_end[self.gsm(p, s, m)].unwrap() - 1;
                    let k = b_start.iter().filter(|&&b| b < t).count();
                    if k == inst.m {
                        continue;
                    }
                    let mut ready = st.f_end[self.gsm(p, s, k)].unwrap();
                    if s + 1 < inst.s {
                        ready = ready.max(st.grad[self.gsm(p, s, k)].unwrap() - r);
                    }
                    if ready <= t {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn dfs(&mut self, st: State, left: usize) {
        if left == 0 {
            if self.backward_first(&st) {
                self.best = self.best.min(st.end);
            }
            return;
        }
        if self.lower_bound(&st) >= self.best {
            return;
        }
        let mut h = DefaultHasher::new();
        st.hash(&mut h);
        if !self.seen.insert(h.finish()) {
            return;
        }
        let inst = self.inst;
        let last = inst.s - 1;
        let cap = inst.s;
        for p in 0..inst.p {
            for s in 0..inst.s {
                let g = self.gs(p, s);
                let m = st.next_f[g];
                if m < inst.m {
                    let mut t = st.gpu_free[g];
                    let mut ok = true;
                    if s > 0 {
                        match st.act[self.gsm(p, s, m)] {
                            Some(a) => t = t.max(a),
                            None => ok = false,
                        }
                    }
                    if m >= cap {
                        match st.b_end[self.gsm(p, s, m - cap)] {
                            Some(b) => t = t.max(b),
                            None => ok = false,
                        }
                    }
                    if ok {
                        let mut n = st.clone();
                        if s < last {
                            if let Link::Wan { latency } = inst.links[s] {
                                t = Self::free_at(&n.wan[2 * s], t, 1, 1);
                                n.wan[2 * s].push((t + 1, t + 2));
                                n.wan[2 * s].sort_unstable();
                                n.act[self.gsm(p, s + 1, m)] = Some(t + 2 + latency);
                                n.end = n.end.max(t + 2 + latency);
                            } else {
                                n.act[self.gsm(p, s + 1, m)] = Some(t + 1);
                            }
                        }
                        n.gpu_free[g] = t + 1;
                        n.f_end[self.gsm(p, s, m)] = Some(t + 1);
                        n.next_f[g] += 1;
                        n.end = n.end.max(t + 1);
                        self.dfs(n, left - 1);
                    }
                }
                let m = st.next_b[g];
                if m < inst.m {
                    let r = inst.rec(s);
                    let mut t = st.gpu_free[g];
                    let mut ok = true;
                    match st.f_end[self.gsm(p, s, m)] {
                        Some(f) => t = t.max(f),
                        None => ok = false,
                    }
                    if s < last {
                        match st.grad[self.gsm(p, s, m)] {
                            Some(a) => t = t.max(a - r),
                            None => ok = false,
                        }
                    }
                    if ok {
                        let mut n = st.clone();
                        if s > 0 {
                            if let Link::Wan { latency } = inst.links[s - 1] {
                                t = Self::free_at(&n.wan[2 * (s - 1) + 1], t, r + 1, 1);
                                n.wan[2 * (s - 1) + 1].push((t + r + 1, t + r + 2));
                                n.wan[2 * (s - 1) + 1].sort_unstable();
                                n.grad[self.gsm(p, s - 1, m)] = Some(t + r + 2 + latency);
                                n.end = n.end.max(t + r + 2 + latency);
                            } else {
                                n.grad[self.gsm(p, s - 1, m)] = Some(t + r + 1);
                            }
                        }
                        n.gpu_free[g] = t + r + 1;
                        n.b_end[self.gsm(p, s, m)] = Some(t + r + 1);
                        n.next_b[g] += 1;
                        n.end = n.end.max(t + r + 1);
                        self.dfs(n, left - 1);
                    }
                }
            }
        }
    }
}

/// Best makespan strictly below `upper`, or `upper` if none exists.
pub fn optimum(inst: &Inst, upper: i64) -> i64 {
    let g = inst.p * inst.s;
    let st = State {
        gpu_free: vec![0; g],
        next_f: vec![0; g],
        next_b: vec![0; g],
        f_end: vec![None; g * inst.m],
        b_end: vec![None; g * inst.m],
        act: vec![None; g * inst.m],
        grad: vec![None; g * inst.m],
        wan: vec![Vec::new(); 2 * inst.s],
        end: 0,
    };
    let mut search = Search {
        inst,
        best: upper,
        seen: HashSet::new(),
    };
    search.dfs(st, 2 * g * inst.m);
    search.best
}

pub fn all_instances() -> Vec<Inst> {
    let kinds = [Link::Local, Link::Wan { latency: 0 }, Link::Wan { latency: 1 }];
    let mut out = Vec::new();
    for p in 1..=2 {
        for s in 1..=3usize {
            for m in 1..=3 {
                for recompute in [false, true] {
                    let combos = kinds.len().pow(s as u32 - 1);
                    for mut code in 0..combos {
                        let links = (0..s - 1)
                            .map(|_| {
                                let k = kinds[code % kinds.len()];
                                code /= kinds.len();
                                k
                            })
                            .collect();
                        out.push(Inst {
                            p,
                            s,
                            m,
                            recompute,
                            links,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Instances where greedy ATLAS is beaten, as `(instance, greedy, optimum)`.
pub fn atlas_gaps() -> (usize, Vec<(Inst, i64, i64)>) {
    let insts = all_instances();
    let mut worse = Vec::new();
    for inst in &insts {
        let greedy = schedule_cell(&inst.problem(), Policy::Atlas, None).unwrap().makespan;
        let greedy = greedy.as_ms().round() as i64;
        let best = optimum(inst, greedy);
        if best < greedy {
            worse.push((inst.clone(), greedy, best));
        }
    }
    (insts.len(), worse)
}
