//! Discrete-event executor.
//!
//! Online policies (GPipe, 1F1B, Varuna) are executed greedily: whenever a
//! GPU is idle it starts the ready item its policy prefers. ATLAS is
//! executed by replaying its precomputed plan; an item starts at the later
//! of its planned start and its realized dependencies.
//!
//! A transfer's link slot is claimed when its producer starts, since
//! durations are deterministic; the payload is delivered by a
//! `TransferDone` event and the link released by `ResourceFree`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::error::SimError;
use crate::schedule::{
    assemble, plan_gpu_of, schedule_cell, stage_caps, tie, untie, CellProblem, CellSchedule, CellTask, CellTransfer, Direction,
    Item, Policy, ProblemOptions, Reservations, TaskKind, Timeline,
};
use crate::topology::ClusterTopology;
use crate::units::Nanos;
use crate::workload::{ModelSpec, ParallelismPlan, PhaseDurations};

/// Same-time events run in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    TaskDone,
    TransferDone,
    ResourceFree,
    TaskReady,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Payload {
    Forward,
    /// Recompute followed by backward.
    Backward,
    Transfer(Direction),
    /// The link on the stage's outgoing boundary in this direction.
    Link(Direction),
}

/// Field order is the processing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub time: Nanos,
    pub kind: EventKind,
    pub cell: u32,
    pub pipeline: u32,
    pub microbatch: u32,
    pub stage: u32,
    pub payload: Payload,
}

fn payload_of(item: Item) -> Payload {
    match item {
        Item::F => Payload::Forward,
        Item::RB => Payload::Backward,
    }
}

fn slot(item: Item) -> usize {
    match item {
        Item::F => 0,
        Item::RB => 1,
    }
}

/// `(rank, tie-break pair, stage, cell, item)`.
type Offer = (u8, (u32, u32), u32, u32, Item);

/// Transfer link identity; `owner` is `None` when the cell shares it.
type LinkKey = (u32, u32, Direction, Option<u32>);

struct Replay {
    /// Per GPU: planned items in planned order.
    queue: Vec<Vec<(Nanos, Item, u32)>>,
    head: Vec<usize>,
    transfer_at: HashMap<(u32, u32, u32, Direction), Nanos>,
}

struct Exec<'a> {
    pr: &'a CellProblem,
    policy: Policy,
    caps: Vec<Option<u32>>,
    cells: u32,
    s_n: usize,
    m_n: usize,
    now: Nanos,
    events: BinaryHeap<Reverse<Event>>,
    busy: Vec<bool>,
    next: [Vec<u32>; 2],
    f_end: Vec<Option<Nanos>>,
    b_end: Vec<Option<Nanos>>,
    act_arrival: Vec<Option<Nanos>>,
    /// Known once the sender starts its block.
    grad_arrival: Vec<Option<Nanos>>,
    grad_known: Vec<Nanos>,
    link_free: HashMap<LinkKey, Nanos>,
    shared: HashMap<LinkKey, Reservations>,
    replay: Option<Replay>,
    out: Vec<CellSchedule>,
    done: usize,
}

impl<'a> Exec<'a> {
    fn new(pr: &'a CellProblem, policy: Policy, mem_limit: Option<u32>, cells: u32) -> Result<Self, SimError> {
        let caps = stage_caps(pr, policy, mem_limit)?;
        let s_n = pr.stages as usize;
        let m_n = pr.microbatches as usize;
        let g_n = cells as usize * pr.pipelines as usize * s_n;
        Ok(Exec {
            pr,
            policy,
            caps,
            cells,
            s_n,
            m_n,
            now: Nanos::ZERO,
            events: BinaryHeap::new(),
            busy: vec![false; g_n],
            next: [vec![0; g_n], vec![0; g_n]],
            f_end: vec![None; g_n * m_n],
            b_end: vec![None; g_n * m_n],
            act_arrival: vec![None; g_n * m_n],
            grad_arrival: vec![None; g_n * m_n],
            grad_known: vec![Nanos::ZERO; g_n * m_n],
            link_free: HashMap::new(),
            shared: HashMap::new(),
            replay: None,
            out: (0..cells)
                .map(|_| CellSchedule {
                    tasks: Vec::new(),
                    transfers: Vec::new(),
                    makespan: Nanos::ZERO,
                })
                .collect(),
            done: 0,
        })
    }

    fn g(&self, c: u32, p: u32, s: u32) -> usize {
        (c as usize * self.pr.pipelines as usize + p as usize) * self.s_n + s as usize
    }

    fn gm(&self, c: u32, p: u32, s: u32, m: u32) -> usize {
        self.g(c, p, s) * self.m_n + m as usize
    }

    fn push(&mut self, time: Nanos, kind: EventKind, c: u32, p: u32, m: u32, s: u32, payload: Payload) {
        self.events.push(Reverse(Event {
            time,
            kind,
            cell: c,
            pipeline: p,
            microbatch: m,
            stage: s,
            payload,
        }));
    }

    /// Earliest start of `item` for microbatch `m` given what is known now,
    /// or `None` while a dependency is unresolved.
    fn ready_at(&self, c: u32, p: u32, s: u32, m: u32, item: Item) -> Option<Nanos> {
        let pr = self.pr;
        let last = pr.stages - 1;
        let mut t = Nanos::ZERO;
        match item {
            Item::F => {
                if s > 0 {
                    t = t.max(self.act_arrival[self.gm(c, p, s, m)]?);
                }
                if self.replay.is_none() {
                    if let Some(cap) = self.caps[s as usize] {
                        if m >= cap {
                            t = t.max(self.b_end[self.gm(c, p, s, m - cap)]?);
                        }
                    }
                }
            }
            Item::RB => {
                t = t.max(self.f_end[self.gm(c, p, s, m)]?);
                if s == last {
                    if self.policy == Policy::GPipe {
                        t = t.max(self.f_end[self.gm(c, p, s, self.m_n as u32 - 1)]?);
                    }
                } else {
                    let i = self.gm(c, p, s, m);
                    let arrival = self.grad_arrival[i]?;
                    let r = pr.recompute[s as usize];
                    t = t.max(if pr.recompute_early {
                        arrival.saturating_sub(r).max(self.grad_known[i])
                    } else {
                        arrival
                    });
                }
            }
        }
        Some(t)
    }

    /// Items GPU `(c, p, s)` could start now.
    fn candidates(&self, c: u32, p: u32, s: u32) -> Vec<(Item, u32)> {
        let g = self.g(c, p, s);
        if self.busy[g] {
            return Vec::new();
        }
        if let Some(rp) = &self.replay {
            let Some(&(planned, item, m)) = rp.queue[g].get(rp.head[g]) else {
                return Vec::new();
            };
            return match self.ready_at(c, p, s, m, item) {
                Some(t) if planned <= self.now && t <= self.now => vec![(item, m)],
                _ => Vec::new(),
            };
        }
        [Item::F, Item::RB]
            .into_iter()
            .filter_map(|item| {
                let m = self.next[slot(item)][g];
                if m as usize >= self.m_n {
                    return None;
                }
                let t = self.ready_at(c, p, s, m, item)?;
                (t <= self.now).then_some((item, m))
            })
            .collect()
    }

    fn rank(&self, item: Item) -> u8 {
        u8::from((item == Item::RB) != self.policy.backward_first())
    }

    fn offer(&self, heap: &mut BinaryHeap<Reverse<Offer>>, c: u32, p: u32, s: u32) {
        for (item, m) in self.candidates(c, p, s) {
            heap.push(Reverse((self.rank(item), tie(self.policy, p, m), s, c, item)));
        }
    }

    /// Claims the link for the output of a producer ending at `ready`.
    fn send(&mut self, c: u32, p: u32, m: u32, boundary: u32, dir: Direction, ready: Nanos) -> Nanos {
        let link = self.pr.links[boundary as usize];
        let shared = link.shared_under(self.policy);
        let wire = link.wire_under(self.policy);
        let not_before = match &self.replay {
            Some(rp) => rp.transfer_at.get(&(p, m, boundary, dir)).copied().unwrap_or(ready).max(ready),
            None => ready,
        };
        let start = if shared {
            let res = self.shared.entry((c, boundary, dir, None)).or_default();
            let st = res.earliest(not_before, Nanos::ZERO, wire);
            res.insert(st, st + wire);
            st
        } else {
            let free = self.link_free.entry((c, boundary, dir, Some(p))).or_insert(Nanos::ZERO);
            let st = not_before.max(*free);
            *free = st + wire;
            st
        };
        let end = start + wire + link.latency;
        self.out[c as usize].transfers.push(CellTransfer {
            pipeline: p,
            microbatch: m,
            boundary,
            direction: dir,
            start,
            wire_end: start + wire,
            end,
            pooled_pipelines: if shared { self.pr.pipelines } else { 1 },
        });
        let from = match dir {
            Direction::ActivationFwd => boundary,
            Direction::GradientBwd => boundary + 1,
        };
        self.push(start + wire, EventKind::ResourceFree, c, p, m, from, Payload::Link(dir));
        self.push(end, EventKind::TransferDone, c, p, m, from, Payload::Transfer(dir));
        end
    }

    fn task(&mut self, c: u32, p: u32, s: u32, m: u32, kind: TaskKind, start: Nanos, end: Nanos) {
        self.out[c as usize].tasks.push(CellTask {
            pipeline: p,
            stage: s,
            microbatch: m,
            kind,
            start,
            end,
        });
    }

    fn start(&mut self, c: u32, p: u32, s: u32, m: u32, item: Item) {
        let pr = self.pr;
        let g = self.g(c, p, s);
        let now = self.now;
        self.busy[g] = true;
        self.next[slot(item)][g] += 1;
        if let Some(rp) = &mut self.replay {
            rp.head[g] += 1;
        }
        let end = match item {
            Item::F => {
                let end = now + pr.fwd[s as usize];
                self.task(c, p, s, m, TaskKind::Forward, now, end);
                if s + 1 < pr.stages {
                    self.send(c, p, m, s, Direction::ActivationFwd, end);
                }
                end
            }
            Item::RB => {
                let r = pr.recompute[s as usize];
                if r.0 > 0 {
                    self.task(c, p, s, m, TaskKind::Recompute, now, now + r);
                }
                let end = now + r + pr.bwd[s as usize];
                self.task(c, p, s, m, TaskKind::Backward, now + r, end);
                if s > 0 {
                    let arrival = self.send(c, p, m, s - 1, Direction::GradientBwd, end);
                    let j = self.gm(c, p, s - 1, m);
                    self.grad_arrival[j] = Some(arrival);
                    self.grad_known[j] = now;
                    // Early recompute downstream may become ready before delivery.
                    if let Some(t) = self.ready_at(c, p, s - 1, m, Item::RB) {
                        if t > now {
                            self.push(t, EventKind::TaskReady, c, p, m, s - 1, Payload::Backward);
                        }
                    }
                }
                end
            }
        };
        self.push(end, EventKind::TaskDone, c, p, m, s, payload_of(item));
    }

    fn handle(&mut self, ev: Event) {
        let (c, p, m, s) = (ev.cell, ev.pipeline, ev.microbatch, ev.stage);
        match (ev.kind, ev.payload) {
            (EventKind::TaskDone, pl) => {
                let g = self.g(c, p, s);
                self.busy[g] = false;
                self.done += 1;
                let i = self.gm(c, p, s, m);
                match pl {
                    Payload::Forward => self.f_end[i] = Some(ev.time),
                    _ => self.b_end[i] = Some(ev.time),
                }
            }
            (EventKind::TransferDone, Payload::Transfer(Direction::ActivationFwd)) => {
                let i = self.gm(c, p, s + 1, m);
                self.act_arrival[i] = Some(ev.time);
            }
            (EventKind::TransferDone, Payload::Transfer(Direction::GradientBwd)) => {
                debug_assert_eq!(self.grad_arrival[self.gm(c, p, s - 1, m)], Some(ev.time));
            }
            // Slots were claimed in advance; release and readiness only
            // trigger a dispatch pass.
            _ => {}
        }
    }

    /// Starts everything startable now, in the list scheduler's priority
    /// order. Starting a backward block can make the stage below ready at
    /// this same instant, so that GPU is offered again.
    fn dispatch(&mut self) {
        let mut heap = BinaryHeap::new();
        for c in 0..self.cells {
            for p in 0..self.pr.pipelines {
                for s in 0..self.pr.stages {
                    self.offer(&mut heap, c, p, s);
                }
            }
        }
        while let Some(Reverse((_, pm, s, c, item))) = heap.pop() {
            let (p, m) = untie(self.policy, pm);
            let g = self.g(c, p, s);
            if self.busy[g] {
                continue;
            }
            self.start(c, p, s, m, item);
            if item == Item::RB && s > 0 {
                self.offer(&mut heap, c, p, s - 1);
            }
        }
    }

    fn blocked(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in 0..self.cells {
            for p in 0..self.pr.pipelines {
                for s in 0..self.pr.stages {
                    let g = self.g(c, p, s);
                    let pending: Vec<(Item, u32)> = match &self.replay {
                        Some(rp) => rp.queue[g].get(rp.head[g]).map(|&(_, i, m)| (i, m)).into_iter().collect(),
                        None => [Item::F, Item::RB]
                            .into_iter()
                            .map(|i| (i, self.next[slot(i)][g]))
                            .filter(|&(_, m)| (m as usize) < self.m_n)
                            .collect(),
                    };
                    for (item, m) in pending {
                        out.push(format!("{} c{c} p{p} m{m} s{s} waits on {}", item_name(item), self.waits_on(c, p, s, m, item)));
                    }
                }
            }
        }
        out.truncate(16);
        out
    }

    fn waits_on(&self, c: u32, p: u32, s: u32, m: u32, item: Item) -> String {
        let last = self.pr.stages - 1;
        match item {
            Item::F if s > 0 && self.act_arrival[self.gm(c, p, s, m)].is_none() => format!("F m{m} s{}", s - 1),
            Item::F => match self.caps[s as usize] {
                Some(cap) if m >= cap && self.replay.is_none() => format!("B m{} s{s}", m - cap),
                _ => "its planned slot".to_string(),
            },
            Item::RB if self.f_end[self.gm(c, p, s, m)].is_none() => format!("F m{m} s{s}"),
            Item::RB if s < last => format!("B m{m} s{}", s + 1),
            Item::RB => format!("F m{} s{s}", self.m_n - 1),
        }
    }

    fn run(mut self) -> Result<Vec<CellSchedule>, SimError> {
        let total = 2 * self.busy.len() * self.m_n;
        loop {
            self.dispatch();
            let Some(Reverse(first)) = self.events.pop() else { break };
            self.now = first.time;
            self.handle(first);
            while let Some(Reverse(ev)) = self.events.peek().copied() {
                if ev.time != self.now {
                    break;
                }
                self.events.pop();
                self.handle(ev);
            }
        }
        if self.done < total {
            return Err(SimError::Deadlock {
                remaining: total - self.done,
                blocked: self.blocked(),
            });
        }
        for cell in &mut self.out {
            cell.makespan = cell
                .tasks
                .iter()
                .map(|t| t.end)
                .chain(cell.transfers.iter().map(|t| t.end))
                .max()
                .unwrap_or(Nanos::ZERO);
        }
        Ok(self.out)
    }
}

fn item_name(item: Item) -> &'static str {
    match item {
        Item::F => "F",
        Item::RB => "RB",
    }
}

/// Executes `cells` identical cells of `pr`; one schedule per cell.
pub fn execute(
    pr: &CellProblem,
    policy: Policy,
    mem_limit: Option<u32>,
    cells: u32,
) -> Result<Vec<CellSchedule>, SimError> {
    pr.validate()?;
    if policy == Policy::Atlas {
        let plan = schedule_cell(pr, policy, mem_limit)?;
        return replay(pr, policy, &plan, cells);
    }
    Exec::new(pr, policy, mem_limit, cells)?.run()
}

/// Executes a precomputed cell plan in every cell. Items missing from the
/// plan never become ready and surface as a deadlock.
pub fn replay(pr: &CellProblem, policy: Policy, plan: &CellSchedule, cells: u32) -> Result<Vec<CellSchedule>, SimError> {
    pr.validate()?;
    let mut ex = Exec::new(pr, policy, None, cells)?;
    let per_cell = pr.pipelines as usize * ex.s_n;
    let mut queue: Vec<Vec<(Nanos, Item, u32)>> = vec![Vec::new(); per_cell];
    for t in &plan.tasks {
        let g = t.pipeline as usize * ex.s_n + t.stage as usize;
        match t.kind {
            TaskKind::Forward => queue[g].push((t.start, Item::F, t.microbatch)),
            TaskKind::Recompute => queue[g].push((t.start, Item::RB, t.microbatch)),
            TaskKind::Backward if pr.recompute[t.stage as usize].0 == 0 => {
                queue[g].push((t.start, Item::RB, t.microbatch))
            }
            _ => {}
        }
    }
    for q in &mut queue {
        q.sort();
    }
    let transfer_at = plan
        .transfers
        .iter()
        .map(|x| ((x.pipeline, x.microbatch, x.boundary, x.direction), x.start))
        .collect();
    for c in 0..cells {
        for (k, q) in queue.iter().enumerate() {
            let (p, s) = ((k / ex.s_n) as u32, (k % ex.s_n) as u32);
            for &(t, item, m) in q {
                ex.push(t, EventKind::TaskReady, c, p, m, s, payload_of(item));
            }
        }
    }
    let queue: Vec<_> = (0..cells).flat_map(|_| queue.iter().cloned()).collect();
    ex.replay = Some(Replay {
        head: vec![0; queue.len()],
        queue,
        transfer_at,
    });
    ex.run()
}

/// Executes one iteration of `plan` under `opts.policy`.
pub fn run(
    plan: &ParallelismPlan,
    model: &ModelSpec,
    topo: &ClusterTopology,
    durations: PhaseDurations,
    opts: &ProblemOptions,
) -> Result<Timeline, SimError> {
    let problem = CellProblem::from_plan(plan, model, topo, durations, opts)?;
    let cells = execute(&problem, opts.policy, opts.mem_limit, plan.num_cells() as u32)?;
    let refs: Vec<&CellSchedule> = cells.iter().collect();
    Ok(assemble(opts.policy, &refs, problem.bytes, plan.gpu_ids(), plan_gpu_of(plan)))
}

/// Runs a cell problem as a single-cell timeline with GPU id
/// `pipeline * stages + stage`.
pub fn run_problem(pr: &CellProblem, policy: Policy, mem_limit: Option<u32>) -> Result<Timeline, SimError> {
    let cells = execute(pr, policy, mem_limit, 1)?;
    Ok(problem_timeline(pr, policy, &cells[0]))
}

/// Single-cell timeline of `sched` with the GPU numbering of [`run_problem`].
pub fn problem_timeline(pr: &CellProblem, policy: Policy, sched: &CellSchedule) -> Timeline {
    let s_n = pr.stages;
    let gpus = (0..pr.pipelines * s_n).collect();
    assemble(policy, &[sched], pr.bytes, gpus, |_, p, s| p * s_n + s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{validate_timeline, LinkSpec};

    fn ms(x: i64) -> Nanos {
        Nanos(x * 1_000_000)
    }

    fn wan_problem() -> CellProblem {
        let links = vec![
            LinkSpec::intra(Nanos::ZERO, Nanos::ZERO),
            LinkSpec::wan(ms(1), ms(2), ms(1)),
            LinkSpec::intra(Nanos::ZERO, Nanos::ZERO),
        ];
        CellProblem::uniform(2, 4, 4, ms(1), ms(2), Some(ms(1)), links)
    }

    #[test]
    fn engine_matches_list_scheduler() {
        let pr = wan_problem();
        for policy in Policy::ALL {
            let planned = schedule_cell(&pr, policy, None).unwrap();
            let ran = run_problem(&pr, policy, None).unwrap();
            assert_eq!(ran, problem_timeline(&pr, policy, &planned), "{policy}");
            assert!(validate_timeline(&ran, &pr, None).is_empty(), "{policy}");
        }
    }

    #[test]
    fn zero_comm_single_pipeline_is_critical_path() {
        let pr = CellProblem::uniform(1, 3, 1, ms(1), ms(2), None, vec![LinkSpec::intra(Nanos::ZERO, Nanos::ZERO); 2]);
        for policy in Policy::ALL {
            assert_eq!(run_problem(&pr, policy, None).unwrap().makespan, ms(9));
        }
    }

    #[test]
    fn cells_run_independently() {
        let pr = wan_problem();
        let out = execute(&pr, Policy::Varuna, None, 3).unwrap();
        assert!(out.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn incomplete_plan_deadlocks() {
        let pr = wan_problem();
        let mut plan = schedule_cell(&pr, Policy::Atlas, None).unwrap();
        plan.tasks.retain(|t| !(t.stage == 2 && t.microbatch == 1 && t.kind == TaskKind::Forward));
        match replay(&pr, Policy::Atlas, &plan, 1) {
            Err(SimError::Deadlock { remaining, blocked }) => {
                assert!(remaining > 0);
                assert!(blocked.iter().any(|b| b.contains("waits on F m1 s2")), "{blocked:?}");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }
}
