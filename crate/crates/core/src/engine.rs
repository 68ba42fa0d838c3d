//! Deterministic discrete-event engine: one compute stream per device, any
//! number of communication ops in the fluid network, dependency edges between
//! everything, and a policy callback deciding when queued ops dispatch.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::netmodel::{op_demand, isolated_duration, ActiveFlowSet, InsertOutcome, NetModelError};
use crate::types::{ClusterSpec, CollectiveKind, CollectiveOp, DeviceId, OpId, OpRecord};

/// Compute task identifier, dense per scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "task{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dep {
    Comm(OpId),
    Task(TaskId),
}

/// Role tags for compute tasks, used by metric extraction and the
/// combine-lookahead flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLabel {
    FwdAttn { layer: u32 },
    FwdGate { layer: u32 },
    FwdFfn { layer: u32, micro: Option<u32> },
    FwdCombine { layer: u32 },
    BwdCombine { layer: u32 },
    BwdFfn { layer: u32, micro: Option<u32> },
    BwdGate { layer: u32 },
    BwdAttn { layer: u32, chunk: u32 },
    InferAttnGate { layer: u32 },
    InferSchedWait { layer: u32 },
    InferExpert { layer: u32 },
    InferCombine { layer: u32 },
    Other,
}

/// Role tags for communication ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpLabel {
    A2aFwd { layer: u32, half: u8 },
    A2aBwd { layer: u32, half: u8 },
    GradAllReduce { grad: u32 },
    ParamExchange,
    InferA2a { layer: u32, half: u8 },
    Other,
}

#[derive(Debug, Clone)]
pub struct ComputeTask {
    pub task_id: TaskId,
    pub device: DeviceId,
    pub duration: f64,
    pub deps: Vec<Dep>,
    pub label: TaskLabel,
}

#[derive(Debug, Clone)]
pub struct CommOp {
    pub inner: CollectiveOp,
    pub label: OpLabel,
    /// Extra dependencies on compute tasks (op-to-op deps live in `inner`).
    pub task_deps: Vec<TaskId>,
}

/// A full executable scenario: dense task and op tables.
#[derive(Debug, Clone)]
pub struct EngineScenario {
    pub cluster: ClusterSpec,
    /// Fixed serial cost paid per dispatched collective before its transfer.
    pub launch_latency: f64,
    pub tasks: Vec<ComputeTask>,
    pub comms: Vec<CommOp>,
}

impl EngineScenario {
    pub fn new(cluster: ClusterSpec, launch_latency: f64) -> Self {
        EngineScenario {
            cluster,
            launch_latency,
            tasks: Vec::new(),
            comms: Vec::new(),
        }
    }

    pub fn push_task(
        &mut self,
        device: DeviceId,
        duration: f64,
        deps: Vec<Dep>,
        label: TaskLabel,
    ) -> TaskId {
        let id = TaskId(self.tasks.len() as u64);
        self.tasks.push(ComputeTask {
            task_id: id,
            device,
            duration,
            deps,
            label,
        });
        id
    }

    pub fn push_comm(&mut self, mut inner: CollectiveOp, label: OpLabel, task_deps: Vec<TaskId>) -> OpId {
        let id = OpId(self.comms.len() as u64);
        inner.op_id = id;
        self.comms.push(CommOp {
            inner,
            label,
            task_deps,
        });
        id
    }
}

/// Completed run of one op.
#[derive(Debug, Clone, Copy)]
pub struct OpRun {
    pub label: OpLabel,
    pub kind: CollectiveKind,
    pub parent: Option<OpId>,
    /// Dispatch time (launch latency runs from here).
    pub start: f64,
    pub end: f64,
    /// Contention-free transfer time, excluding launch latency.
    pub isolated: f64,
}

/// Completed run of one compute task.
#[derive(Debug, Clone, Copy)]
pub struct TaskRun {
    pub label: TaskLabel,
    pub device: DeviceId,
    pub start: f64,
    pub end: f64,
}

/// Raw result of an engine run.
#[derive(Debug, Clone)]
pub struct Timeline {
    pub ops: Vec<OpRun>,
    pub tasks: Vec<TaskRun>,
    pub makespan: f64,
    pub busy_time_per_device: Vec<f64>,
}

impl Timeline {
    /// One record per op and per compute task, ordered by id.
    pub fn records(&self) -> Vec<OpRecord> {
        let mut out = Vec::with_capacity(self.ops.len() + self.tasks.len());
        for (i, op) in self.ops.iter().enumerate() {
            out.push(OpRecord {
                op_id: OpId(i as u64),
                kind: op.kind.to_string(),
                device: -1,
                start: op.start,
                end: op.end,
                isolated_duration: op.isolated,
            });
        }
        for (i, t) in self.tasks.iter().enumerate() {
            out.push(OpRecord {
                op_id: OpId((self.ops.len() + i) as u64),
                kind: "compute".into(),
                device: t.device as i64,
                start: t.start,
                end: t.end,
                isolated_duration: t.end - t.start,
            });
        }
        out
    }

    /// Groups all-to-all micro-ops back into whole ops: (first dispatch, last
    /// end, summed isolated duration), keyed by the parent op.
    pub fn whole_all_to_alls(&self) -> BTreeMap<OpId, (f64, f64, f64)> {
        let mut spans: BTreeMap<OpId, (f64, f64, f64)> = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if op.kind != CollectiveKind::AllToAll {
                continue;
            }
            let key = op.parent.unwrap_or(OpId(i as u64));
            let e = spans.entry(key).or_insert((f64::INFINITY, 0.0, 0.0));
            e.0 = e.0.min(op.start);
            e.1 = e.1.max(op.end);
            e.2 += op.isolated;
        }
        spans
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("deadlock detected: {0:?}")]
    DeadlockDetected(Vec<String>),
    #[error(transparent)]
    Net(#[from] NetModelError),
    #[error("window [{0}, {1}] is empty")]
    EmptyWindow(f64, f64),
}

/// What a policy sees when asked for dispatch decisions.
pub struct EngineView<'a> {
    pub time: f64,
    /// Ready ops (arrived, dependencies met, not yet dispatched), ascending.
    pub queued: &'a [OpId],
    pub in_flight: &'a BTreeSet<OpId>,
    pub completed_a2a: u32,
    /// All-to-alls not yet completed anywhere in the scenario.
    pub remaining_a2a: u32,
    pub combine_bwd_running: bool,
    pub comms: &'a [CommOp],
}

impl EngineView<'_> {
    pub fn kind_of(&self, op: OpId) -> CollectiveKind {
        self.comms[op.0 as usize].inner.kind()
    }

    pub fn any_queued_of(&self, kind: CollectiveKind) -> bool {
        self.queued.iter().any(|&o| self.kind_of(o) == kind)
    }

    pub fn any_in_flight_of(&self, kind: CollectiveKind) -> bool {
        self.in_flight.iter().any(|&o| self.kind_of(o) == kind)
    }
}

/// Dispatch policy callback, invoked after every event batch.
pub trait DispatchPolicy {
    fn select(&mut self, view: &EngineView) -> Vec<OpId>;
}

/// Dispatch everything as soon as it is ready; the network fair-shares.
pub struct FifoPolicy;

impl DispatchPolicy for FifoPolicy {
    fn select(&mut self, view: &EngineView) -> Vec<OpId> {
        view.queued.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    OpComplete(OpId),
    ComputeComplete(TaskId),
    OpArrival(OpId),
    NetStart(OpId),
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::OpComplete(_) => 0,
            EventKind::ComputeComplete(_) => 1,
            EventKind::OpArrival(_) => 2,
            EventKind::NetStart(_) => 3,
        }
    }

    fn id(&self) -> u64 {
        match self {
            EventKind::OpComplete(o) | EventKind::OpArrival(o) | EventKind::NetStart(o) => o.0,
            EventKind::ComputeComplete(t) => t.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.kind.id().cmp(&other.kind.id()))
    }
}

struct DeviceStream {
    busy: bool,
    ready: BTreeSet<TaskId>,
}

/// Runs the scenario to quiescence under the given policy.
pub fn run(scenario: &EngineScenario, policy: &mut dyn DispatchPolicy) -> Result<Timeline, EngineError> {
    let n_ops = scenario.comms.len();
    let n_tasks = scenario.tasks.len();
    for (i, c) in scenario.comms.iter().enumerate() {
        debug_assert_eq!(c.inner.op_id.0 as usize, i, "comm op ids must be dense");
    }

    // Dependency counts and reverse edges.
    let mut op_deps = vec![0u32; n_ops];
    let mut task_deps = vec![0u32; n_tasks];
    let mut op_dependents: Vec<Vec<Dep>> = vec![Vec::new(); n_ops];
    let mut task_dependents: Vec<Vec<Dep>> = vec![Vec::new(); n_tasks];
    for (i, c) in scenario.comms.iter().enumerate() {
        for &d in &c.inner.dependencies {
            op_deps[i] += 1;
            op_dependents[d.0 as usize].push(Dep::Comm(OpId(i as u64)));
        }
        for &t in &c.task_deps {
            op_deps[i] += 1;
            task_dependents[t.0 as usize].push(Dep::Comm(OpId(i as u64)));
        }
    }
    for (i, t) in scenario.tasks.iter().enumerate() {
        for &d in &t.deps {
            task_deps[i] += 1;
            match d {
                Dep::Comm(o) => op_dependents[o.0 as usize].push(Dep::Task(TaskId(i as u64))),
                Dep::Task(tt) => task_dependents[tt.0 as usize].push(Dep::Task(TaskId(i as u64))),
            }
        }
    }

    let num_devices = scenario.cluster.num_devices as usize;
    let mut streams: Vec<DeviceStream> = (0..num_devices)
        .map(|_| DeviceStream {
            busy: false,
            ready: BTreeSet::new(),
        })
        .collect();

    let mut heap: BinaryHeap<Reverse<Event>> = BinaryHeap::new();
    for c in &scenario.comms {
        heap.push(Reverse(Event {
            time: c.inner.arrival_time,
            kind: EventKind::OpArrival(c.inner.op_id),
        }));
    }

    let mut arrived = vec![false; n_ops];
    let mut dispatched = vec![false; n_ops];
    let mut op_done = vec![false; n_ops];
    let mut task_done = vec![false; n_tasks];
    let mut op_start = vec![0.0f64; n_ops];
    let mut op_end = vec![0.0f64; n_ops];
    let mut task_start = vec![0.0f64; n_tasks];
    let mut task_end = vec![0.0f64; n_tasks];

    // Tasks with no deps are ready immediately.
    for (i, t) in scenario.tasks.iter().enumerate() {
        if task_deps[i] == 0 {
            streams[t.device as usize].ready.insert(TaskId(i as u64));
        }
    }

    let total_a2a = scenario
        .comms
        .iter()
        .filter(|c| c.inner.kind() == CollectiveKind::AllToAll)
        .count() as u32;
    let mut completed_a2a = 0u32;
    let mut combine_bwd_running = 0u32;
    let mut in_flight: BTreeSet<OpId> = BTreeSet::new();
    let mut queued: BTreeSet<OpId> = BTreeSet::new();
    let mut flows = ActiveFlowSet::new();
    let mut now = 0.0f64;
    let mut busy_time = vec![0.0f64; num_devices];

    loop {
        // Start ready compute tasks on idle streams.
        for stream in streams.iter_mut() {
            if stream.busy {
                continue;
            }
            if let Some(&task) = stream.ready.iter().next() {
                stream.ready.remove(&task);
                stream.busy = true;
                let i = task.0 as usize;
                task_start[i] = now;
                if matches!(scenario.tasks[i].label, TaskLabel::BwdCombine { .. }) {
                    combine_bwd_running += 1;
                }
                heap.push(Reverse(Event {
                    time: now + scenario.tasks[i].duration,
                    kind: EventKind::ComputeComplete(task),
                }));
            }
        }

        // Ask the policy what to dispatch.
        if !queued.is_empty() {
            let queued_vec: Vec<OpId> = queued.iter().copied().collect();
            let view = EngineView {
                time: now,
                queued: &queued_vec,
                in_flight: &in_flight,
                completed_a2a,
                remaining_a2a: total_a2a - completed_a2a,
                combine_bwd_running: combine_bwd_running > 0,
                comms: &scenario.comms,
            };
            let selected = policy.select(&view);
            for op in selected {
                assert!(queued.remove(&op), "policy dispatched a non-queued op {op}");
                dispatched[op.0 as usize] = true;
                op_start[op.0 as usize] = now;
                in_flight.insert(op);
                heap.push(Reverse(Event {
                    time: now + scenario.launch_latency,
                    kind: EventKind::NetStart(op),
                }));
            }
        }

        // Next network completion vs next discrete event.
        let rates = flows.fair_share_rates(&scenario.cluster);
        let t_net = flows.time_to_next_event(&rates).map(|dt| now + dt);
        let t_evt = heap.peek().map(|Reverse(e)| e.time);
        let t = match (t_net, t_evt) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                // Nothing scheduled: either we are done or stuck.
                let done = op_done.iter().all(|&d| d) && task_done.iter().all(|&d| d);
                if done {
                    break;
                }
                return Err(deadlock(scenario, &op_done, &task_done, &op_deps, &task_deps, &queued));
            }
        };

        // Advance the fluid model to t; completions become events at t.
        if t > now && !flows.is_empty() {
            let completed = flows.advance(&rates, t - now)?;
            for op in completed {
                heap.push(Reverse(Event {
                    time: t,
                    kind: EventKind::OpComplete(op),
                }));
            }
        }
        now = t;

        // Process every event at this instant in (kind, id) order.
        while let Some(Reverse(ev)) = heap.peek().copied() {
            if ev.time > now {
                break;
            }
            heap.pop();
            match ev.kind {
                EventKind::OpArrival(op) => {
                    arrived[op.0 as usize] = true;
                    if op_deps[op.0 as usize] == 0 && !dispatched[op.0 as usize] {
                        queued.insert(op);
                    }
                }
                EventKind::NetStart(op) => {
                    let demand = op_demand(&scenario.comms[op.0 as usize].inner, &scenario.cluster)?;
                    if flows.insert(op, demand) == InsertOutcome::CompletedInstantly {
                        heap.push(Reverse(Event {
                            time: now,
                            kind: EventKind::OpComplete(op),
                        }));
                    }
                }
                EventKind::OpComplete(op) => {
                    let i = op.0 as usize;
                    op_done[i] = true;
                    op_end[i] = now;
                    in_flight.remove(&op);
                    if scenario.comms[i].inner.kind() == CollectiveKind::AllToAll {
                        completed_a2a += 1;
                    }
                    settle_dependents(
                        &op_dependents[i],
                        &mut op_deps,
                        &mut task_deps,
                        &arrived,
                        &dispatched,
                        &mut queued,
                        &mut streams,
                        scenario,
                    );
                }
                EventKind::ComputeComplete(task) => {
                    let i = task.0 as usize;
                    task_done[i] = true;
                    task_end[i] = now;
                    let t = &scenario.tasks[i];
                    streams[t.device as usize].busy = false;
                    busy_time[t.device as usize] += t.duration;
                    if matches!(t.label, TaskLabel::BwdCombine { .. }) {
                        combine_bwd_running -= 1;
                    }
                    settle_dependents(
                        &task_dependents[i],
                        &mut op_deps,
                        &mut task_deps,
                        &arrived,
                        &dispatched,
                        &mut queued,
                        &mut streams,
                        scenario,
                    );
                }
            }
        }

    }

    let ops = scenario
        .comms
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(OpRun {
                label: c.label,
                kind: c.inner.kind(),
                parent: c.inner.parent,
                start: op_start[i],
                end: op_end[i],
                isolated: isolated_duration(&c.inner, &scenario.cluster)?,
            })
        })
        .collect::<Result<Vec<_>, NetModelError>>()?;
    let tasks = scenario
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskRun {
            label: t.label,
            device: t.device,
            start: task_start[i],
            end: task_end[i],
        })
        .collect();
    Ok(Timeline {
        ops,
        tasks,
        makespan: now,
        busy_time_per_device: busy_time,
    })
}

#[allow(clippy::too_many_arguments)]
fn settle_dependents(
    dependents: &[Dep],
    op_deps: &mut [u32],
    task_deps: &mut [u32],
    arrived: &[bool],
    dispatched: &[bool],
    queued: &mut BTreeSet<OpId>,
    streams: &mut [DeviceStream],
    scenario: &EngineScenario,
) {
    for &dep in dependents {
        match dep {
            Dep::Comm(op) => {
                let i = op.0 as usize;
                op_deps[i] -= 1;
                if op_deps[i] == 0 && arrived[i] && !dispatched[i] {
                    queued.insert(op);
                }
            }
            Dep::Task(task) => {
                let i = task.0 as usize;
                task_deps[i] -= 1;
                if task_deps[i] == 0 {
                    streams[scenario.tasks[i].device as usize].ready.insert(task);
                }
            }
        }
    }
}

fn deadlock(
    scenario: &EngineScenario,
    op_done: &[bool],
    task_done: &[bool],
    op_deps: &[u32],
    task_deps: &[u32],
    queued: &BTreeSet<OpId>,
) -> EngineError {
    if !queued.is_empty() {
        return EngineError::DeadlockDetected(
            queued
                .iter()
                .map(|o| format!("{o} queued but never dispatched by the policy"))
                .collect(),
        );
    }
    // Find a dependency cycle among unfinished nodes via DFS.
    // Node encoding: ops are 0..n_ops, tasks are n_ops..n_ops+n_tasks.
    let n_ops = scenario.comms.len();
    let enc_task = |t: TaskId| n_ops + t.0 as usize;
    let stuck: Vec<usize> = (0..n_ops)
        .filter(|&i| !op_done[i] && op_deps[i] > 0)
        .chain(
            (0..scenario.tasks.len())
                .filter(|&i| !task_done[i] && task_deps[i] > 0)
                .map(|i| n_ops + i),
        )
        .collect();
    let edges = |node: usize| -> Vec<usize> {
        if node < n_ops {
            let c = &scenario.comms[node];
            c.inner
                .dependencies
                .iter()
                .map(|d| d.0 as usize)
                .chain(c.task_deps.iter().map(|&t| enc_task(t)))
                .collect()
        } else {
            scenario.tasks[node - n_ops]
                .deps
                .iter()
                .map(|d| match d {
                    Dep::Comm(o) => o.0 as usize,
                    Dep::Task(t) => enc_task(*t),
                })
                .collect()
        }
    };
    let name = |node: usize| -> String {
        if node < n_ops {
            format!("op{node}")
        } else {
            format!("task{}", node - n_ops)
        }
    };
    // Iterative DFS with path tracking.
    let mut state: BTreeMap<usize, u8> = BTreeMap::new(); // 1 = on stack, 2 = done
    for &start in &stuck {
        if state.contains_key(&start) {
            continue;
        }
        let mut path = vec![(start, edges(start))];
        state.insert(start, 1);
        while let Some((node, succs)) = path.last_mut() {
            if let Some(next) = succs.pop() {
                match state.get(&next) {
                    Some(1) => {
                        // Found a cycle: slice it out of the path.
                        let pos = path.iter().position(|(n, _)| *n == next).unwrap();
                        let mut cycle: Vec<String> =
                            path[pos..].iter().map(|(n, _)| name(*n)).collect();
                        cycle.push(name(next));
                        return EngineError::DeadlockDetected(cycle);
                    }
                    Some(_) => {}
                    None => {
                        state.insert(next, 1);
                        let e = edges(next);
                        path.push((next, e));
                    }
                }
            } else {
                state.insert(*node, 2);
                path.pop();
            }
        }
    }
    EngineError::DeadlockDetected(stuck.iter().map(|&n| name(n)).collect())
}

/// Fraction of `[t0, t1]` during which the device's compute stream is busy.
pub fn busy_fraction(
    timeline: &Timeline,
    device: DeviceId,
    t0: f64,
    t1: f64,
) -> Result<f64, EngineError> {
    if t1 <= t0 {
        return Err(EngineError::EmptyWindow(t0, t1));
    }
    let mut busy = 0.0;
    for task in &timeline.tasks {
        if task.device != device {
            continue;
        }
        let lo = task.start.max(t0);
        let hi = task.end.min(t1);
        if hi > lo {
            busy += hi - lo;
        }
    }
    Ok((busy / (t1 - t0)).clamp(0.0, 1.0))
}
