//! Synchronous pipeline schedules (GPipe, 1F1B with flush, Chimera) and the
//! timeline metrics computed on them.
//!
//! Every device runs one or two *lanes*: fixed per-stage op orders. A lane
//! op starts once its pipeline dependencies have finished and its device is
//! free. When several lane heads are ready the one that can start earliest
//! runs first; ties go to the micro-batch that is further ahead in its own
//! pipeline direction, then to the down direction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{
    CostTable, Direction, Method, PipelineConfig, StaticSchedule, Topology, Violation, WorkItem,
    WorkKind,
};

/// Absolute slack for comparing simulated times.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Latency added to every stage-to-stage send (ms). Zero by default.
    pub p2p_latency: f64,
}

#[derive(Debug, Clone, Copy)]
struct LaneOp {
    kind: WorkKind,
    micro: usize,
}

#[derive(Debug)]
struct Lane {
    stage: usize,
    local: usize,
    dir: Direction,
    ops: Vec<LaneOp>,
}

fn push_backward(ops: &mut Vec<LaneOp>, micro: usize, recompute: bool) {
    if recompute {
        ops.push(LaneOp {
            kind: WorkKind::Recompute,
            micro,
        });
    }
    ops.push(LaneOp {
        kind: WorkKind::Backward,
        micro,
    });
}

fn gpipe_order(micros: &[usize], recompute: bool) -> Vec<LaneOp> {
    let mut ops: Vec<LaneOp> = micros
        .iter()
        .map(|&m| LaneOp {
            kind: WorkKind::Forward,
            micro: m,
        })
        .collect();
    for &m in micros {
        push_backward(&mut ops, m, recompute);
    }
    ops
}

/// One-forward-one-backward order for `stage` of a `depth`-stage pipeline.
fn one_f_one_b_order(depth: usize, stage: usize, micros: &[usize], recompute: bool) -> Vec<LaneOp> {
    let n = micros.len();
    let warmup = (depth - 1 - stage).min(n);
    let fwd = |m| LaneOp {
        kind: WorkKind::Forward,
        micro: m,
    };
    let mut ops: Vec<LaneOp> = micros[..warmup].iter().map(|&m| fwd(m)).collect();
    for i in 0..n - warmup {
        ops.push(fwd(micros[warmup + i]));
        push_backward(&mut ops, micros[i], recompute);
    }
    for &m in &micros[n - warmup..] {
        push_backward(&mut ops, m, recompute);
    }
    ops
}

fn lanes_for(config: &PipelineConfig) -> Vec<Lane> {
    let d = config.depth;
    let n = config.micro_batches;
    let rc = config.recompute;
    let all: Vec<usize> = (0..n).collect();
    match config.method {
        Method::GPipe => (0..d)
            .map(|s| Lane {
                stage: s,
                local: s,
                dir: Direction::Down,
                ops: gpipe_order(&all, rc),
            })
            .collect(),
        Method::OneF1B => (0..d)
            .map(|s| Lane {
                stage: s,
                local: s,
                dir: Direction::Down,
                ops: one_f_one_b_order(d, s, &all, rc),
            })
            .collect(),
        Method::Chimera => {
            let half = n / 2;
            let down: Vec<usize> = (0..half).collect();
            let up: Vec<usize> = (half..n).collect();
            let mut lanes = Vec::with_capacity(2 * d);
            for s in 0..d {
                lanes.push(Lane {
                    stage: s,
                    local: s,
                    dir: Direction::Down,
                    ops: one_f_one_b_order(d, s, &down, rc),
                });
                lanes.push(Lane {
                    stage: s,
                    local: d - 1 - s,
                    dir: Direction::Up,
                    ops: one_f_one_b_order(d, s, &up, rc),
                });
            }
            lanes
        }
    }
}

struct EndTimes {
    depth: usize,
    micros: usize,
    ends: Vec<Option<f64>>,
}

impl EndTimes {
    fn new(depth: usize, micros: usize) -> Self {
        EndTimes {
            depth,
            micros,
            ends: vec![None; 3 * depth * micros],
        }
    }

    fn idx(&self, kind: WorkKind, stage: usize, micro: usize) -> usize {
        let k = match kind {
            WorkKind::Forward => 0,
            WorkKind::Recompute => 1,
            _ => 2,
        };
        (k * self.depth + stage) * self.micros + micro
    }

    fn get(&self, kind: WorkKind, stage: usize, micro: usize) -> Option<f64> {
        self.ends[self.idx(kind, stage, micro)]
    }

    fn set(&mut self, kind: WorkKind, stage: usize, micro: usize, t: f64) {
        let i = self.idx(kind, stage, micro);
        self.ends[i] = Some(t);
    }
}

/// Earliest time `op` of `stage` may start given finished work, or `None`
/// while a dependency is still pending.
fn ready_time(
    ends: &EndTimes,
    op: LaneOp,
    stage: usize,
    depth: usize,
    recompute: bool,
    latency: f64,
) -> Option<f64> {
    let last = depth - 1;
    let from_downstream = || {
        if stage == last {
            ends.get(WorkKind::Forward, last, op.micro)
        } else {
            ends.get(WorkKind::Backward, stage + 1, op.micro)
                .map(|t| t + latency)
        }
    };
    match op.kind {
        WorkKind::Forward => {
            if stage == 0 {
                Some(0.0)
            } else {
                ends.get(WorkKind::Forward, stage - 1, op.micro)
                    .map(|t| t + latency)
            }
        }
        WorkKind::Recompute => from_downstream(),
        WorkKind::Backward if recompute => ends.get(WorkKind::Recompute, stage, op.micro),
        WorkKind::Backward => from_downstream(),
        _ => unreachable!("lanes only hold forward, recompute and backward work"),
    }
}

/// Simulates one pipeline step for pipeline group 0, returning items on
/// group-local devices.
fn simulate_group(config: &PipelineConfig, costs: &CostTable, opts: &ScheduleOptions) -> Vec<WorkItem> {
    let d = config.depth;
    let n = config.micro_batches;
    let half = n / 2;
    let lanes = lanes_for(config);
    let mut heads = vec![0usize; lanes.len()];
    let mut device_free = vec![0.0f64; d];
    let mut ends = EndTimes::new(d, n);
    let total: usize = lanes.iter().map(|l| l.ops.len()).sum();
    let mut out = Vec::with_capacity(total);

    let duration = |kind| match kind {
        WorkKind::Forward | WorkKind::Recompute => costs.t_f,
        _ => costs.t_b,
    };
    let position = |lane: &Lane, micro: usize| match lane.dir {
        Direction::Down => micro,
        Direction::Up => micro - half,
    };

    for _ in 0..total {
        let mut best: Option<((f64, usize, Direction, usize), usize)> = None;
        for (li, lane) in lanes.iter().enumerate() {
            let Some(&op) = lane.ops.get(heads[li]) else {
                continue;
            };
            let Some(ready) = ready_time(&ends, op, lane.stage, d, config.recompute, opts.p2p_latency)
            else {
                continue;
            };
            let start = ready.max(device_free[lane.local]);
            let key = (start, position(lane, op.micro), lane.dir, li);
            let better = match &best {
                None => true,
                Some((k, _)) => {
                    key.0
                        .total_cmp(&k.0)
                        .then(key.1.cmp(&k.1))
                        .then(key.2.cmp(&k.2))
                        .then(key.3.cmp(&k.3))
                        .is_lt()
                }
            };
            if better {
                best = Some((key, li));
            }
        }
        let ((start, ..), li) = best.expect("pipeline lanes cannot deadlock");
        let lane = &lanes[li];
        let op = lane.ops[heads[li]];
        heads[li] += 1;
        let dur = duration(op.kind);
        device_free[lane.local] = start + dur;
        ends.set(op.kind, lane.stage, op.micro, start + dur);
        out.push(
            WorkItem::new(op.kind, lane.stage, lane.local)
                .micro(op.micro)
                .at(start, dur),
        );
    }
    out
}

/// One step of forward/backward work on global devices, sorted per device.
pub(crate) fn step_template(
    config: &PipelineConfig,
    costs: &CostTable,
    opts: &ScheduleOptions,
) -> Result<Vec<Vec<WorkItem>>> {
    config.validate()?;
    costs.validate()?;
    let topo = Topology::new(config);
    let group_items = simulate_group(config, costs, opts);
    let mut timelines = vec![Vec::new(); topo.devices()];
    for g in 0..topo.groups() {
        for item in &group_items {
            let device = topo.device(g, item.device);
            let mut it = item.clone();
            it.device = device;
            timelines[device].push(it);
        }
    }
    for tl in &mut timelines {
        sort_timeline(tl);
    }
    Ok(timelines)
}

pub(crate) fn sort_timeline(tl: &mut [WorkItem]) {
    tl.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.end().total_cmp(&b.end()))
            .then(a.kind.cmp(&b.kind))
    });
}

pub(crate) fn makespan_of(timelines: &[Vec<WorkItem>]) -> f64 {
    timelines
        .iter()
        .flatten()
        .map(WorkItem::end)
        .fold(0.0, f64::max)
}

/// Builds the forward/backward schedule unrolled over `horizon_steps` steps.
pub fn build_schedule(
    config: &PipelineConfig,
    costs: &CostTable,
    horizon_steps: usize,
) -> Result<StaticSchedule> {
    build_schedule_with(config, costs, horizon_steps, &ScheduleOptions::default())
}

pub fn build_schedule_with(
    config: &PipelineConfig,
    costs: &CostTable,
    horizon_steps: usize,
    opts: &ScheduleOptions,
) -> Result<StaticSchedule> {
    if horizon_steps == 0 {
        return Err(crate::error::Error::InvalidConfig(vec![Violation::new(
            "horizon_steps",
            "must be >= 1",
        )]));
    }
    let template = step_template(config, costs, opts)?;
    let period = makespan_of(&template);
    Ok(unroll(&template, period, horizon_steps, Topology::new(config).device_groups()))
}

/// Repeats a one-step template `steps` times with the given period.
pub(crate) fn unroll(
    template: &[Vec<WorkItem>],
    period: f64,
    steps: usize,
    device_groups: Vec<usize>,
) -> StaticSchedule {
    let timelines = template
        .iter()
        .map(|tl| {
            (0..steps)
                .flat_map(|k| {
                    tl.iter().map(move |it| {
                        let mut it = it.clone();
                        it.start += k as f64 * period;
                        it.step = k;
                        it
                    })
                })
                .collect()
        })
        .collect();
    StaticSchedule {
        timelines,
        period,
        horizon_steps: steps,
        refresh_period: 1,
        device_groups,
    }
}

/// Idle intervals of every device within `[0, span]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleSet {
    pub intervals: Vec<Vec<(f64, f64)>>,
    pub total_idle: Vec<f64>,
    pub makespan: f64,
}

impl BubbleSet {
    pub fn is_empty(&self) -> bool {
        self.intervals.iter().all(Vec::is_empty)
    }
}

/// Complement of the work intervals on one sorted timeline, adjacent gaps merged.
pub(crate) fn idle_intervals(timeline: &[WorkItem], from: f64, to: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut cursor = from;
    let push = |a: f64, b: f64, out: &mut Vec<(f64, f64)>| {
        if b - a <= EPS {
            return;
        }
        match out.last_mut() {
            Some(last) if (a - last.1).abs() <= EPS => last.1 = b,
            _ => out.push((a, b)),
        }
    };
    for it in timeline {
        if it.duration <= 0.0 {
            continue;
        }
        if it.start > cursor {
            push(cursor, it.start.min(to), &mut out);
        }
        cursor = cursor.max(it.end());
    }
    if to > cursor {
        push(cursor, to, &mut out);
    }
    out
}

pub fn extract_bubbles(schedule: &StaticSchedule) -> BubbleSet {
    let span = schedule.span();
    let intervals: Vec<Vec<(f64, f64)>> = schedule
        .timelines
        .iter()
        .map(|tl| idle_intervals(tl, 0.0, span))
        .collect();
    let total_idle = intervals
        .iter()
        .map(|iv| iv.iter().map(|(a, b)| b - a).sum())
        .collect();
    BubbleSet {
        intervals,
        total_idle,
        makespan: span,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMetrics {
    pub makespan: f64,
    pub per_device_busy: Vec<f64>,
    /// Busy time over makespan, averaged over devices.
    pub utilization: f64,
}

pub fn schedule_metrics(schedule: &StaticSchedule) -> ScheduleMetrics {
    let makespan = schedule.span();
    let per_device_busy: Vec<f64> = schedule
        .timelines
        .iter()
        .map(|tl| tl.iter().map(|it| it.duration).sum())
        .collect();
    let denom = makespan * per_device_busy.len() as f64;
    let utilization = if denom > 0.0 {
        per_device_busy.iter().sum::<f64>() / denom
    } else {
        1.0
    };
    ScheduleMetrics {
        makespan,
        per_device_busy,
        utilization,
    }
}

/// Checks non-overlap, dependency ordering, step flushes, placement and
/// (stage, micro-batch) coverage. Works for filled schedules too.
pub fn validate_schedule(schedule: &StaticSchedule, config: &PipelineConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let topo = Topology::new(config);
    if schedule.devices() != topo.devices() {
        out.push(Violation::new(
            "timelines",
            format!("expected {} devices, found {}", topo.devices(), schedule.devices()),
        ));
        return out;
    }

    for (dev, tl) in schedule.timelines.iter().enumerate() {
        let mut prev_start = f64::NEG_INFINITY;
        let mut busy_until = f64::NEG_INFINITY;
        let mut busy_label = String::new();
        for it in tl {
            if it.device != dev {
                out.push(Violation::new(
                    "placement",
                    format!("{} listed on device {dev} but tagged device {}", it.label(), it.device),
                ));
            }
            if !topo.hosts(dev, it.stage) {
                out.push(Violation::new(
                    "placement",
                    format!("{} on device {dev}, which does not host stage {}", it.label(), it.stage),
                ));
            }
            if it.start < prev_start - EPS {
                out.push(Violation::new("order", format!("{} out of start order on device {dev}", it.label())));
            }
            if it.duration < 0.0 {
                out.push(Violation::new("duration", format!("{} has negative duration", it.label())));
            }
            if it.duration > 0.0 && it.start < busy_until - EPS {
                out.push(Violation::new(
                    "overlap",
                    format!(
                        "{} [{}, {}) overlaps {busy_label} on device {dev}",
                        it.label(),
                        it.start,
                        it.end()
                    ),
                ));
            }
            prev_start = prev_start.max(it.start);
            if it.duration > 0.0 && it.end() > busy_until {
                busy_until = it.end();
                busy_label = it.label();
            }
        }
    }

    // (group, step, kind, stage, micro) -> (start, end)
    let mut pipe: HashMap<(usize, usize, WorkKind, usize, usize), Vec<(f64, f64)>> = HashMap::new();
    let mut barrier_end: HashMap<usize, f64> = HashMap::new();
    let mut step_first_start: HashMap<usize, f64> = HashMap::new();
    for it in schedule.items() {
        let gated = it.kind.is_pipeline() || matches!(it.kind, WorkKind::Precondition | WorkKind::SyncGrad);
        if gated {
            let e = barrier_end.entry(it.step).or_insert(f64::NEG_INFINITY);
            *e = e.max(it.end());
            let s = step_first_start.entry(it.step).or_insert(f64::INFINITY);
            *s = s.min(it.start);
        }
        if it.kind.is_pipeline() {
            let Some(m) = it.micro_batch else {
                out.push(Violation::new("coverage", format!("{} carries no micro-batch", it.label())));
                continue;
            };
            pipe.entry((topo.group_of(it.device), it.step, it.kind, it.stage, m))
                .or_default()
                .push((it.start, it.end()));
        }
    }

    let mut kinds = vec![WorkKind::Forward, WorkKind::Backward];
    if config.recompute {
        kinds.push(WorkKind::Recompute);
    }
    let last = config.depth.saturating_sub(1);
    for g in 0..topo.groups() {
        for step in 0..schedule.horizon_steps {
            for s in 0..config.depth {
                for m in 0..config.micro_batches {
                    for &k in &kinds {
                        let n = pipe.get(&(g, step, k, s, m)).map_or(0, Vec::len);
                        if n != 1 {
                            out.push(Violation::new(
                                "coverage",
                                format!("{k:?} of stage {s} micro-batch {m} appears {n} times in step {step} (group {g})"),
                            ));
                        }
                    }
                    let get = |k: WorkKind, s: usize| pipe.get(&(g, step, k, s, m)).and_then(|v| v.first().copied());
                    let mut need = |what: &str, after: Option<(f64, f64)>, before: Option<(f64, f64)>| {
                        if let (Some(a), Some(b)) = (after, before) {
                            if b.0 < a.1 - EPS {
                                out.push(Violation::new(
                                    "dependency",
                                    format!("{what} (stage {s}, micro-batch {m}, step {step}, group {g}) starts at {} before its input ends at {}", b.0, a.1),
                                ));
                            }
                        }
                    };
                    if s > 0 {
                        need("forward", get(WorkKind::Forward, s - 1), get(WorkKind::Forward, s));
                    }
                    let upstream = if s == last {
                        get(WorkKind::Forward, last)
                    } else {
                        get(WorkKind::Backward, s + 1)
                    };
                    if config.recompute {
                        need("recompute", upstream, get(WorkKind::Recompute, s));
                        need("backward", get(WorkKind::Recompute, s), get(WorkKind::Backward, s));
                    } else {
                        need("backward", upstream, get(WorkKind::Backward, s));
                    }
                }
            }
        }
    }

    for step in 1..schedule.horizon_steps {
        if let (Some(&prev_end), Some(&first)) = (barrier_end.get(&(step - 1)), step_first_start.get(&step)) {
            if first < prev_end - EPS {
                out.push(Violation::new(
                    "flush",
                    format!("step {step} starts at {first} before step {} flushes at {prev_end}", step - 1),
                ));
            }
        }
    }
    out
}
