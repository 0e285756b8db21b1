//! Packs K-FAC curvature, sync and inversion work into pipeline bubbles.
//!
//! The base step is extended with a per-device tail (gradient sync, then
//! preconditioning), unrolled up to `horizon_cap` steps, and queued works are
//! placed greedily into the remaining idle time. A device group needs as many
//! steps as its last placed work reaches into; that cycle then repeats.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{idle_intervals, makespan_of, sort_timeline, EPS};
use crate::types::{
    CommModel, CostTable, Factor, PipelineConfig, StaticSchedule, Topology, Violation, WorkItem,
    WorkKind,
};

/// Duration of a collective over `participants` devices moving `bytes`.
pub fn model_collective(bytes: f64, participants: usize, comm: &CommModel) -> f64 {
    if participants < 2 {
        return 0.0;
    }
    match comm.beta {
        Some(beta) => comm.alpha + bytes / beta,
        None => comm.alpha,
    }
}

/// What a queued work waits for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Readiness {
    /// A forward or backward of the work's own stage and device, in the cycle's first step.
    After { kind: WorkKind, micro_batch: usize },
    /// Other queue entries, by index.
    AllOf(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedWork {
    /// Unplaced item (start 0) already bound to its device.
    pub item: WorkItem,
    pub ready: Readiness,
}

/// Every K-FAC work of one refresh cycle, for every stage replica.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KfacWorkQueue {
    pub works: Vec<QueuedWork>,
}

impl KfacWorkQueue {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.works.len()
    }

    pub fn is_empty(&self) -> bool {
        self.works.is_empty()
    }

    /// Number of queued works of `kind` for `stage` on `device`.
    pub fn count(&self, kind: WorkKind, stage: usize, device: usize) -> usize {
        self.works
            .iter()
            .filter(|w| w.item.kind == kind && w.item.stage == stage && w.item.device == device)
            .count()
    }
}

/// Builds the queue: per stage replica, 2*l*N curvature works, 2*l
/// inversions and, when W > 1, 2*l curvature syncs.
pub fn enumerate_kfac_works(config: &PipelineConfig, costs: &CostTable) -> Result<KfacWorkQueue> {
    config.validate()?;
    costs.validate()?;
    let topo = Topology::new(config);
    let l = config.layers_per_stage;
    let n = config.micro_batches;
    let w = topo.replicas_of(0).len();
    let factors = (2 * l) as f64;
    let t_curv = costs.t_curv / factors;
    let t_inv = costs.t_inv / factors;
    let t_sync = model_collective(costs.m_curv as f64 / factors, w, &costs.comm);

    let mut works = Vec::new();
    // (stage, layer, factor) -> sync indices over replicas
    let mut syncs: BTreeMap<(usize, usize, Factor), Vec<usize>> = BTreeMap::new();
    let mut curvs: HashMap<(usize, usize, Factor, usize), Vec<usize>> = HashMap::new();
    for stage in 0..config.depth {
        for &device in &topo.replicas_of(stage) {
            for layer in 0..l {
                for f in Factor::BOTH {
                    let after = match f {
                        Factor::A => WorkKind::Forward,
                        Factor::B => WorkKind::Backward,
                    };
                    let ids: Vec<usize> = topo
                        .micro_batches_of(stage, device, n)
                        .map(|m| {
                            works.push(QueuedWork {
                                item: WorkItem::new(WorkKind::Curvature, stage, device)
                                    .micro(m)
                                    .layer_factor(layer, Some(f))
                                    .at(0.0, t_curv),
                                ready: Readiness::After {
                                    kind: after,
                                    micro_batch: m,
                                },
                            });
                            works.len() - 1
                        })
                        .collect();
                    if w > 1 {
                        works.push(QueuedWork {
                            item: WorkItem::new(WorkKind::SyncCurvature, stage, device)
                                .layer_factor(layer, Some(f))
                                .at(0.0, t_sync),
                            ready: Readiness::AllOf(ids),
                        });
                        syncs.entry((stage, layer, f)).or_default().push(works.len() - 1);
                    } else {
                        curvs.insert((stage, layer, f, device), ids);
                    }
                }
            }
        }
    }
    for stage in 0..config.depth {
        for &device in &topo.replicas_of(stage) {
            for layer in 0..l {
                for f in Factor::BOTH {
                    let deps = if w > 1 {
                        syncs[&(stage, layer, f)].clone()
                    } else {
                        curvs[&(stage, layer, f, device)].clone()
                    };
                    works.push(QueuedWork {
                        item: WorkItem::new(WorkKind::Inversion, stage, device)
                            .layer_factor(layer, Some(f))
                            .at(0.0, t_inv),
                        ready: Readiness::AllOf(deps),
                    });
                }
            }
        }
    }
    Ok(KfacWorkQueue { works })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignOptions {
    /// Split inversion and preconditioning of a stage across its replicas.
    pub inversion_parallel: bool,
    /// Steps available to finish one refresh cycle.
    pub horizon_cap: usize,
}

impl Default for AssignOptions {
    fn default() -> Self {
        AssignOptions {
            inversion_parallel: false,
            horizon_cap: 10,
        }
    }
}

/// Inverse freshness of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStaleness {
    pub stage: usize,
    pub layer: usize,
    /// Step (0-based, within the first cycle) in which the layer's last inversion ends.
    pub completed_step: usize,
    /// Steps an inverse stays in use before its replacement is ready.
    pub staleness: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilledSchedule {
    /// Pipeline, tail and K-FAC work over a horizon holding whole cycles of every group.
    pub schedule: StaticSchedule,
    pub base_period: f64,
    /// Steps until every stage has refreshed its inverses.
    pub refresh_period: usize,
    pub stage_refresh_periods: Vec<usize>,
    pub device_refresh_periods: Vec<usize>,
    pub staleness: Vec<LayerStaleness>,
}

impl FilledSchedule {
    pub fn utilization(&self) -> f64 {
        crate::schedule::schedule_metrics(&self.schedule).utilization
    }
}

/// Replica index of `device` among the devices holding `stage`.
fn replica_rank(topo: &Topology, stage: usize, device: usize) -> usize {
    topo.replicas_of(stage)
        .iter()
        .position(|&d| d == device)
        .expect("device hosts stage")
}

/// Whether `device` runs the inversion at `index` (2*layer + factor) of `stage`.
fn owns_inversion(topo: &Topology, opts: &AssignOptions, stage: usize, device: usize, index: usize) -> bool {
    let replicas = topo.replicas_of(stage).len();
    !opts.inversion_parallel || replicas < 2 || index % replicas == replica_rank(topo, stage, device)
}

/// Layers of `stage` preconditioned on `device`.
fn precondition_layers(topo: &Topology, opts: &AssignOptions, stage: usize, device: usize, layers: usize) -> usize {
    let replicas = topo.replicas_of(stage).len();
    if !opts.inversion_parallel || replicas < 2 {
        return layers;
    }
    let rank = replica_rank(topo, stage, device);
    (0..layers).filter(|l| l % replicas == rank).count()
}

fn step_of(end: f64, period: f64) -> usize {
    if period <= 0.0 {
        return 0;
    }
    ((end / period - 1e-9).ceil().max(1.0) as usize) - 1
}

fn steps_reached(end: f64, period: f64) -> usize {
    if period <= 0.0 {
        return 1;
    }
    ((end / period - 1e-9).ceil() as usize).max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Devices coupled through stage replicas (and hence through syncs).
fn device_components(topo: &Topology) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..topo.devices()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for stage in 0..topo.depth {
        let reps = topo.replicas_of(stage);
        for w in reps.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a.max(b)] = a.min(b);
        }
    }
    (0..parent.len()).map(|d| find(&mut parent, d)).collect()
}

struct Placer {
    free: Vec<Vec<(f64, f64)>>,
    /// Sorted, non-overlapping work intervals of positive length.
    busy: Vec<Vec<(f64, f64)>>,
    horizon_end: f64,
}

impl Placer {
    /// Earliest start >= `ready` on `device` where `duration` fits.
    fn fit(&self, device: usize, ready: f64, duration: f64) -> Option<f64> {
        if duration <= 0.0 {
            // Any instant not strictly inside a work item.
            let busy = &self.busy[device];
            let i = busy.partition_point(|&(a, _)| a < ready - EPS);
            let t = match i.checked_sub(1).map(|j| busy[j]) {
                Some((_, b)) if b > ready + EPS => b,
                _ => ready,
            };
            return (t <= self.horizon_end + EPS).then_some(t);
        }
        self.free[device]
            .iter().find_map(|&(a, b)| {
            let s = ready.max(a);
            (s + duration <= b + EPS).then_some(s)
        })
    }

    fn take(&mut self, device: usize, start: f64, duration: f64) {
        if duration <= 0.0 {
            return;
        }
        let end = start + duration;
        let busy = &mut self.busy[device];
        let at = busy.partition_point(|&(a, _)| a < start);
        busy.insert(at, (start, end));
        let free = &mut self.free[device];
        let i = free
            .iter()
            .position(|&(a, b)| start >= a - EPS && end <= b + EPS)
            .expect("placement lies inside a free interval");
        let (a, b) = free.remove(i);
        if b - end > EPS {
            free.insert(i, (end, b));
        }
        if start - a > EPS {
            free.insert(i, (a, start));
        }
    }
}

fn priority(item: &WorkItem) -> (u8, usize, Option<Factor>, Option<usize>, usize) {
    let k = match item.kind {
        WorkKind::Curvature => 0,
        WorkKind::SyncCurvature => 1,
        _ => 2,
    };
    (k, item.layer.unwrap_or(0), item.factor, item.micro_batch, item.device)
}

/// Places the queue into the bubbles of `base` and finalizes the repeating schedule.
pub fn assign_works(
    config: &PipelineConfig,
    costs: &CostTable,
    base: &StaticSchedule,
    queue: &KfacWorkQueue,
    opts: &AssignOptions,
) -> Result<FilledSchedule> {
    config.validate()?;
    costs.validate()?;
    if opts.horizon_cap == 0 {
        return Err(Error::InvalidConfig(vec![Violation::new("horizon_cap", "must be >= 1")]));
    }
    let topo = Topology::new(config);
    if base.devices() != topo.devices() {
        return Err(Error::InvalidConfig(vec![Violation::new(
            "base",
            format!("schedule has {} devices, config needs {}", base.devices(), topo.devices()),
        )]));
    }

    // One step of pipeline work plus the per-device tail.
    let mut template: Vec<Vec<WorkItem>> = base
        .timelines
        .iter()
        .map(|tl| tl.iter().filter(|it| it.step == 0).cloned().collect())
        .collect();
    let base_period = base.period;
    let t_sync_grad = model_collective(costs.m_theta as f64, topo.replicas_of(0).len(), &costs.comm);
    let l = config.layers_per_stage;
    // Step length from whole-tail totals, so one full precondition adds exactly t_prec.
    let mut period = base_period;
    for (device, tl) in template.iter_mut().enumerate() {
        let mut t = makespan_of(std::slice::from_ref(tl));
        let mut sync_total = 0.0;
        let mut prec_layers = 0;
        let stages: Vec<usize> = topo.stages_on(device).into_iter().map(|(s, _)| s).collect();
        if config.replicas > 1 {
            for &s in &stages {
                tl.push(WorkItem::new(WorkKind::SyncGrad, s, device).at(t, t_sync_grad));
                t += t_sync_grad;
                sync_total += t_sync_grad;
            }
        }
        for &s in &stages {
            let layers = precondition_layers(&topo, opts, s, device, l);
            if layers == 0 {
                continue;
            }
            let d = costs.t_prec * layers as f64 / l as f64;
            tl.push(WorkItem::new(WorkKind::Precondition, s, device).at(t, d));
            t += d;
            prec_layers += layers;
        }
        let prec_total = if prec_layers % l == 0 {
            costs.t_prec * (prec_layers / l) as f64
        } else {
            costs.t_prec * prec_layers as f64 / l as f64
        };
        let last_pipeline = tl.iter().filter(|it| it.kind.is_pipeline()).map(WorkItem::end).fold(0.0, f64::max);
        period = period.max(last_pipeline + sync_total + prec_total).max(t);
    }

    // Bubbles over the longest allowed cycle.
    let cap = opts.horizon_cap;
    let horizon_end = period * cap as f64;
    let unrolled = crate::schedule::unroll(&template, period, cap, topo.device_groups());
    let mut placer = Placer {
        free: unrolled
            .timelines
            .iter()
            .map(|tl| idle_intervals(tl, 0.0, horizon_end))
            .collect(),
        busy: unrolled
            .timelines
            .iter()
            .map(|tl| {
                tl.iter()
                    .filter(|it| it.duration > 0.0)
                    .map(|it| (it.start, it.end()))
                    .collect()
            })
            .collect(),
        horizon_end,
    };

    // End time of every pipeline op in the first step, per device.
    let mut pipe_end: HashMap<(usize, WorkKind, usize, usize), f64> = HashMap::new();
    for it in template.iter().flatten() {
        if let Some(m) = it.micro_batch {
            pipe_end.insert((it.device, it.kind, it.stage, m), it.end());
        }
    }

    // Inversion parallelism keeps only the owning replica's inversion.
    let keep: Vec<bool> = queue
        .works
        .iter()
        .map(|w| {
            let it = &w.item;
            if it.kind != WorkKind::Inversion {
                return true;
            }
            let index = 2 * it.layer.unwrap_or(0) + usize::from(it.factor == Some(Factor::B));
            owns_inversion(&topo, opts, it.stage, it.device, index)
        })
        .collect();

    let total = queue.works.len();
    let mut placed: Vec<Option<WorkItem>> = vec![None; total];
    let mut pending: Vec<usize> = (0..total).filter(|&i| keep[i]).collect();
    loop {
        let mut best: Option<(f64, f64, usize)> = None;
        for &i in &pending {
            let w = &queue.works[i];
            let ready = match &w.ready {
                Readiness::After { kind, micro_batch } => {
                    match pipe_end.get(&(w.item.device, *kind, w.item.stage, *micro_batch)) {
                        Some(&t) => t,
                        None => {
                            return Err(Error::InvalidConfig(vec![Violation::new(
                                "queue",
                                format!("{} waits on work missing from the base schedule", w.item.label()),
                            )]))
                        }
                    }
                }
                Readiness::AllOf(deps) => {
                    let mut t = 0.0f64;
                    let mut ok = true;
                    for &d in deps {
                        match &placed[d] {
                            Some(p) => t = t.max(p.end()),
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    t
                }
            };
            let Some(start) = placer.fit(w.item.device, ready, w.item.duration) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bs, br, bi)) => start
                    .total_cmp(&bs)
                    .then(ready.total_cmp(&br))
                    .then(priority(&w.item).cmp(&priority(&queue.works[bi].item)))
                    .is_lt(),
            };
            if better {
                best = Some((start, ready, i));
            }
        }
        let Some((start, _, i)) = best else { break };
        let mut item = queue.works[i].item.clone();
        item.start = start;
        item.step = step_of(item.end(), period);
        placer.take(item.device, start, item.duration);
        placed[i] = Some(item);
        pending.retain(|&j| j != i);
    }

    if !pending.is_empty() {
        let unplaced: Vec<WorkItem> = pending.iter().map(|&i| queue.works[i].item.clone()).collect();
        let deficit = unplaced.iter().map(|it| it.duration).sum();
        return Err(Error::Infeasible {
            unplaced,
            deficit,
            horizon_cap: cap,
        });
    }
    let placed: Vec<WorkItem> = placed.into_iter().flatten().collect();

    // Refresh period per device, then per coupled device group.
    let mut device_steps = vec![1usize; topo.devices()];
    for it in &placed {
        device_steps[it.device] = device_steps[it.device].max(steps_reached(it.end(), period));
    }
    let comp = device_components(&topo);
    let mut comp_steps: HashMap<usize, usize> = HashMap::new();
    for (d, &c) in comp.iter().enumerate() {
        let e = comp_steps.entry(c).or_insert(1);
        *e = (*e).max(device_steps[d]);
    }
    let device_refresh_periods: Vec<usize> = comp.iter().map(|c| comp_steps[c]).collect();
    let stage_refresh_periods: Vec<usize> = (0..config.depth)
        .map(|s| {
            topo.replicas_of(s)
                .iter()
                .map(|&d| device_refresh_periods[d])
                .max()
                .unwrap_or(1)
        })
        .collect();
    let refresh_period = device_refresh_periods.iter().copied().max().unwrap_or(1);
    let horizon = device_refresh_periods.iter().fold(1, |acc, &p| acc / gcd(acc, p) * p);

    // Repeat each group's cycle over a horizon holding whole cycles of all groups.
    let mut timelines: Vec<Vec<WorkItem>> = template
        .iter()
        .enumerate()
        .map(|(device, tl)| {
            let p = device_refresh_periods[device];
            (0..horizon)
                .flat_map(|k| {
                    tl.iter().map(move |it| {
                        let mut it = it.clone();
                        it.start += k as f64 * period;
                        it.step = k;
                        it.prior_inverse = it.kind == WorkKind::Precondition && k < p;
                        it
                    })
                })
                .collect()
        })
        .collect();
    for it in &placed {
        let p = device_refresh_periods[it.device];
        for c in 0..horizon / p {
            let mut it = it.clone();
            it.start += (c * p) as f64 * period;
            it.step += c * p;
            timelines[it.device].push(it);
        }
    }
    for tl in &mut timelines {
        sort_timeline(tl);
    }

    let mut staleness = Vec::new();
    for stage in 0..config.depth {
        for layer in 0..l {
            let completed_step = placed
                .iter()
                .filter(|it| it.kind == WorkKind::Inversion && it.stage == stage && it.layer == Some(layer))
                .map(|it| it.step)
                .max()
                .unwrap_or(0);
            staleness.push(LayerStaleness {
                stage,
                layer,
                completed_step,
                staleness: stage_refresh_periods[stage],
            });
        }
    }

    Ok(FilledSchedule {
        schedule: StaticSchedule {
            timelines,
            period,
            horizon_steps: horizon,
            refresh_period,
            device_groups: topo.device_groups(),
        },
        base_period,
        refresh_period,
        stage_refresh_periods,
        device_refresh_periods,
        staleness,
    })
}

/// Base schedule, queue and assignment in one call.
pub fn fill_bubbles(config: &PipelineConfig, costs: &CostTable, opts: &AssignOptions) -> Result<FilledSchedule> {
    let base = crate::schedule::build_schedule(config, costs, 1)?;
    let queue = enumerate_kfac_works(config, costs)?;
    assign_works(config, costs, &base, &queue, opts)
}

/// Per-layer staleness read back from a filled schedule.
///
/// An inverse finished in step `c` is first used by the precondition of
/// step `c + 1` and last by that of step `c + p`, when the next cycle's
/// inverse takes over, so the staleness is the group's refresh period `p`.
pub fn staleness_report(filled: &FilledSchedule) -> Vec<LayerStaleness> {
    let sched = &filled.schedule;
    let mut by_layer: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for it in sched.items() {
        if it.kind != WorkKind::Inversion {
            continue;
        }
        let p = filled.device_refresh_periods[it.device];
        let layer = it.layer.unwrap_or(0);
        let e = by_layer.entry((it.stage, layer)).or_insert((0, 1));
        if it.step < p {
            e.0 = e.0.max(it.step);
        }
        e.1 = e.1.max(p);
    }
    by_layer
        .into_iter()
        .map(|((stage, layer), (completed_step, p))| LayerStaleness {
            stage,
            layer,
            completed_step,
            staleness: p,
        })
        .collect()
}

/// Checks the assignment rules on a filled schedule: dependency order of
/// every K-FAC work within its cycle, exactly-once placement per cycle,
/// unchanged pipeline timing and precondition placement.
pub fn check_filled(
    filled: &FilledSchedule,
    base: &StaticSchedule,
    queue: &KfacWorkQueue,
    config: &PipelineConfig,
    opts: &AssignOptions,
) -> Vec<Violation> {
    let topo = Topology::new(config);
    let sched = &filled.schedule;
    let period = sched.period;
    let mut out = crate::schedule::validate_schedule(sched, config);

    let cycle_of = |it: &WorkItem| it.step / filled.device_refresh_periods[it.device];
    let tol = |t: f64| EPS * (1.0 + t.abs());

    // Non-interference: pipeline times relative to their step match the base.
    let mut base_start: HashMap<(usize, WorkKind, usize, usize), f64> = HashMap::new();
    for it in base.items().filter(|it| it.step == 0) {
        base_start.insert((it.device, it.kind, it.stage, it.micro_batch.unwrap_or(0)), it.start);
    }
    let mut pipe_end: HashMap<(usize, usize, WorkKind, usize, usize), f64> = HashMap::new();
    let mut last_backward: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for it in sched.items().filter(|it| it.kind.is_pipeline()) {
        let m = it.micro_batch.unwrap_or(0);
        let rel = it.start - it.step as f64 * period;
        match base_start.get(&(it.device, it.kind, it.stage, m)) {
            Some(&b) if (rel - b).abs() <= tol(b) => {}
            other => out.push(Violation::new(
                "non-interference",
                format!("{} in step {} starts at {rel} into the step, base has {other:?}", it.label(), it.step),
            )),
        }
        pipe_end.insert((it.device, it.step, it.kind, it.stage, m), it.end());
        if it.kind == WorkKind::Backward {
            let e = last_backward.entry((it.device, it.step, it.stage)).or_insert(f64::NEG_INFINITY);
            *e = e.max(it.end());
        }
    }

    // Precondition: after the stage's last backward, inside its own step.
    for it in sched.items().filter(|it| it.kind == WorkKind::Precondition) {
        let lb = last_backward.get(&(it.device, it.step, it.stage)).copied();
        if lb.is_none_or(|lb| it.start < lb - tol(lb)) {
            out.push(Violation::new("precondition", format!("{} in step {} precedes its last backward", it.label(), it.step)));
        }
        let limit = (it.step + 1) as f64 * period;
        if it.end() > limit + tol(limit) {
            out.push(Violation::new("precondition", format!("{} in step {} runs into the next step", it.label(), it.step)));
        }
    }

    // Conservation and rule order, per cycle.
    type Key = (usize, WorkKind, usize, Option<usize>, Option<Factor>, Option<usize>, usize);
    let key = |it: &WorkItem, cycle: usize| -> Key {
        (cycle, it.kind, it.stage, it.layer, it.factor, it.micro_batch, it.device)
    };
    let mut placed: HashMap<Key, Vec<&WorkItem>> = HashMap::new();
    for it in sched.items().filter(|it| it.kind.is_queued()) {
        placed.entry(key(it, cycle_of(it))).or_default().push(it);
    }
    let expected: Vec<&QueuedWork> = queue
        .works
        .iter()
        .filter(|w| {
            let it = &w.item;
            it.kind != WorkKind::Inversion || {
                let index = 2 * it.layer.unwrap_or(0) + usize::from(it.factor == Some(Factor::B));
                owns_inversion(&topo, opts, it.stage, it.device, index)
            }
        })
        .collect();
    let mut expected_count = 0usize;
    for w in &expected {
        let p = filled.device_refresh_periods[w.item.device];
        for c in 0..sched.horizon_steps / p {
            expected_count += 1;
            let Some(found) = placed.get(&key(&w.item, c)) else {
                out.push(Violation::new("conservation", format!("{} missing from cycle {c}", w.item.label())));
                continue;
            };
            if found.len() != 1 {
                out.push(Violation::new(
                    "conservation",
                    format!("{} placed {} times in cycle {c}", w.item.label(), found.len()),
                ));
            }
            let it = found[0];
            if (it.duration - w.item.duration).abs() > tol(w.item.duration) {
                out.push(Violation::new("conservation", format!("{} has duration {}", it.label(), it.duration)));
            }
            let first_step = c * p;
            let ready = match &w.ready {
                Readiness::After { kind, micro_batch } => pipe_end
                    .get(&(it.device, first_step, *kind, it.stage, *micro_batch))
                    .copied(),
                Readiness::AllOf(deps) => deps
                    .iter()
                    .map(|&d| {
                        let dep = &queue.works[d].item;
                        placed
                            .get(&key(dep, first_step / filled.device_refresh_periods[dep.device]))
                            .and_then(|v| v.first())
                            .map(|d| d.end())
                    })
                    .try_fold(f64::NEG_INFINITY, |acc, e| e.map(|e| acc.max(e))),
            };
            match ready {
                Some(r) if it.start >= r - tol(r) => {}
                Some(r) => out.push(Violation::new(
                    "rule-order",
                    format!("{} starts at {} before its inputs are ready at {r}", it.label(), it.start),
                )),
                None => out.push(Violation::new("rule-order", format!("{} has unresolved inputs", it.label()))),
            }
        }
    }
    let total: usize = placed.values().map(Vec::len).sum();
    if total != expected_count {
        out.push(Violation::new(
            "conservation",
            format!("{total} K-FAC works placed, {expected_count} expected"),
        ));
    }
    out
}
