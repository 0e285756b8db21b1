//! Domain types shared by the schedule generator, the bubble filler and the
//! performance model.
//!
//! Times are milliseconds (`f64`), memory is bytes (`u64`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Synchronous pipeline schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gpipe")]
    GPipe,
    /// 1F1B with pipeline flush.
    #[serde(rename = "1f1b")]
    OneF1B,
    /// Bidirectional pipelines (down + up), two stages per device.
    #[serde(rename = "chimera")]
    Chimera,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GPipe, Method::OneF1B, Method::Chimera];

    pub fn stages_per_device(self) -> usize {
        match self {
            Method::GPipe | Method::OneF1B => 1,
            Method::Chimera => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::GPipe => "gpipe",
            Method::OneF1B => "1f1b",
            Method::Chimera => "chimera",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpipe" => Ok(Method::GPipe),
            "1f1b" | "onef1b" | "1f1b-flush" => Ok(Method::OneF1B),
            "chimera" => Ok(Method::Chimera),
            other => Err(Error::Parse(format!(
                "unknown pipeline method `{other}` (expected gpipe, 1f1b or chimera)"
            ))),
        }
    }
}

/// Shape of one pipeline-parallel training experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    /// Pipeline stages (D).
    pub depth: usize,
    /// Micro-batches per device per iteration (N_micro).
    pub micro_batches: usize,
    /// Sequences per micro-batch (B_micro).
    pub micro_batch_size: usize,
    /// Model replicas per stage (W).
    pub replicas: usize,
    pub devices: usize,
    pub layers_per_stage: usize,
    /// Sequence length in tokens.
    pub seq_len: usize,
    pub recompute: bool,
}

impl PipelineConfig {
    /// A single pipeline group with one layer per stage and unit micro-batch size.
    pub fn new(method: Method, depth: usize, micro_batches: usize) -> Self {
        let replicas = method.stages_per_device();
        PipelineConfig {
            method,
            depth,
            micro_batches,
            micro_batch_size: 1,
            replicas,
            devices: depth * replicas / method.stages_per_device(),
            layers_per_stage: 1,
            seq_len: 128,
            recompute: false,
        }
    }

    pub fn with_micro_batch_size(mut self, b: usize) -> Self {
        self.micro_batch_size = b;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers_per_stage = layers;
        self
    }

    /// Sets W and re-derives the device count.
    pub fn with_replicas(mut self, w: usize) -> Self {
        self.replicas = w;
        self.devices = self.expected_devices();
        self
    }

    pub fn with_recompute(mut self, on: bool) -> Self {
        self.recompute = on;
        self
    }

    pub fn with_seq_len(mut self, s: usize) -> Self {
        self.seq_len = s;
        self
    }

    /// B_mini = B_micro * N_micro * W.
    pub fn mini_batch(&self) -> usize {
        self.micro_batch_size * self.micro_batches * self.replicas
    }

    pub fn expected_devices(&self) -> usize {
        self.depth * self.replicas / self.method.stages_per_device()
    }

    /// Independent pipeline groups that each process N_micro micro-batches per step.
    pub fn pipeline_groups(&self) -> usize {
        (self.replicas / self.method.stages_per_device()).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_config(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

/// One broken configuration rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every [`PipelineConfig`] invariant and reports all violations at once.
pub fn validate_config(config: &PipelineConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let positive = [
        ("depth", config.depth),
        ("micro_batches", config.micro_batches),
        ("micro_batch_size", config.micro_batch_size),
        ("replicas", config.replicas),
        ("layers_per_stage", config.layers_per_stage),
        ("seq_len", config.seq_len),
    ];
    for (field, value) in positive {
        if value < 1 {
            out.push(Violation::new(field, "must be >= 1"));
        }
    }
    if config.method == Method::Chimera {
        if !config.depth.is_multiple_of(2) {
            out.push(Violation::new("depth", "chimera requires an even number of stages (D must be even)"));
        }
        if !config.micro_batches.is_multiple_of(2) {
            out.push(Violation::new(
                "micro_batches",
                "chimera requires N_micro to be a multiple of 2 (two directions)",
            ));
        }
        if !config.replicas.is_multiple_of(2) {
            out.push(Violation::new(
                "replicas",
                "chimera replicates every stage in both directions, W must be even",
            ));
        }
    }
    let spd = config.method.stages_per_device();
    if (config.depth * config.replicas).is_multiple_of(spd) && config.devices != config.expected_devices() {
        out.push(Violation::new(
            "devices",
            format!(
                "must equal D*W/{spd} = {} for {}",
                config.expected_devices(),
                config.method
            ),
        ));
    }
    out
}

/// Latency/bandwidth model for collectives. `bandwidth == None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CommModel {
    /// Latency in ms.
    #[serde(default)]
    pub alpha: f64,
    /// Bytes per ms.
    #[serde(default, deserialize_with = "finite_or_none")]
    pub beta: Option<f64>,
}

impl CommModel {
    /// Collective costs ignored entirely.
    pub const FREE: CommModel = CommModel {
        alpha: 0.0,
        beta: None,
    };

    pub fn new(alpha: f64, beta: f64) -> Self {
        CommModel {
            alpha,
            beta: beta.is_finite().then_some(beta),
        }
    }
}

fn finite_or_none<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    let v = Option::<f64>::deserialize(d)?;
    Ok(v.filter(|b| b.is_finite()))
}

/// Per-stage durations and memory terms.
///
/// `t_curv` is the curvature work of one micro-batch for the whole stage and
/// `t_inv` the inversion work for the whole stage; the bubble filler splits
/// them evenly over the stage's 2*l Kronecker factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub t_f: f64,
    pub t_b: f64,
    #[serde(default)]
    pub t_curv: f64,
    #[serde(default)]
    pub t_inv: f64,
    #[serde(default)]
    pub t_prec: f64,
    #[serde(default)]
    pub m_theta: u64,
    #[serde(default)]
    pub m_act: u64,
    #[serde(default)]
    pub m_err_peak: u64,
    #[serde(default)]
    pub m_err_save: u64,
    #[serde(default)]
    pub m_curv: u64,
    #[serde(default)]
    pub comm: CommModel,
}

impl CostTable {
    /// Forward and backward cost only.
    pub fn uniform(t_f: f64, t_b: f64) -> Self {
        CostTable {
            t_f,
            t_b,
            ..CostTable::default()
        }
    }

    pub fn with_kfac(mut self, t_curv: f64, t_inv: f64, t_prec: f64) -> Self {
        self.t_curv = t_curv;
        self.t_inv = t_inv;
        self.t_prec = t_prec;
        self
    }

    /// Inverse factors occupy as much memory as the factors themselves.
    pub fn m_inv(&self) -> u64 {
        self.m_curv
    }

    pub fn validate(&self) -> Result<()> {
        let times = [
            ("t_f", self.t_f),
            ("t_b", self.t_b),
            ("t_curv", self.t_curv),
            ("t_inv", self.t_inv),
            ("t_prec", self.t_prec),
            ("comm.alpha", self.comm.alpha),
        ];
        let mut v: Vec<Violation> = times
            .iter()
            .filter(|(_, t)| !(t.is_finite() && *t >= 0.0))
            .map(|(f, _)| Violation::new(*f, "must be a finite duration >= 0"))
            .collect();
        if let Some(b) = self.comm.beta {
            if b <= 0.0 {
                v.push(Violation::new("comm.beta", "bandwidth must be > 0"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkKind {
    Forward,
    Backward,
    Recompute,
    Curvature,
    Inversion,
    Precondition,
    SyncGrad,
    SyncCurvature,
}

impl WorkKind {
    pub fn category(self) -> &'static str {
        match self {
            WorkKind::Forward => "forward",
            WorkKind::Backward => "backward",
            WorkKind::Recompute => "recompute",
            WorkKind::Curvature => "curvature",
            WorkKind::Inversion => "inversion",
            WorkKind::Precondition => "precondition",
            WorkKind::SyncGrad => "sync-grad",
            WorkKind::SyncCurvature => "sync-curvature",
        }
    }

    /// Forward, backward and recompute: the work of the vanilla pipeline.
    pub fn is_pipeline(self) -> bool {
        matches!(self, WorkKind::Forward | WorkKind::Backward | WorkKind::Recompute)
    }

    /// Work drawn from the K-FAC queue and packed into bubbles.
    pub fn is_queued(self) -> bool {
        matches!(
            self,
            WorkKind::Curvature | WorkKind::Inversion | WorkKind::SyncCurvature
        )
    }
}

/// Kronecker factor tag: A (input side) or B (output-gradient side).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub const BOTH: [Factor; 2] = [Factor::A, Factor::B];
}

/// One unit of work placed on a device timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub kind: WorkKind,
    pub stage: usize,
    pub micro_batch: Option<usize>,
    /// Layer index within the stage.
    pub layer: Option<usize>,
    pub factor: Option<Factor>,
    pub device: usize,
    pub start: f64,
    pub duration: f64,
    pub step: usize,
    /// Precondition of the first refresh cycle, run with previously computed inverses.
    #[serde(default)]
    pub prior_inverse: bool,
}

impl WorkItem {
    pub fn new(kind: WorkKind, stage: usize, device: usize) -> Self {
        WorkItem {
            kind,
            stage,
            micro_batch: None,
            layer: None,
            factor: None,
            device,
            start: 0.0,
            duration: 0.0,
            step: 0,
            prior_inverse: false,
        }
    }

    pub fn micro(mut self, m: usize) -> Self {
        self.micro_batch = Some(m);
        self
    }

    pub fn layer_factor(mut self, layer: usize, factor: Option<Factor>) -> Self {
        self.layer = Some(layer);
        self.factor = factor;
        self
    }

    pub fn at(mut self, start: f64, duration: f64) -> Self {
        self.start = start;
        self.duration = duration;
        self
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn label(&self) -> String {
        let mut s = String::from(match self.kind {
            WorkKind::Forward => "F",
            WorkKind::Backward => "B",
            WorkKind::Recompute => "R",
            WorkKind::Curvature => "curv",
            WorkKind::Inversion => "inv",
            WorkKind::Precondition => "prec",
            WorkKind::SyncGrad => "sync-grad",
            WorkKind::SyncCurvature => "sync-curv",
        });
        s.push_str(&format!(" s{}", self.stage));
        if let Some(l) = self.layer {
            s.push_str(&format!(" l{l}"));
        }
        if let Some(f) = self.factor {
            s.push_str(&format!(" {f:?}"));
        }
        if let Some(m) = self.micro_batch {
            s.push_str(&format!(" m{m}"));
        }
        s
    }
}

/// Per-device timelines over an unrolled horizon of pipeline steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSchedule {
    pub timelines: Vec<Vec<WorkItem>>,
    /// Duration of one steady-state step.
    pub period: f64,
    pub horizon_steps: usize,
    pub refresh_period: usize,
    /// Pipeline group of each device (trace `pid`).
    #[serde(default)]
    pub device_groups: Vec<usize>,
}

impl StaticSchedule {
    pub fn devices(&self) -> usize {
        self.timelines.len()
    }

    /// Length of the unrolled horizon.
    pub fn span(&self) -> f64 {
        self.period * self.horizon_steps as f64
    }

    pub fn items(&self) -> impl Iterator<Item = &WorkItem> {
        self.timelines.iter().flatten()
    }

    pub fn group_of(&self, device: usize) -> usize {
        self.device_groups.get(device).copied().unwrap_or(0)
    }
}

/// Direction of a Chimera pipeline. GPipe and 1F1B only use `Down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Down,
    Up,
}

/// Stage-to-device placement for a configuration.
///
/// GPipe/1F1B: replica `r` of stage `s` lives on device `s*W + r`.
/// Chimera: group `g` owns devices `g*D .. (g+1)*D`; the down pipeline puts
/// stage `s` on local device `s`, the up pipeline on local device `D-1-s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub method: Method,
    pub depth: usize,
    pub replicas: usize,
}

impl Topology {
    pub fn new(config: &PipelineConfig) -> Self {
        Topology {
            method: config.method,
            depth: config.depth,
            replicas: config.replicas,
        }
    }

    pub fn groups(&self) -> usize {
        (self.replicas / self.method.stages_per_device()).max(1)
    }

    pub fn devices(&self) -> usize {
        self.groups() * self.depth
    }

    /// Global device for a group-local device index.
    pub fn device(&self, group: usize, local: usize) -> usize {
        match self.method {
            Method::GPipe | Method::OneF1B => local * self.groups() + group,
            Method::Chimera => group * self.depth + local,
        }
    }

    pub fn group_of(&self, device: usize) -> usize {
        match self.method {
            Method::GPipe | Method::OneF1B => device % self.groups(),
            Method::Chimera => device / self.depth,
        }
    }

    pub fn local_of(&self, device: usize) -> usize {
        match self.method {
            Method::GPipe | Method::OneF1B => device / self.groups(),
            Method::Chimera => device % self.depth,
        }
    }

    /// Group-local device running `stage` in `dir`.
    pub fn local_device(&self, stage: usize, dir: Direction) -> usize {
        match dir {
            Direction::Down => stage,
            Direction::Up => self.depth - 1 - stage,
        }
    }

    /// Stages hosted by a device, down pipeline first.
    pub fn stages_on(&self, device: usize) -> Vec<(usize, Direction)> {
        let local = self.local_of(device);
        match self.method {
            Method::GPipe | Method::OneF1B => vec![(local, Direction::Down)],
            Method::Chimera => vec![
                (local, Direction::Down),
                (self.depth - 1 - local, Direction::Up),
            ],
        }
    }

    /// All devices holding a replica of `stage`, ordered by group then direction.
    pub fn replicas_of(&self, stage: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for g in 0..self.groups() {
            out.push(self.device(g, self.local_device(stage, Direction::Down)));
            if self.method == Method::Chimera {
                out.push(self.device(g, self.local_device(stage, Direction::Up)));
            }
        }
        out
    }

    /// Micro-batches that `device` pushes through `stage` in one step.
    pub fn micro_batches_of(&self, stage: usize, device: usize, n: usize) -> std::ops::Range<usize> {
        match self.method {
            Method::GPipe | Method::OneF1B => 0..n,
            Method::Chimera if self.local_of(device) == stage => 0..n / 2,
            Method::Chimera => n / 2..n,
        }
    }

    pub fn hosts(&self, device: usize, stage: usize) -> bool {
        self.stages_on(device).iter().any(|(s, _)| *s == stage)
    }

    pub fn device_groups(&self) -> Vec<usize> {
        (0..self.devices()).map(|d| self.group_of(d)).collect()
    }
}

/// Everything the performance model reports for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    /// Critical-path forward count; `None` when only simulation applies.
    pub c_f: Option<usize>,
    pub c_b: Option<usize>,
    pub t_pipe: f64,
    pub t_bubble: f64,
    pub m_pipe: u64,
    pub t_kfac_plus: f64,
    pub m_kfac_plus: u64,
    pub utilization: f64,
    /// Sequences per second with bubble-filled K-FAC.
    pub throughput: f64,
    /// (curvature + inversion) / bubble.
    pub ratio: f64,
    pub refresh_period: usize,
    pub speedup_vs_skip: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig3_setup_is_valid() {
        let c = PipelineConfig::new(Method::GPipe, 4, 4)
            .with_micro_batch_size(32)
            .with_layers(3);
        assert!(validate_config(&c).is_empty());
        assert_eq!(c.mini_batch(), 128);
    }

    #[test]
    fn chimera_odd_depth_is_rejected() {
        let c = PipelineConfig::new(Method::Chimera, 3, 3);
        let v = validate_config(&c);
        assert!(v.iter().any(|v| v.field == "depth" && v.rule.contains("even")));
        assert!(v.iter().any(|v| v.field == "micro_batches"));
    }

    #[test]
    fn zero_depth_is_rejected() {
        let mut c = PipelineConfig::new(Method::GPipe, 0, 4);
        c.devices = 0;
        let v = validate_config(&c);
        assert_eq!(v, vec![Violation::new("depth", "must be >= 1")]);
    }

    #[test]
    fn chimera_eight_stages_on_eight_devices() {
        let c = PipelineConfig::new(Method::Chimera, 8, 8);
        assert_eq!(c.replicas, 2);
        assert_eq!(c.devices, 8);
        assert!(validate_config(&c).is_empty());
        let mut bad = c.clone();
        bad.devices = 4;
        assert_eq!(validate_config(&bad)[0].field, "devices");
    }

    #[test]
    fn topology_places_replicas() {
        let c = PipelineConfig::new(Method::GPipe, 4, 4).with_replicas(2);
        let t = Topology::new(&c);
        assert_eq!(t.devices(), 8);
        assert_eq!(t.replicas_of(0), vec![0, 1]);
        assert_eq!(t.replicas_of(3), vec![6, 7]);
        assert_eq!(t.group_of(7), 1);

        let c = PipelineConfig::new(Method::Chimera, 8, 8);
        let t = Topology::new(&c);
        assert_eq!(t.replicas_of(0), vec![0, 7]);
        assert_eq!(t.replicas_of(3), vec![3, 4]);
        assert_eq!(t.stages_on(0), vec![(0, Direction::Down), (7, Direction::Up)]);
    }

    #[test]
    fn infinite_bandwidth_deserializes_as_unlimited() {
        let c: CommModel = toml::from_str("alpha = 0.5\nbeta = inf").unwrap();
        assert_eq!(c, CommModel { alpha: 0.5, beta: None });
    }
}
