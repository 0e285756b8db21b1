//! Closed-form step time, bubble, memory and K-FAC overhead model, an
//! analytic Transformer cost generator and parameter sweeps.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::build_schedule;
use crate::types::{CostTable, Method, PerfReport, PipelineConfig};

/// Critical-path forward and backward counts `(C_f, C_b)`.
///
/// GPipe and 1F1B: `N + D - 1` each. Chimera has a closed form only at
/// `N = D`; other shapes return [`Error::Unsupported`] and are simulated.
pub fn critical_path_counts(method: Method, depth: usize, micro_batches: usize) -> Result<(usize, usize)> {
    match method {
        Method::GPipe | Method::OneF1B => {
            let c = micro_batches + depth - 1;
            Ok((c, c))
        }
        Method::Chimera if micro_batches == depth => Ok((depth, 2 * depth - 2)),
        Method::Chimera => Err(Error::Unsupported(format!(
            "no closed-form critical path for chimera with N_micro={micro_batches} != D={depth}; simulate instead"
        ))),
    }
}

/// `T_pipe = C_f*T_f + C_b*T_b` and `T_bubble = T_pipe - N*(T_f + T_b)`.
pub fn pipe_time_and_bubble(counts: (usize, usize), costs: &CostTable, micro_batches: usize) -> Result<(f64, f64)> {
    let t_pipe = counts.0 as f64 * costs.t_f + counts.1 as f64 * costs.t_b;
    bubble_of(t_pipe, costs, micro_batches).map(|b| (t_pipe, b))
}

fn bubble_of(t_pipe: f64, costs: &CostTable, micro_batches: usize) -> Result<f64> {
    let bubble = t_pipe - micro_batches as f64 * (costs.t_f + costs.t_b);
    if bubble < -1e-9 * t_pipe.abs().max(1.0) {
        return Err(Error::NegativeBubble(bubble));
    }
    Ok(bubble.max(0.0))
}

/// Backward absorbs one extra forward pass.
pub fn apply_recomputation(costs: &CostTable) -> CostTable {
    let mut c = costs.clone();
    c.t_b += c.t_f;
    c
}

/// Step timing of the vanilla pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipeTiming {
    pub counts: Option<(usize, usize)>,
    pub t_pipe: f64,
    pub t_bubble: f64,
}

/// Closed form where one exists, schedule simulation otherwise. Recomputation
/// is folded into the backward cost.
pub fn pipe_timing(config: &PipelineConfig, costs: &CostTable) -> Result<PipeTiming> {
    config.validate()?;
    costs.validate()?;
    let eff = if config.recompute {
        apply_recomputation(costs)
    } else {
        costs.clone()
    };
    let n = config.micro_batches;
    match critical_path_counts(config.method, config.depth, n) {
        Ok(counts) => {
            let (t_pipe, t_bubble) = pipe_time_and_bubble(counts, &eff, n)?;
            Ok(PipeTiming {
                counts: Some(counts),
                t_pipe,
                t_bubble,
            })
        }
        Err(Error::Unsupported(_)) => {
            let single = PipelineConfig {
                recompute: false,
                ..config.clone()
            };
            let t_pipe = build_schedule(&single, &eff, 1)?.period;
            Ok(PipeTiming {
                counts: None,
                t_pipe,
                t_bubble: bubble_of(t_pipe, &eff, n)?,
            })
        }
        Err(e) => Err(e),
    }
}

/// Worst-case memory per device: `2*(D*W/devices)*M_theta + N*M_act + M_err_peak`.
/// With recomputation only one micro-batch's activations are held.
pub fn pipe_memory(config: &PipelineConfig, costs: &CostTable) -> u64 {
    let stages_per_device = (config.depth * config.replicas) / config.devices.max(1);
    let act = if config.recompute {
        costs.m_act
    } else {
        config.micro_batches as u64 * costs.m_act
    };
    2 * stages_per_device as u64 * costs.m_theta + act + costs.m_err_peak
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KfacOverheads {
    /// `N*T_curv + T_inv + T_prec`.
    pub t_kfac_plus: f64,
    /// `M_curv + M_inv + N*M_err_save`.
    pub m_kfac_plus: u64,
    /// `N*T_curv + T_inv`, the part hidden in bubbles.
    pub bubbled_work: f64,
}

pub fn kfac_overheads(config: &PipelineConfig, costs: &CostTable) -> KfacOverheads {
    let n = config.micro_batches;
    let bubbled_work = n as f64 * costs.t_curv + costs.t_inv;
    KfacOverheads {
        t_kfac_plus: bubbled_work + costs.t_prec,
        m_kfac_plus: costs.m_curv + costs.m_inv() + n as u64 * costs.m_err_save,
        bubbled_work,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshRatio {
    pub ratio: f64,
    pub refresh_period: usize,
}

/// `ratio = bubbled_work / T_bubble`, `refresh_period = max(1, ceil(ratio))`.
pub fn refresh_ratio_from(bubbled_work: f64, t_bubble: f64) -> Result<RefreshRatio> {
    if bubbled_work <= 0.0 {
        return Ok(RefreshRatio {
            ratio: 0.0,
            refresh_period: 1,
        });
    }
    if t_bubble <= 0.0 {
        return Err(Error::NoBubble { work: bubbled_work });
    }
    let ratio = bubbled_work / t_bubble;
    Ok(RefreshRatio {
        ratio,
        refresh_period: (ratio.ceil() as usize).max(1),
    })
}

pub fn refresh_ratio(config: &PipelineConfig, costs: &CostTable) -> Result<RefreshRatio> {
    let timing = pipe_timing(config, costs)?;
    refresh_ratio_from(kfac_overheads(config, costs).bubbled_work, timing.t_bubble)
}

/// Sequences per second for `sequences` per step of `step_ms`.
pub fn throughput_at(sequences: f64, step_ms: f64) -> f64 {
    sequences / (step_ms / 1000.0)
}

/// Every pipeline group pushes `N*B` sequences per step; with K-FAC the step
/// grows by the preconditioning time.
pub fn throughput(config: &PipelineConfig, costs: &CostTable, with_kfac: bool) -> Result<f64> {
    let t = pipe_timing(config, costs)?;
    let step = t.t_pipe + if with_kfac { costs.t_prec } else { 0.0 };
    let seqs = (config.pipeline_groups() * config.micro_batches * config.micro_batch_size) as f64;
    Ok(throughput_at(seqs, step))
}

/// Fractional step-time increase from preconditioning.
pub fn step_overhead(t_pipe: f64, t_prec: f64) -> f64 {
    (t_pipe + t_prec) / t_pipe - 1.0
}

/// `(T_pipe + T_prec + bubbled/period) / (T_pipe + T_prec)`.
pub fn speedup_from(t_pipe: f64, t_prec: f64, bubbled_work: f64, refresh_period: usize) -> f64 {
    let filled = t_pipe + t_prec;
    if bubbled_work <= 0.0 || filled <= 0.0 {
        return 1.0;
    }
    (filled + bubbled_work / refresh_period as f64) / filled
}

/// Step-time ratio of inline K-FAC run once per refresh period over bubble-filled K-FAC.
pub fn speedup_vs_skip(config: &PipelineConfig, costs: &CostTable) -> Result<f64> {
    let t = pipe_timing(config, costs)?;
    let o = kfac_overheads(config, costs);
    let r = refresh_ratio_from(o.bubbled_work, t.t_bubble)?;
    Ok(speedup_from(t.t_pipe, costs.t_prec, o.bubbled_work, r.refresh_period))
}

/// Wall-clock minutes for `steps` steps of `step_seconds` each.
pub fn project_training_time(steps: u64, step_seconds: f64) -> f64 {
    steps as f64 * step_seconds / 60.0
}

/// Every modeled quantity for one configuration.
pub fn perf_report(config: &PipelineConfig, costs: &CostTable) -> Result<PerfReport> {
    let t = pipe_timing(config, costs)?;
    let o = kfac_overheads(config, costs);
    let r = refresh_ratio_from(o.bubbled_work, t.t_bubble)?;
    let utilization = if t.t_pipe > 0.0 {
        1.0 - t.t_bubble / t.t_pipe
    } else {
        1.0
    };
    let seqs = (config.pipeline_groups() * config.micro_batches * config.micro_batch_size) as f64;
    Ok(PerfReport {
        c_f: t.counts.map(|c| c.0),
        c_b: t.counts.map(|c| c.1),
        t_pipe: t.t_pipe,
        t_bubble: t.t_bubble,
        m_pipe: pipe_memory(config, costs),
        t_kfac_plus: o.t_kfac_plus,
        m_kfac_plus: o.m_kfac_plus,
        utilization,
        throughput: throughput_at(seqs, t.t_pipe + costs.t_prec),
        ratio: r.ratio,
        refresh_period: r.refresh_period,
        speedup_vs_skip: speedup_from(t.t_pipe, costs.t_prec, o.bubbled_work, r.refresh_period),
    })
}

/// Transformer block shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default)]
    pub name: String,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub seq_len: usize,
}

impl ArchSpec {
    pub const PRESETS: [&'static str; 6] = ["bert-base", "bert-large", "t5-base", "t5-large", "opt-125m", "opt-350m"];

    pub fn preset(name: &str) -> Option<ArchSpec> {
        let (d_model, d_ff, heads, seq_len) = match name.to_ascii_lowercase().as_str() {
            "bert-base" => (768, 3072, 12, 128),
            "bert-large" => (1024, 4096, 16, 128),
            "t5-base" => (768, 3072, 12, 512),
            "t5-large" => (1024, 4096, 16, 512),
            "opt-125m" => (768, 3072, 12, 2048),
            "opt-350m" => (1024, 4096, 16, 2048),
            _ => return None,
        };
        Some(ArchSpec {
            name: name.to_ascii_lowercase(),
            d_model,
            d_ff,
            heads,
            seq_len,
        })
    }

    pub fn with_seq_len(mut self, s: usize) -> Self {
        self.seq_len = s;
        self
    }

    /// `(d_in, d_out)` of the block's linear layers: Q, K, V, output, FFN in, FFN out.
    pub fn linear_layers(&self) -> [(usize, usize); 6] {
        let (d, f) = (self.d_model, self.d_ff);
        [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d)]
    }
}

/// Accelerator throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    #[serde(default)]
    pub name: String,
    /// FLOP per ms.
    pub flops: f64,
    /// Bytes per ms; not used by the cost model.
    #[serde(default)]
    pub mem_bandwidth: Option<f64>,
}

impl DeviceSpec {
    /// Peak FP32 rates.
    pub fn preset(name: &str) -> Option<DeviceSpec> {
        let tflops = match name.to_ascii_lowercase().as_str() {
            "p100" => 9.3,
            "v100" => 15.7,
            "rtx3090" => 35.6,
            _ => return None,
        };
        Some(DeviceSpec {
            name: name.to_ascii_lowercase(),
            flops: tflops * 1e9,
            mem_bandwidth: None,
        })
    }
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec::preset("p100").expect("preset exists")
    }
}

const BYTES_PER_VALUE: u64 = 4;

/// Stage costs for `layers` Transformer blocks from a FLOP count.
///
/// Curvature, inversion and preconditioning sum both Kronecker factors of
/// all six linear layers per block. Memory terms are fp32 estimates.
pub fn analytic_costs(arch: &ArchSpec, micro_batch_size: usize, device: &DeviceSpec, layers: usize) -> CostTable {
    let (b, s, d, dff) = (
        micro_batch_size as f64,
        arch.seq_len as f64,
        arch.d_model as f64,
        arch.d_ff as f64,
    );
    let l = layers as f64;
    let tokens = b * s;
    let fwd = 2.0 * tokens * (8.0 * d * d + 2.0 * d * dff) + 4.0 * b * s * s * d;
    let mut curv = 0.0;
    let mut inv = 0.0;
    let mut prec = 0.0;
    let mut factor_values = 0u64;
    let mut out_values = 0u64;
    for (i, o) in arch.linear_layers() {
        let (fi, fo) = (i as f64, o as f64);
        curv += tokens * (fi * fi + fo * fo);
        inv += 2.0 / 3.0 * (fi.powi(3) + fo.powi(3));
        prec += 2.0 * (fi * fi * fo + fi * fo * fo);
        factor_values += (i * i + o * o) as u64;
        out_values += o as u64;
    }
    let per = |flop: f64| flop * l / device.flops;
    let (bu, su, du, lu) = (
        micro_batch_size as u64,
        arch.seq_len as u64,
        arch.d_model as u64,
        layers as u64,
    );
    let params: u64 = arch.linear_layers().iter().map(|(i, o)| (i * o) as u64).sum();
    CostTable {
        t_f: per(fwd),
        t_b: per(2.0 * fwd),
        t_curv: per(curv),
        t_inv: per(inv),
        t_prec: per(prec),
        m_theta: lu * params * BYTES_PER_VALUE,
        // Roughly 34 values per token per width plus the attention maps.
        m_act: lu * (34 * bu * su * du + 5 * bu * su * su * arch.heads as u64) * BYTES_PER_VALUE / 2,
        m_err_peak: lu * bu * su * du * BYTES_PER_VALUE,
        m_err_save: lu * bu * su * out_values * BYTES_PER_VALUE,
        m_curv: lu * factor_values * BYTES_PER_VALUE,
        comm: Default::default(),
    }
}

/// FLOP estimate for inverting a `d x d` factor split into `k` diagonal blocks.
pub fn block_inversion_flops(d: usize, k: usize) -> f64 {
    let b = d as f64 / k as f64;
    k as f64 * 2.0 / 3.0 * b.powi(3)
}

/// Cartesian grid of model points. `micro_multipliers` gives `N = m*D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub depths: Vec<usize>,
    pub micro_multipliers: Vec<usize>,
    pub micro_batch_sizes: Vec<usize>,
    pub archs: Vec<ArchSpec>,
    pub devices: Vec<DeviceSpec>,
    pub recompute: Vec<bool>,
    pub layers_per_stage: usize,
}

impl SweepGrid {
    /// BERT-Base, all methods, D in {4..32}, N in {D, 2D, 3D}, B in {1..64}.
    pub fn bert_base() -> Self {
        SweepGrid {
            methods: Method::ALL.to_vec(),
            depths: vec![4, 8, 16, 32],
            micro_multipliers: vec![1, 2, 3],
            micro_batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            archs: vec![ArchSpec::preset("bert-base").expect("preset exists")],
            devices: vec![DeviceSpec::default()],
            recompute: vec![false],
            layers_per_stage: 1,
        }
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for arch in &self.archs {
            for device in &self.devices {
                for &method in &self.methods {
                    for &depth in &self.depths {
                        for &mult in &self.micro_multipliers {
                            for &b in &self.micro_batch_sizes {
                                for &recompute in &self.recompute {
                                    out.push(SweepPoint {
                                        method,
                                        depth,
                                        micro_batches: mult * depth,
                                        micro_batch_size: b,
                                        arch: arch.clone(),
                                        device: device.clone(),
                                        recompute,
                                        layers_per_stage: self.layers_per_stage,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub depth: usize,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
    pub arch: ArchSpec,
    pub device: DeviceSpec,
    pub recompute: bool,
    pub layers_per_stage: usize,
}

impl SweepPoint {
    pub fn config(&self) -> PipelineConfig {
        PipelineConfig::new(self.method, self.depth, self.micro_batches)
            .with_micro_batch_size(self.micro_batch_size)
            .with_layers(self.layers_per_stage)
            .with_seq_len(self.arch.seq_len)
            .with_recompute(self.recompute)
    }

    pub fn costs(&self) -> CostTable {
        analytic_costs(&self.arch, self.micro_batch_size, &self.device, self.layers_per_stage)
    }

    pub fn evaluate(&self) -> Result<PerfReport> {
        perf_report(&self.config(), &self.costs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    /// Report, or the error message for this point.
    pub result: std::result::Result<PerfReport, String>,
}

/// Evaluates every grid point in parallel; rows keep grid order.
pub fn run_sweep(grid: &SweepGrid) -> Vec<SweepRow> {
    grid.points()
        .into_par_iter()
        .map(|point| {
            let result = point.evaluate().map_err(|e| e.to_string());
            SweepRow { point, result }
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "method,D,N_micro,B_micro,S,recompute,T_pipe,T_bubble,M_pipe,T_kfac_plus,M_kfac_plus,utilization,throughput,ratio,refresh_period,speedup_vs_skip";

/// CSV with [`SWEEP_HEADER`]. A failed point carries `error: ...` in its first value column.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for row in rows {
        let p = &row.point;
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            p.method, p.depth, p.micro_batches, p.micro_batch_size, p.arch.seq_len, p.recompute
        );
        match &row.result {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    ",{},{},{},{},{},{},{},{},{},{}",
                    r.t_pipe,
                    r.t_bubble,
                    r.m_pipe,
                    r.t_kfac_plus,
                    r.m_kfac_plus,
                    r.utilization,
                    r.throughput,
                    r.ratio,
                    r.refresh_period,
                    r.speedup_vs_skip
                );
            }
            Err(e) => {
                let _ = writeln!(s, ",\"error: {}\",,,,,,,,,", e.replace('"', "'"));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1 << 30;

    #[test]
    fn critical_paths() {
        assert_eq!(critical_path_counts(Method::GPipe, 4, 4).unwrap(), (7, 7));
        assert_eq!(critical_path_counts(Method::Chimera, 4, 4).unwrap(), (4, 6));
        assert_eq!(critical_path_counts(Method::GPipe, 1, 1).unwrap(), (1, 1));
        assert!(matches!(critical_path_counts(Method::Chimera, 4, 8), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pipe_time_examples() {
        let unit = CostTable::uniform(1.0, 1.0);
        assert_eq!(pipe_time_and_bubble((7, 7), &unit, 4).unwrap(), (14.0, 6.0));
        assert_eq!(pipe_time_and_bubble((4, 6), &unit, 4).unwrap(), (10.0, 2.0));
        assert_eq!(pipe_time_and_bubble((7, 7), &CostTable::uniform(0.0, 0.0), 4).unwrap(), (0.0, 0.0));
        assert!(matches!(pipe_time_and_bubble((2, 2), &unit, 4), Err(Error::NegativeBubble(_))));
    }

    #[test]
    fn memory_examples() {
        let mut c = PipelineConfig::new(Method::GPipe, 8, 8);
        let costs = CostTable {
            m_theta: GB,
            m_act: GB / 2,
            m_err_peak: GB / 4,
            ..CostTable::uniform(1.0, 1.0)
        };
        assert_eq!(pipe_memory(&c, &costs), 6 * GB + GB / 4);
        assert_eq!(pipe_memory(&c, &CostTable::uniform(1.0, 1.0)), 0);
        c.recompute = true;
        assert_eq!(pipe_memory(&c, &costs), 2 * GB + GB / 2 + GB / 4);
    }

    #[test]
    fn kfac_overhead_examples() {
        let c = PipelineConfig::new(Method::GPipe, 4, 4);
        let o = kfac_overheads(&c, &CostTable::uniform(1.0, 1.0).with_kfac(0.3, 2.0, 0.5));
        assert!((o.t_kfac_plus - 3.7).abs() < 1e-12);
        assert!((o.bubbled_work - 3.2).abs() < 1e-12);
        let o = kfac_overheads(&c, &CostTable::uniform(1.0, 1.0));
        assert_eq!((o.t_kfac_plus, o.m_kfac_plus, o.bubbled_work), (0.0, 0, 0.0));
        let mem = CostTable {
            m_curv: GB / 10,
            m_err_save: GB / 20,
            ..CostTable::uniform(1.0, 1.0)
        };
        assert_eq!(kfac_overheads(&c, &mem).m_kfac_plus, 2 * (GB / 10) + 4 * (GB / 20));
    }

    #[test]
    fn refresh_ratio_examples() {
        let r = refresh_ratio_from(3.2, 2.0).unwrap();
        assert_eq!(r.refresh_period, 2);
        assert!((r.ratio - 1.6).abs() < 1e-12);
        assert_eq!(refresh_ratio_from(0.0, 2.0).unwrap(), RefreshRatio { ratio: 0.0, refresh_period: 1 });
        assert!(matches!(refresh_ratio_from(1.0, 0.0), Err(Error::NoBubble { .. })));
    }

    #[test]
    fn throughput_examples() {
        assert!((throughput_at(128.0, 10.0) - 12_800.0).abs() < 1e-9);
        assert!((throughput_at(128.0, 10.5) - 12_190.476_190_476).abs() < 1e-6);
        let c = PipelineConfig::new(Method::GPipe, 4, 4).with_micro_batch_size(32);
        let k = CostTable::uniform(1.0, 1.0);
        assert_eq!(throughput(&c, &k, true).unwrap(), throughput(&c, &k, false).unwrap());
    }

    #[test]
    fn speedup_examples() {
        assert!((speedup_from(10.0, 0.5, 3.2, 2) - 12.1 / 10.5).abs() < 1e-12);
        assert_eq!(speedup_from(10.0, 0.5, 0.0, 1), 1.0);
    }

    #[test]
    fn analytic_cost_scaling() {
        let arch = ArchSpec::preset("bert-base").unwrap();
        let dev = DeviceSpec::default();
        let a = analytic_costs(&arch, 32, &dev, 1);
        let b = analytic_costs(&arch, 64, &dev, 1);
        assert!((b.t_f / a.t_f - 2.0).abs() < 1e-12);
        assert!((b.t_curv / a.t_curv - 2.0).abs() < 1e-12);
        assert_eq!(a.t_inv, b.t_inv);
        let z = analytic_costs(&arch, 0, &dev, 1);
        assert_eq!((z.t_f, z.t_b, z.t_curv), (0.0, 0.0, 0.0));
        assert_eq!(z.t_inv, a.t_inv);
    }

    #[test]
    fn recomputation_examples() {
        assert_eq!(apply_recomputation(&CostTable::uniform(1.0, 2.0)).t_b, 3.0);
        let c = CostTable::uniform(0.0, 2.0);
        assert_eq!(apply_recomputation(&c), c);
        let arch = ArchSpec::preset("bert-base").unwrap();
        let k = analytic_costs(&arch, 8, &DeviceSpec::default(), 1);
        let cfg = PipelineConfig::new(Method::GPipe, 8, 8);
        let plain = refresh_ratio(&cfg, &k).unwrap().ratio;
        let rc = refresh_ratio(&cfg.with_recompute(true), &k).unwrap().ratio;
        assert!(rc < plain);
    }

    #[test]
    fn training_time_projection() {
        assert!((project_training_time(7038, 99.4 * 60.0 / 7038.0) - 99.4).abs() < 1e-9);
        assert!((project_training_time(2961, 48.4 * 60.0 / 2961.0) - 48.4).abs() < 1e-9);
        assert_eq!(project_training_time(0, 1.0), 0.0);
    }

    #[test]
    fn block_split_cuts_inversion_cost() {
        let full = block_inversion_flops(1024, 1);
        assert!((full / block_inversion_flops(1024, 4) - 16.0).abs() < 1e-9);
    }

    #[test]
    fn chimera_off_diagonal_shapes_are_simulated() {
        let c = PipelineConfig::new(Method::Chimera, 4, 8);
        let t = pipe_timing(&c, &CostTable::uniform(1.0, 2.0)).unwrap();
        assert_eq!(t.counts, None);
        assert!(t.t_bubble > 0.0);
    }

    #[test]
    fn sweep_keeps_grid_order() {
        let mut g = SweepGrid::bert_base();
        g.methods = vec![Method::GPipe];
        g.micro_multipliers = vec![1];
        let rows = run_sweep(&g);
        assert_eq!(rows.len(), 4 * 7);
        assert_eq!(rows[0].point.depth, 4);
        assert_eq!(rows[7].point.depth, 8);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), 29);
        g.depths.clear();
        assert!(run_sweep(&g).is_empty());
    }
}
