//! TOML input files: pipeline config, cost table, architecture, device and
//! collective model in one document.
//!
//! ```toml
//! [config]
//! method = "gpipe"          # gpipe | 1f1b | chimera
//! depth = 4
//! micro_batches = 4
//! micro_batch_size = 1      # optional, default 1
//! replicas = 1              # optional, default 1 (2 for chimera)
//! layers_per_stage = 1      # optional
//! seq_len = 128             # optional, default from [arch] or 128
//! recompute = false         # optional
//!
//! [costs]                   # ms per stage; omit to derive from [arch] and [device]
//! t_f = 1.0
//! t_b = 1.0
//! t_curv = 0.5
//! t_inv = 1.0
//! t_prec = 0.25
//!
//! [comm]                    # optional, default alpha = 0, beta = inf
//! alpha = 0.0
//! beta = inf
//!
//! [arch]                    # a preset name, fields, or both
//! preset = "bert-base"
//!
//! [device]
//! preset = "p100"           # or flops = <FLOP per ms>
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::perfmodel::{analytic_costs, ArchSpec, DeviceSpec};
use crate::types::{validate_config, CommModel, CostTable, Method, PipelineConfig, Violation};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSection {
    pub method: Option<Method>,
    pub depth: Option<usize>,
    pub micro_batches: Option<usize>,
    pub micro_batch_size: Option<usize>,
    pub replicas: Option<usize>,
    pub devices: Option<usize>,
    pub layers_per_stage: Option<usize>,
    pub seq_len: Option<usize>,
    pub recompute: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub heads: Option<usize>,
    pub seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub flops: Option<f64>,
    pub mem_bandwidth: Option<f64>,
}

/// A parsed but unvalidated input file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFile {
    #[serde(default)]
    pub config: ConfigSection,
    pub costs: Option<CostTable>,
    pub comm: Option<CommModel>,
    pub arch: Option<ArchSection>,
    pub device: Option<DeviceSection>,
}

impl InputFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            let at = inner
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    let col = s.start - text[..s.start].rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!(" at line {line}, column {col}")
                })
                .unwrap_or_default();
            if path.is_empty() || path == "." {
                Error::Parse(format!("{msg}{at}"))
            } else {
                Error::Parse(format!("`{path}`: {msg}{at}"))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        InputFile::parse(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub config: ConfigSection,
    pub arch: Option<ArchSpec>,
    pub device: Option<DeviceSpec>,
}

/// Fully validated inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub config: PipelineConfig,
    pub costs: CostTable,
    pub arch: Option<ArchSpec>,
    pub device: Option<DeviceSpec>,
}

fn resolve_arch(sec: &ArchSection, v: &mut Vec<Violation>) -> Option<ArchSpec> {
    let base = match &sec.preset {
        Some(p) => match ArchSpec::preset(p) {
            Some(a) => Some(a),
            None => {
                v.push(Violation::new(
                    "arch.preset",
                    format!("unknown preset `{p}` (known: {})", ArchSpec::PRESETS.join(", ")),
                ));
                return None;
            }
        },
        None => None,
    };
    let mut missing = |field: &str, value: Option<usize>, fallback: Option<usize>| match value.or(fallback) {
        Some(x) => x,
        None => {
            v.push(Violation::new(format!("arch.{field}"), "required without a preset"));
            0
        }
    };
    let arch = ArchSpec {
        name: sec
            .name
            .clone()
            .or_else(|| base.as_ref().map(|b| b.name.clone()))
            .unwrap_or_else(|| "custom".into()),
        d_model: missing("d_model", sec.d_model, base.as_ref().map(|b| b.d_model)),
        d_ff: missing("d_ff", sec.d_ff, base.as_ref().map(|b| b.d_ff)),
        heads: missing("heads", sec.heads, base.as_ref().map(|b| b.heads)),
        seq_len: missing("seq_len", sec.seq_len, base.as_ref().map(|b| b.seq_len)),
    };
    Some(arch)
}

fn resolve_device(sec: &DeviceSection, v: &mut Vec<Violation>) -> Option<DeviceSpec> {
    let base = match &sec.preset {
        Some(p) => match DeviceSpec::preset(p) {
            Some(d) => Some(d),
            None => {
                v.push(Violation::new("device.preset", format!("unknown preset `{p}` (known: p100, v100, rtx3090)")));
                return None;
            }
        },
        None => None,
    };
    let flops = match sec.flops.or(base.as_ref().map(|b| b.flops)) {
        Some(f) if f.is_finite() && f > 0.0 => f,
        Some(_) => {
            v.push(Violation::new("device.flops", "must be > 0"));
            return None;
        }
        None => {
            v.push(Violation::new("device.flops", "required without a preset"));
            return None;
        }
    };
    Some(DeviceSpec {
        name: sec
            .name
            .clone()
            .or_else(|| base.as_ref().map(|b| b.name.clone()))
            .unwrap_or_else(|| "custom".into()),
        flops,
        mem_bandwidth: sec.mem_bandwidth.or(base.and_then(|b| b.mem_bandwidth)),
    })
}

/// Looks up an architecture preset, or reads the `[arch]` section of a file.
pub fn arch_from_arg(arg: &str) -> Result<ArchSpec> {
    if let Some(a) = ArchSpec::preset(arg) {
        return Ok(a);
    }
    let file = InputFile::load(Path::new(arg))?;
    let mut v = Vec::new();
    let sec = file
        .arch
        .ok_or_else(|| Error::InvalidConfig(vec![Violation::new("arch", format!("{arg} has no [arch] section"))]))?;
    let arch = resolve_arch(&sec, &mut v);
    match arch {
        Some(a) if v.is_empty() => Ok(a),
        _ => Err(Error::InvalidConfig(v)),
    }
}

/// Looks up a device preset, or reads the `[device]` section of a file.
pub fn device_from_arg(arg: &str) -> Result<DeviceSpec> {
    if let Some(d) = DeviceSpec::preset(arg) {
        return Ok(d);
    }
    let file = InputFile::load(Path::new(arg))?;
    let sec = file.device.ok_or_else(|| {
        Error::InvalidConfig(vec![Violation::new("device", format!("{arg} has no [device] section"))])
    })?;
    let mut v = Vec::new();
    match resolve_device(&sec, &mut v) {
        Some(d) if v.is_empty() => Ok(d),
        _ => Err(Error::InvalidConfig(v)),
    }
}

/// Merges flags over the file over defaults and validates everything,
/// reporting all violations together.
pub fn resolve(file: &InputFile, over: &Overrides) -> Result<Inputs> {
    let mut v = Vec::new();
    let arch = match &over.arch {
        Some(a) => Some(a.clone()),
        None => file.arch.as_ref().and_then(|s| resolve_arch(s, &mut v)),
    };
    let device = match &over.device {
        Some(d) => Some(d.clone()),
        None => file.device.as_ref().and_then(|s| resolve_device(s, &mut v)),
    };

    let (o, f) = (&over.config, &file.config);
    let method = o.method.or(f.method);
    let depth = o.depth.or(f.depth);
    let micro = o.micro_batches.or(f.micro_batches);
    if method.is_none() {
        v.push(Violation::new("config.method", "required (gpipe, 1f1b or chimera)"));
    }
    if depth.is_none() {
        v.push(Violation::new("config.depth", "required"));
    }
    if micro.is_none() {
        v.push(Violation::new("config.micro_batches", "required"));
    }
    let method = method.unwrap_or(Method::GPipe);
    let mut config = PipelineConfig::new(method, depth.unwrap_or(1), micro.unwrap_or(1))
        .with_micro_batch_size(o.micro_batch_size.or(f.micro_batch_size).unwrap_or(1))
        .with_layers(o.layers_per_stage.or(f.layers_per_stage).unwrap_or(1))
        .with_recompute(o.recompute.or(f.recompute).unwrap_or(false))
        .with_seq_len(
            o.seq_len
                .or(f.seq_len)
                .or(arch.as_ref().map(|a| a.seq_len))
                .unwrap_or(128),
        );
    if let Some(w) = o.replicas.or(f.replicas) {
        config = config.with_replicas(w);
    }
    if let Some(d) = o.devices.or(f.devices) {
        config.devices = d;
    }
    if v.iter().all(|x| !x.field.starts_with("config.")) {
        v.extend(validate_config(&config).into_iter().map(|x| Violation::new(format!("config.{}", x.field), x.rule)));
    }

    // An --arch flag asks for analytic costs even when the file has a table.
    let file_costs = if over.arch.is_some() { None } else { file.costs.as_ref() };
    let costs = match file_costs {
        Some(c) => {
            if file.comm.is_some() && c.comm != CommModel::default() {
                v.push(Violation::new("comm", "given both in [comm] and [costs.comm]"));
            }
            let mut c = c.clone();
            if let Some(comm) = file.comm {
                c.comm = comm;
            }
            Some(c)
        }
        None => match (&arch, &device) {
            (Some(a), d) => {
                let mut a = a.clone();
                a.seq_len = config.seq_len;
                let d = d.clone().unwrap_or_default();
                let mut c = analytic_costs(&a, config.micro_batch_size, &d, config.layers_per_stage);
                c.comm = file.comm.unwrap_or_default();
                Some(c)
            }
            (None, _) => {
                v.push(Violation::new("costs", "required unless [arch] is given for analytic costs"));
                None
            }
        },
    };
    if let Some(c) = &costs {
        if let Err(Error::InvalidConfig(cv)) = c.validate() {
            v.extend(cv.into_iter().map(|x| Violation::new(format!("costs.{}", x.field), x.rule)));
        }
    }
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v));
    }
    Ok(Inputs {
        config,
        costs: costs.expect("present when there are no violations"),
        arch,
        device,
    })
}

/// Reads and validates one input file with no overrides.
pub fn load_inputs(path: &Path) -> Result<Inputs> {
    resolve(&InputFile::load(path)?, &Overrides::default())
}
