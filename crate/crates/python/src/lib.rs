//! Python bindings: pipeline configs and cost tables, schedule simulation,
//! bubble filling, the performance model and the numeric K-FAC checks.

use std::path::PathBuf;

use kfac_pipe::bubblefill::{self, AssignOptions};
use kfac_pipe::kfac::{self, ConvergenceFixture, Optimizer, ToyConfig};
use kfac_pipe::perfmodel::{self, ArchSpec, DeviceSpec};
use kfac_pipe::schedule::{self, schedule_metrics};
use kfac_pipe::trace::{trace_events, trace_json, TraceWindow};
use kfac_pipe::{config, CommModel, Error, Method, StaticSchedule};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(kfac_pipe_py, InfeasibleError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Infeasible { .. } => InfeasibleError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NotPositiveDefinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "PipelineConfig", module = "kfac_pipe_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: kfac_pipe::PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (method, depth, micro_batches, micro_batch_size=1, replicas=None, layers_per_stage=1, seq_len=128, recompute=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        depth: usize,
        micro_batches: usize,
        micro_batch_size: usize,
        replicas: Option<usize>,
        layers_per_stage: usize,
        seq_len: usize,
        recompute: bool,
    ) -> PyResult<Self> {
        let mut c = kfac_pipe::PipelineConfig::new(parse_method(method)?, depth, micro_batches)
            .with_micro_batch_size(micro_batch_size)
            .with_layers(layers_per_stage)
            .with_seq_len(seq_len)
            .with_recompute(recompute);
        if let Some(w) = replicas {
            c = c.with_replicas(w);
        }
        c.validate().map_err(to_py)?;
        Ok(PyConfig { inner: c })
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn micro_batches(&self) -> usize {
        self.inner.micro_batches
    }

    #[getter]
    fn micro_batch_size(&self) -> usize {
        self.inner.micro_batch_size
    }

    #[getter]
    fn replicas(&self) -> usize {
        self.inner.replicas
    }

    #[getter]
    fn devices(&self) -> usize {
        self.inner.devices
    }

    #[getter]
    fn mini_batch(&self) -> usize {
        self.inner.mini_batch()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "PipelineConfig(method='{}', depth={}, micro_batches={}, micro_batch_size={}, replicas={})",
            c.method, c.depth, c.micro_batches, c.micro_batch_size, c.replicas
        )
    }
}

#[pyclass(name = "CostTable", module = "kfac_pipe_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCosts {
    inner: kfac_pipe::CostTable,
}

#[pymethods]
impl PyCosts {
    #[new]
    #[pyo3(signature = (t_f, t_b, t_curv=0.0, t_inv=0.0, t_prec=0.0, comm_alpha=0.0, comm_beta=f64::INFINITY))]
    fn new(t_f: f64, t_b: f64, t_curv: f64, t_inv: f64, t_prec: f64, comm_alpha: f64, comm_beta: f64) -> PyResult<Self> {
        let mut c = kfac_pipe::CostTable::uniform(t_f, t_b).with_kfac(t_curv, t_inv, t_prec);
        c.comm = CommModel::new(comm_alpha, comm_beta);
        c.validate().map_err(to_py)?;
        Ok(PyCosts { inner: c })
    }

    /// Stage costs of BERT-style blocks from a FLOP model.
    #[staticmethod]
    #[pyo3(signature = (arch, micro_batch_size, device="p100", layers=1, seq_len=None))]
    fn analytic(arch: &str, micro_batch_size: usize, device: &str, layers: usize, seq_len: Option<usize>) -> PyResult<Self> {
        let mut a = ArchSpec::preset(arch).ok_or_else(|| PyValueError::new_err(format!("unknown architecture `{arch}`")))?;
        if let Some(s) = seq_len {
            a = a.with_seq_len(s);
        }
        let d = DeviceSpec::preset(device).ok_or_else(|| PyValueError::new_err(format!("unknown device `{device}`")))?;
        Ok(PyCosts {
            inner: perfmodel::analytic_costs(&a, micro_batch_size, &d, layers),
        })
    }

    #[getter]
    fn t_f(&self) -> f64 {
        self.inner.t_f
    }

    #[getter]
    fn t_b(&self) -> f64 {
        self.inner.t_b
    }

    #[getter]
    fn t_curv(&self) -> f64 {
        self.inner.t_curv
    }

    #[getter]
    fn t_inv(&self) -> f64 {
        self.inner.t_inv
    }

    #[getter]
    fn t_prec(&self) -> f64 {
        self.inner.t_prec
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "CostTable(t_f={}, t_b={}, t_curv={}, t_inv={}, t_prec={})",
            c.t_f, c.t_b, c.t_curv, c.t_inv, c.t_prec
        )
    }
}

fn items_of<'py>(py: Python<'py>, s: &StaticSchedule) -> PyResult<Vec<Bound<'py, PyDict>>> {
    s.items()
        .map(|it| {
            let d = PyDict::new(py);
            d.set_item("label", it.label())?;
            d.set_item("kind", it.kind.category())?;
            d.set_item("stage", it.stage)?;
            d.set_item("device", it.device)?;
            d.set_item("micro_batch", it.micro_batch)?;
            d.set_item("layer", it.layer)?;
            d.set_item("start", it.start)?;
            d.set_item("duration", it.duration)?;
            d.set_item("step", it.step)?;
            Ok(d)
        })
        .collect()
}

fn window(device: Option<usize>, steps: Option<usize>) -> TraceWindow {
    let mut w = TraceWindow::all();
    if let Some(d) = device {
        w = w.device(d);
    }
    if let Some(n) = steps {
        w = w.steps(0..n);
    }
    w
}

#[pyclass(name = "Schedule", module = "kfac_pipe_py", frozen)]
struct PySchedule {
    inner: StaticSchedule,
}

#[pymethods]
impl PySchedule {
    #[getter]
    fn makespan(&self) -> f64 {
        schedule_metrics(&self.inner).makespan
    }

    #[getter]
    fn period(&self) -> f64 {
        self.inner.period
    }

    #[getter]
    fn utilization(&self) -> f64 {
        schedule_metrics(&self.inner).utilization
    }

    #[getter]
    fn devices(&self) -> usize {
        self.inner.devices()
    }

    /// Every work item as a dict, device by device.
    fn items<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        items_of(py, &self.inner)
    }

    /// Per-device idle intervals as `(start, end)` pairs.
    fn bubbles(&self) -> Vec<Vec<(f64, f64)>> {
        schedule::extract_bubbles(&self.inner).intervals
    }

    #[pyo3(signature = (device=None, steps=None))]
    fn trace_json(&self, device: Option<usize>, steps: Option<usize>) -> String {
        trace_json(&trace_events(&self.inner, &window(device, steps)))
    }
}

#[pyclass(name = "FilledSchedule", module = "kfac_pipe_py", frozen)]
struct PyFilled {
    inner: bubblefill::FilledSchedule,
}

#[pymethods]
impl PyFilled {
    #[getter]
    fn period(&self) -> f64 {
        self.inner.schedule.period
    }

    #[getter]
    fn base_period(&self) -> f64 {
        self.inner.base_period
    }

    #[getter]
    fn refresh_period(&self) -> usize {
        self.inner.refresh_period
    }

    #[getter]
    fn stage_refresh_periods(&self) -> Vec<usize> {
        self.inner.stage_refresh_periods.clone()
    }

    #[getter]
    fn utilization(&self) -> f64 {
        self.inner.utilization()
    }

    /// `(stage, layer, completed_step, staleness)` per layer.
    fn staleness(&self) -> Vec<(usize, usize, usize, usize)> {
        self.inner
            .staleness
            .iter()
            .map(|s| (s.stage, s.layer, s.completed_step, s.staleness))
            .collect()
    }

    fn items<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        items_of(py, &self.inner.schedule)
    }

    #[pyo3(signature = (device=None, steps=None))]
    fn trace_json(&self, device: Option<usize>, steps: Option<usize>) -> String {
        trace_json(&trace_events(&self.inner.schedule, &window(device, steps)))
    }
}

#[pyfunction]
#[pyo3(signature = (config, costs, steps=1))]
fn build_schedule(config: &PyConfig, costs: &PyCosts, steps: usize) -> PyResult<PySchedule> {
    let inner = schedule::build_schedule(&config.inner, &costs.inner, steps).map_err(to_py)?;
    Ok(PySchedule { inner })
}

#[pyfunction]
#[pyo3(signature = (config, costs, inversion_parallel=false, horizon_cap=10))]
fn fill_bubbles(config: &PyConfig, costs: &PyCosts, inversion_parallel: bool, horizon_cap: usize) -> PyResult<PyFilled> {
    let opts = AssignOptions {
        inversion_parallel,
        horizon_cap,
    };
    let inner = bubblefill::fill_bubbles(&config.inner, &costs.inner, &opts).map_err(to_py)?;
    Ok(PyFilled { inner })
}

/// Closed-form timing, memory and K-FAC overheads as a dict.
#[pyfunction]
fn perf_report<'py>(py: Python<'py>, config: &PyConfig, costs: &PyCosts) -> PyResult<Bound<'py, PyDict>> {
    let r = perfmodel::perf_report(&config.inner, &costs.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("c_f", r.c_f)?;
    d.set_item("c_b", r.c_b)?;
    d.set_item("t_pipe", r.t_pipe)?;
    d.set_item("t_bubble", r.t_bubble)?;
    d.set_item("m_pipe", r.m_pipe)?;
    d.set_item("t_kfac_plus", r.t_kfac_plus)?;
    d.set_item("m_kfac_plus", r.m_kfac_plus)?;
    d.set_item("utilization", r.utilization)?;
    d.set_item("throughput", r.throughput)?;
    d.set_item("ratio", r.ratio)?;
    d.set_item("refresh_period", r.refresh_period)?;
    d.set_item("speedup_vs_skip", r.speedup_vs_skip)?;
    Ok(d)
}

/// Reads a TOML input file into `(PipelineConfig, CostTable)`.
#[pyfunction]
fn load_inputs(path: PathBuf) -> PyResult<(PyConfig, PyCosts)> {
    let i = config::load_inputs(&path).map_err(to_py)?;
    Ok((PyConfig { inner: i.config }, PyCosts { inner: i.costs }))
}

/// `(name, error, tolerance, passed)` for every numeric oracle comparison.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn kfac_verify(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let checks = kfac::verify_all(seed).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name, c.error, c.tolerance, c.passed)).collect())
}

/// Loss per step on the ill-conditioned toy regression.
#[pyfunction]
#[pyo3(signature = (optimizer="kfac", lr=None, damping=1e-3, refresh_period=5, steps=ConvergenceFixture::MAX_STEPS, target_loss=Some(ConvergenceFixture::TARGET_LOSS)))]
fn train_toy(
    optimizer: &str,
    lr: Option<f64>,
    damping: f64,
    refresh_period: usize,
    steps: usize,
    target_loss: Option<f64>,
) -> PyResult<Vec<f64>> {
    let (opt, default_lr) = match optimizer {
        "kfac" => (
            Optimizer::Kfac {
                damping,
                refresh_period,
            },
            1e-3,
        ),
        "gd" => (Optimizer::Gd, 1.9),
        other => return Err(PyValueError::new_err(format!("unknown optimizer `{other}` (kfac or gd)"))),
    };
    let mut cfg = ToyConfig::ill_conditioned_regression(opt, lr.unwrap_or(default_lr), steps);
    cfg.target_loss = target_loss;
    Ok(kfac::train_toy(&cfg).map_err(to_py)?.losses())
}

#[pymodule]
fn kfac_pipe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCosts>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyFilled>()?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(fill_bubbles, m)?)?;
    m.add_function(wrap_pyfunction!(perf_report, m)?)?;
    m.add_function(wrap_pyfunction!(load_inputs, m)?)?;
    m.add_function(wrap_pyfunction!(kfac_verify, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    Ok(())
}
