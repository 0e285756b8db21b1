//! Bias-free fully connected networks with a recorded forward/backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `1/2 |y_hat - y|^2` averaged over the batch.
    HalfMse,
    /// Softmax cross-entropy against target probabilities, averaged over the batch.
    SoftmaxCrossEntropy,
}

/// `x -> phi_L(theta_L ... phi_1(theta_1 x))`, weights `d_out x d_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyMlp {
    pub weights: Vec<Mat>,
    pub activations: Vec<Activation>,
    pub loss: Loss,
}

impl TinyMlp {
    pub fn new(weights: Vec<Mat>, activations: Vec<Activation>, loss: Loss) -> Result<Self> {
        let mlp = TinyMlp {
            weights,
            activations,
            loss,
        };
        mlp.check()?;
        Ok(mlp)
    }

    /// Layer widths `dims[0] -> dims[1] -> ...`, weights N(0, scale^2 / d_in).
    pub fn random<R: Rng>(dims: &[usize], activation: Activation, loss: Loss, scale: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("a network needs at least an input and an output width".into()));
        }
        let layers = dims.len() - 1;
        let weights = (0..layers)
            .map(|l| Mat::random(dims[l + 1], dims[l], rng).scale(scale / (dims[l] as f64).sqrt()))
            .collect();
        let mut activations = vec![activation; layers];
        activations[layers - 1] = Activation::Identity;
        TinyMlp::new(weights, activations, loss)
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn d_in(&self) -> usize {
        self.weights.first().map_or(0, Mat::cols)
    }

    pub fn d_out(&self) -> usize {
        self.weights.last().map_or(0, Mat::rows)
    }

    fn check(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if self.activations.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.weights.len()
            )));
        }
        for (l, w) in self.weights.windows(2).enumerate() {
            if w[1].cols() != w[0].rows() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} values but layer {} takes {}",
                    l,
                    w[0].rows(),
                    l + 1,
                    w[1].cols()
                )));
            }
        }
        Ok(())
    }
}

/// Examples as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Mat,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Per-example layer inputs `a` and output errors `e`, both as rows.
/// Errors include the `1/|B|` factor of the batch-mean loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTape {
    pub inputs: Vec<Mat>,
    pub errors: Vec<Mat>,
    pub batch_size: usize,
}

impl BatchTape {
    /// `sum_i e_i a_i^T` for layer `l`.
    pub fn gradient(&self, l: usize) -> Mat {
        self.errors[l].t().matmul(&self.inputs[l])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardBackward {
    pub loss: f64,
    pub grads: Vec<Mat>,
    pub tape: BatchTape,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Batch-mean loss only.
pub fn loss(mlp: &TinyMlp, batch: &Batch) -> Result<f64> {
    forward(mlp, batch).map(|(l, _, _)| l)
}

/// Returns (loss, per-layer inputs, per-layer outputs after activation).
fn forward(mlp: &TinyMlp, batch: &Batch) -> Result<(f64, Vec<Mat>, Vec<Mat>)> {
    mlp.check()?;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.inputs.cols() != mlp.d_in() || batch.targets.cols() != mlp.d_out() || batch.targets.rows() != batch.len() {
        return Err(Error::Shape(format!(
            "batch {:?} -> {:?} does not fit a {} -> {} network",
            batch.inputs.shape(),
            batch.targets.shape(),
            mlp.d_in(),
            mlp.d_out()
        )));
    }
    let n = batch.len() as f64;
    let mut inputs = Vec::with_capacity(mlp.layers());
    let mut outputs = Vec::with_capacity(mlp.layers());
    let mut a = batch.inputs.clone();
    for (w, act) in mlp.weights.iter().zip(&mlp.activations) {
        let s = a.matmul(&w.t());
        let h = s.map(|v| act.apply(v));
        inputs.push(a);
        outputs.push(h.clone());
        a = h;
    }
    let y = &batch.targets;
    let total = match mlp.loss {
        Loss::HalfMse => 0.5 * a.sub(y).map(|v| v * v).sum(),
        Loss::SoftmaxCrossEntropy => (0..a.rows())
            .map(|i| {
                let p = softmax(a.row(i));
                -y.row(i).iter().zip(&p).map(|(t, p)| t * p.ln()).sum::<f64>()
            })
            .sum(),
    };
    Ok((total / n, inputs, outputs))
}

/// Loss, weight gradients and the per-example tape.
pub fn forward_backward(mlp: &TinyMlp, batch: &Batch) -> Result<ForwardBackward> {
    let (loss, inputs, outputs) = forward(mlp, batch)?;
    let n = batch.len() as f64;
    let last = outputs.last().expect("at least one layer");
    let mut upstream = match mlp.loss {
        Loss::HalfMse => last.sub(&batch.targets).scale(1.0 / n),
        Loss::SoftmaxCrossEntropy => {
            let p = Mat::from_fn(last.rows(), last.cols(), |i, j| softmax(last.row(i))[j]);
            p.sub(&batch.targets).scale(1.0 / n)
        }
    };
    let layers = mlp.layers();
    let mut errors = vec![Mat::zeros(0, 0); layers];
    let mut grads = vec![Mat::zeros(0, 0); layers];
    for l in (0..layers).rev() {
        let act = mlp.activations[l];
        let out = &outputs[l];
        let e = Mat::from_fn(out.rows(), out.cols(), |i, j| upstream[(i, j)] * act.grad_from_output(out[(i, j)]));
        grads[l] = e.t().matmul(&inputs[l]);
        upstream = e.matmul(&mlp.weights[l]);
        errors[l] = e;
    }
    Ok(ForwardBackward {
        loss,
        grads,
        tape: BatchTape {
            inputs,
            errors,
            batch_size: batch.len(),
        },
    })
}
