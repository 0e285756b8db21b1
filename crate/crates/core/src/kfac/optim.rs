//! K-FAC optimizer state and the natural-gradient update with stale inverses.

use serde::{Deserialize, Serialize};

use super::factors::{curvature_factors, precondition};
use super::matrix::{cholesky_spd_inverse, Mat};
use super::mlp::{BatchTape, TinyMlp};
use crate::error::{Error, Result};

/// Factors and damped inverses of every layer, with per-layer staleness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacState {
    pub a: Vec<Option<Mat>>,
    pub b: Vec<Option<Mat>>,
    pub a_inv: Vec<Option<Mat>>,
    pub b_inv: Vec<Option<Mat>>,
    /// Updates applied since each layer's inverses were installed.
    pub staleness: Vec<usize>,
    pub damping: f64,
    pub lr: f64,
    /// Set once an update ran without inverses and fell back to the raw gradient.
    pub used_fallback: bool,
}

/// Freshly computed factors and inverses for every layer, not yet installed.
#[derive(Debug, Clone, PartialEq)]
pub struct Refresh {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub a_inv: Vec<Mat>,
    pub b_inv: Vec<Mat>,
}

impl KfacState {
    pub fn new(layers: usize, damping: f64, lr: f64) -> Self {
        KfacState {
            a: vec![None; layers],
            b: vec![None; layers],
            a_inv: vec![None; layers],
            b_inv: vec![None; layers],
            staleness: vec![0; layers],
            damping,
            lr,
            used_fallback: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.staleness.len()
    }

    /// Curvature and inversion work for every layer of `tape`.
    pub fn compute(&self, tape: &BatchTape) -> Result<Refresh> {
        let mut r = Refresh {
            a: Vec::new(),
            b: Vec::new(),
            a_inv: Vec::new(),
            b_inv: Vec::new(),
        };
        for l in 0..self.layers() {
            let (a, b) = curvature_factors(tape, l)?;
            r.a_inv.push(cholesky_spd_inverse(&a, self.damping)?);
            r.b_inv.push(cholesky_spd_inverse(&b, self.damping)?);
            r.a.push(a);
            r.b.push(b);
        }
        Ok(r)
    }

    /// Makes `r` current and resets every staleness counter.
    pub fn install(&mut self, r: Refresh) {
        let layers = self.layers();
        self.a = r.a.into_iter().map(Some).collect();
        self.b = r.b.into_iter().map(Some).collect();
        self.a_inv = r.a_inv.into_iter().map(Some).collect();
        self.b_inv = r.b_inv.into_iter().map(Some).collect();
        self.staleness = vec![0; layers];
    }

    pub fn refresh(&mut self, tape: &BatchTape) -> Result<()> {
        let r = self.compute(tape)?;
        self.install(r);
        Ok(())
    }
}

/// `theta_l -= lr * B_l^-1 G_l A_l^-1`. Layers without inverses take a
/// plain gradient step. Returns the staleness each layer was updated with.
pub fn ngd_step(mlp: &mut TinyMlp, state: &mut KfacState, grads: &[Mat]) -> Result<Vec<usize>> {
    if grads.len() != mlp.layers() || state.layers() != mlp.layers() {
        return Err(Error::Shape(format!(
            "{} gradients and {} optimizer layers for a {}-layer network",
            grads.len(),
            state.layers(),
            mlp.layers()
        )));
    }
    let mut used = Vec::with_capacity(grads.len());
    for (l, g) in grads.iter().enumerate() {
        if g.shape() != mlp.weights[l].shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for layer {l} of shape {:?}",
                g.shape(),
                mlp.weights[l].shape()
            )));
        }
        let step = match (&state.a_inv[l], &state.b_inv[l]) {
            (Some(ai), Some(bi)) => {
                state.staleness[l] += 1;
                precondition(g, ai, bi)?
            }
            _ => {
                state.used_fallback = true;
                g.clone()
            }
        };
        used.push(state.staleness[l]);
        mlp.weights[l].axpy(-state.lr, &step);
    }
    Ok(used)
}
