//! Seeded toy regression problems and a training loop for gradient descent
//! and K-FAC with a configurable refresh period.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::Mat;
use super::mlp::{forward_backward, Activation, Batch, Loss, TinyMlp};
use super::optim::{ngd_step, KfacState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Kfac { damping: f64, refresh_period: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
    pub samples: usize,
    pub data_seed: u64,
    /// Ratio of the largest to the smallest input-covariance eigenvalue.
    pub condition_number: f64,
    /// Initial weight scale; 0 starts from zero weights.
    pub init_scale: f64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Stop once the loss is at or below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

impl ToyConfig {
    /// Single linear layer 8 -> 2 on 256 samples, condition number 1e3.
    pub fn ill_conditioned_regression(optimizer: Optimizer, lr: f64, steps: usize) -> Self {
        ToyConfig {
            dims: vec![8, 2],
            activation: Activation::Identity,
            loss: Loss::HalfMse,
            samples: 256,
            data_seed: 2024,
            condition_number: 1e3,
            init_scale: 0.0,
            steps,
            lr,
            optimizer,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Loss before this step's update.
    pub loss: f64,
    /// Largest inverse staleness used by this step's update (0 without inverses).
    pub staleness: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub max_staleness: usize,
    /// Updates that ran without inverses.
    pub fallback_steps: usize,
}

impl Trajectory {
    /// First step whose loss is at or below `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|p| p.loss <= target).map(|p| p.step)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }

    /// `step,loss,staleness` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,staleness\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:e},{}", p.step, p.loss, p.staleness);
        }
        s
    }
}

/// Orthonormal columns via modified Gram-Schmidt.
fn orthonormal_columns(m: &Mat) -> Result<Mat> {
    let (rows, cols) = m.shape();
    let mut q = m.clone();
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|i| q[(i, j)] * q[(i, k)]).sum();
            for i in 0..rows {
                q[(i, j)] -= dot * q[(i, k)];
            }
        }
        let norm = (0..rows).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Shape("random basis is rank deficient".into()));
        }
        for i in 0..rows {
            q[(i, j)] /= norm;
        }
    }
    Ok(q)
}

/// Inputs with covariance exactly `Q diag(lambda) Q^T` (eigenvalues
/// log-spaced from 1 down to `1/condition_number`) and a linear teacher whose
/// every eigendirection contributes equally to the zero-weight loss.
pub fn toy_problem(cfg: &ToyConfig) -> Result<(TinyMlp, Batch)> {
    let d = *cfg.dims.first().ok_or_else(|| Error::Shape("empty layer widths".into()))?;
    let d_out = *cfg.dims.last().expect("non-empty");
    if cfg.samples < d || d == 0 || cfg.dims.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least one layer and {d} samples to span the input space, got {}",
            cfg.samples
        )));
    }
    if !(cfg.condition_number >= 1.0) {
        return Err(Error::Shape("condition_number must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let q = orthonormal_columns(&Mat::random(d, d, &mut rng))?;
    let eig: Vec<f64> = (0..d)
        .map(|k| {
            let frac = if d == 1 { 0.0 } else { k as f64 / (d - 1) as f64 };
            cfg.condition_number.powf(-frac)
        })
        .collect();
    let n = cfg.samples;
    let z = orthonormal_columns(&Mat::random(n, d, &mut rng))?.scale((n as f64).sqrt());
    let x = z
        .matmul(&Mat::diag(&eig.iter().map(|v| v.sqrt()).collect::<Vec<_>>()))
        .matmul(&q.t());

    // Teacher columns along eigendirection k have norm c / sqrt(lambda_k).
    let c = (2.0 / d as f64).sqrt();
    let mut teacher_eig = Mat::zeros(d_out, d);
    for k in 0..d {
        let u: Vec<f64> = (0..d_out).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (i, ui) in u.iter().enumerate() {
            teacher_eig[(i, k)] = ui / norm * c / eig[k].sqrt();
        }
    }
    let teacher = teacher_eig.matmul(&q.t());
    let mut targets = x.matmul(&teacher.t());
    if cfg.loss == Loss::SoftmaxCrossEntropy {
        targets = Mat::from_fn(n, d_out, |i, j| {
            let row = targets.row(i);
            let best = (0..d_out).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            if j == best {
                1.0
            } else {
                0.0
            }
        });
    }
    let mlp = TinyMlp::random(&cfg.dims, cfg.activation, cfg.loss, cfg.init_scale, &mut rng)?;
    Ok((mlp, Batch { inputs: x, targets }))
}

/// Full-batch training. K-FAC recomputes factors and inverses every
/// `refresh_period` steps and installs them after that step's update, so an
/// inverse serves the next `refresh_period` updates.
pub fn train_toy(cfg: &ToyConfig) -> Result<Trajectory> {
    let (mut mlp, batch) = toy_problem(cfg)?;
    let mut state = match cfg.optimizer {
        Optimizer::Kfac { damping, refresh_period } => {
            if refresh_period == 0 {
                return Err(Error::Shape("refresh_period must be >= 1".into()));
            }
            Some((KfacState::new(mlp.layers(), damping, cfg.lr), refresh_period))
        }
        Optimizer::Gd => None,
    };
    let mut points = Vec::with_capacity(cfg.steps);
    let mut fallback_steps = 0;
    for step in 0..cfg.steps {
        let fb = forward_backward(&mlp, &batch)?;
        if !fb.loss.is_finite() {
            return Err(Error::Diverged { step, loss: fb.loss });
        }
        if cfg.target_loss.is_some_and(|t| fb.loss <= t) {
            points.push(TrajectoryPoint {
                step,
                loss: fb.loss,
                staleness: 0,
            });
            break;
        }
        let staleness = match &mut state {
            None => {
                for (w, g) in mlp.weights.iter_mut().zip(&fb.grads) {
                    w.axpy(-cfg.lr, g);
                }
                0
            }
            Some((st, period)) => {
                let fresh = if step % *period == 0 {
                    Some(st.compute(&fb.tape)?)
                } else {
                    None
                };
                let had_inverses = st.a_inv.iter().all(Option::is_some);
                let used = ngd_step(&mut mlp, st, &fb.grads)?;
                if !had_inverses {
                    fallback_steps += 1;
                }
                if let Some(r) = fresh {
                    st.install(r);
                }
                used.into_iter().max().unwrap_or(0)
            }
        };
        points.push(TrajectoryPoint {
            step,
            loss: fb.loss,
            staleness,
        });
    }
    let max_staleness = points.iter().map(|p| p.staleness).max().unwrap_or(0);
    Ok(Trajectory {
        points,
        max_staleness,
        fallback_steps,
    })
}

/// K-FAC and the best gradient-descent run from a fixed step-size grid, both
/// stopped at `target_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFixture {
    pub target_loss: f64,
    pub gd_grid: Vec<f64>,
    /// Steps each grid point needed, `None` if it never reached the target.
    pub gd_steps_to_target: Vec<Option<usize>>,
    pub gd_best: ToyConfig,
    pub gd_trajectory: Trajectory,
    pub kfac: ToyConfig,
    pub kfac_trajectory: Trajectory,
}

impl ConvergenceFixture {
    pub const TARGET_LOSS: f64 = 1e-3;
    pub const GD_GRID: [f64; 5] = [0.1, 0.3, 1.0, 1.5, 1.9];
    pub const MAX_STEPS: usize = 5000;

    pub fn kfac_config() -> ToyConfig {
        let mut c = ToyConfig::ill_conditioned_regression(
            Optimizer::Kfac {
                damping: 1e-3,
                refresh_period: 5,
            },
            1e-3,
            Self::MAX_STEPS,
        );
        c.target_loss = Some(Self::TARGET_LOSS);
        c
    }

    /// Runs the grid and K-FAC from scratch.
    pub fn generate() -> Result<Self> {
        let mut gd_steps_to_target = Vec::new();
        let mut best: Option<(usize, ToyConfig, Trajectory)> = None;
        for lr in Self::GD_GRID {
            let mut c = ToyConfig::ill_conditioned_regression(Optimizer::Gd, lr, Self::MAX_STEPS);
            c.target_loss = Some(Self::TARGET_LOSS);
            let reached = match train_toy(&c) {
                Ok(t) => {
                    let s = t.steps_to(Self::TARGET_LOSS);
                    if let Some(s) = s {
                        if best.as_ref().is_none_or(|b| s < b.0) {
                            best = Some((s, c, t));
                        }
                    }
                    s
                }
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            gd_steps_to_target.push(reached);
        }
        let (_, gd_best, gd_trajectory) = best.ok_or_else(|| {
            Error::Shape(format!("no step size in {:?} reaches the target", Self::GD_GRID))
        })?;
        let kfac = Self::kfac_config();
        let kfac_trajectory = train_toy(&kfac)?;
        Ok(ConvergenceFixture {
            target_loss: Self::TARGET_LOSS,
            gd_grid: Self::GD_GRID.to_vec(),
            gd_steps_to_target,
            gd_best,
            gd_trajectory,
            kfac,
            kfac_trajectory,
        })
    }

    pub fn kfac_steps(&self) -> Option<usize> {
        self.kfac_trajectory.steps_to(self.target_loss)
    }

    pub fn gd_steps(&self) -> Option<usize> {
        self.gd_trajectory.steps_to(self.target_loss)
    }
}
