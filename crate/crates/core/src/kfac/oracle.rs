//! Brute-force references for the K-FAC kernels: dense elimination solves,
//! Gauss-Jordan inversion, finite differences and the dense empirical Fisher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::factors::{curvature_factors, empirical_fisher_block, precondition};
use super::matrix::{cholesky, cholesky_spd_inverse, kron, Mat};
use super::mlp::{forward_backward, loss, Activation, Batch, Loss, TinyMlp};
use super::optim::{ngd_step, KfacState};
use crate::error::{Error, Result};

/// Solves `M x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(m: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = m.rows();
    if m.cols() != n || b.len() != n {
        return Err(Error::Shape(format!("cannot solve {:?} against {} values", m.shape(), b.len())));
    }
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: col, value: 0.0 });
        }
        a.swap(col, pivot);
        x.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = x[col];
        for c in col + 1..n {
            v -= a[col][c] * x[c];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &Mat) -> Result<Mat> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape(format!("cannot invert a {:?} matrix", m.shape())));
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = m.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: col, value: 0.0 });
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Ok(Mat::from_fn(n, n, |i, j| a[i][n + j]))
}

/// Central differences of the batch loss in every weight.
pub fn finite_difference_grads(mlp: &TinyMlp, batch: &Batch, eps: f64) -> Result<Vec<Mat>> {
    let mut probe = mlp.clone();
    let mut out = Vec::with_capacity(mlp.layers());
    for l in 0..mlp.layers() {
        let (r, c) = mlp.weights[l].shape();
        let mut g = Mat::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let w = mlp.weights[l][(i, j)];
                probe.weights[l][(i, j)] = w + eps;
                let up = loss(&probe, batch)?;
                probe.weights[l][(i, j)] = w - eps;
                let down = loss(&probe, batch)?;
                probe.weights[l][(i, j)] = w;
                g[(i, j)] = (up - down) / (2.0 * eps);
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Single-layer update from a dense solve of the damped Kronecker system
/// `(F + lambda (A (x) I + I (x) B) + lambda^2 I) vec(D) = vec(G)`.
///
/// For one example `F = A (x) B` and the system equals `(A + lambda I) (x) (B + lambda I)`.
pub fn dense_ngd_step(mlp: &TinyMlp, batch: &Batch, damping: f64, lr: f64) -> Result<Mat> {
    if mlp.layers() != 1 {
        return Err(Error::Shape("the dense step oracle handles single-layer networks".into()));
    }
    let fb = forward_backward(mlp, batch)?;
    let (a, b) = curvature_factors(&fb.tape, 0)?;
    let mut system = empirical_fisher_block(&fb.tape, 0)?;
    if damping != 0.0 {
        let ia = kron(&a, &Mat::identity(b.rows()))?;
        let ib = kron(&Mat::identity(a.rows()), &b)?;
        system.axpy(damping, &ia.add(&ib));
        system.add_diag(damping * damping);
    }
    let g = &fb.grads[0];
    let delta = gauss_solve(&system, &g.vec())?;
    let delta = Mat::unvec(&delta, g.rows(), g.cols())?;
    Ok(mlp.weights[0].sub(&delta.scale(lr)))
}

/// Frobenius-relative error of `got` against `want`.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, error: f64, tolerance: f64) -> Self {
        OracleCheck {
            name: name.to_string(),
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
        }
    }
}

fn random_batch<R: Rng>(n: usize, d_in: usize, d_out: usize, loss: Loss, rng: &mut R) -> Batch {
    let targets = match loss {
        Loss::HalfMse => Mat::random(n, d_out, rng),
        Loss::SoftmaxCrossEntropy => Mat::from_fn(n, d_out, |i, j| if (i * 7 + 3) % d_out == j { 1.0 } else { 0.0 }),
    };
    Batch {
        inputs: Mat::random(n, d_in, rng),
        targets,
    }
}

/// Runs every numeric equivalence check on data drawn from `seed`.
pub fn verify_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // One example: the empirical Fisher block is exactly A (x) B.
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mlp = TinyMlp::random(&[4, 3, 5, 2], Activation::Tanh, Loss::HalfMse, 1.0, &mut rng)?;
        let batch = random_batch(1, 4, 2, Loss::HalfMse, &mut rng);
        let fb = forward_backward(&mlp, &batch)?;
        for l in 0..mlp.layers() {
            let (a, b) = curvature_factors(&fb.tape, l)?;
            let f = empirical_fisher_block(&fb.tape, l)?;
            worst = worst.max(f.sub(&kron(&a, &b)?).max_abs());
        }
    }
    out.push(OracleCheck::new("rank-1 fisher equals kron(A, B)", worst, 1e-12));

    // Vec trick and Kronecker inverse against dense elimination.
    let mut vec_worst: f64 = 0.0;
    let mut kinv_worst: f64 = 0.0;
    for _ in 0..10 {
        let d_in = rng.random_range(1..=6);
        let d_out = rng.random_range(1..=6);
        let a = Mat::random_spd(d_in, 0.5, &mut rng);
        let b = Mat::random_spd(d_out, 0.5, &mut rng);
        let g = Mat::random(d_out, d_in, &mut rng);
        let a_inv = cholesky_spd_inverse(&a, 0.0)?;
        let b_inv = cholesky_spd_inverse(&b, 0.0)?;
        let fast = precondition(&g, &a_inv, &b_inv)?.vec();
        let dense = gauss_solve(&kron(&a, &b)?, &g.vec())?;
        vec_worst = vec_worst.max(rel_err(&fast, &dense));
        let kinv = gauss_jordan_inverse(&kron(&a, &b)?)?;
        kinv_worst = kinv_worst.max(rel_err(kron(&a_inv, &b_inv)?.as_slice(), kinv.as_slice()));
    }
    out.push(OracleCheck::new("vec trick equals dense kronecker solve", vec_worst, 1e-10));
    out.push(OracleCheck::new("kron(A, B)^-1 equals kron(A^-1, B^-1)", kinv_worst, 1e-10));

    let mut chol_worst: f64 = 0.0;
    for n in [1, 3, 8] {
        let m = Mat::random_spd(n, 0.5, &mut rng);
        let inv = cholesky_spd_inverse(&m, 0.0)?;
        chol_worst = chol_worst.max(m.matmul(&inv).sub(&Mat::identity(n)).max_abs());
        let lam = 0.3;
        let inv = cholesky_spd_inverse(&m, lam)?;
        let mut damped = m.clone();
        damped.add_diag(lam);
        chol_worst = chol_worst.max(damped.matmul(&inv).sub(&Mat::identity(n)).max_abs());
    }
    out.push(OracleCheck::new("cholesky inverse residual", chol_worst, 1e-10));

    // Gradients against central differences, both losses.
    let mut fd_worst: f64 = 0.0;
    for loss_kind in [Loss::HalfMse, Loss::SoftmaxCrossEntropy] {
        let mlp = TinyMlp::random(&[4, 5, 3], Activation::Tanh, loss_kind, 1.0, &mut rng)?;
        let batch = random_batch(6, 4, 3, loss_kind, &mut rng);
        let fb = forward_backward(&mlp, &batch)?;
        let fd = finite_difference_grads(&mlp, &batch, 1e-4)?;
        let got: Vec<f64> = fb.grads.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        let want: Vec<f64> = fd.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        fd_worst = fd_worst.max(rel_err(&got, &want));
    }
    out.push(OracleCheck::new("gradients match finite differences", fd_worst, 1e-5));

    // Per-example outer products rebuild the gradient; factors are PSD.
    let mlp = TinyMlp::random(&[5, 4, 3], Activation::Tanh, Loss::HalfMse, 1.0, &mut rng)?;
    let batch = random_batch(7, 5, 3, Loss::HalfMse, &mut rng);
    let fb = forward_backward(&mlp, &batch)?;
    let mut cons_worst: f64 = 0.0;
    let mut psd_ok = true;
    for l in 0..mlp.layers() {
        let (r, c) = fb.grads[l].shape();
        let mut g = Mat::zeros(r, c);
        for i in 0..batch.len() {
            g.axpy(1.0, &Mat::outer(fb.tape.errors[l].row(i), fb.tape.inputs[l].row(i)));
        }
        cons_worst = cons_worst.max(g.sub(&fb.grads[l]).max_abs());
        let (a, b) = curvature_factors(&fb.tape, l)?;
        for m in [a, b] {
            let mut shifted = m.clone();
            shifted.add_diag(1e-10 * m.frobenius() + f64::MIN_POSITIVE);
            psd_ok &= cholesky(&shifted).is_ok();
        }
    }
    out.push(OracleCheck::new("tape outer products rebuild gradients", cons_worst, 1e-12));
    out.push(OracleCheck::new("curvature factors are PSD", if psd_ok { 0.0 } else { 1.0 }, 0.5));

    // One update against the dense natural-gradient solve.
    let mut ngd_worst: f64 = 0.0;
    let scalar = TinyMlp::new(vec![Mat::from_rows(&[&[0.7]])], vec![Activation::Identity], Loss::HalfMse)?;
    let one = Batch {
        inputs: Mat::from_rows(&[&[1.5]]),
        targets: Mat::from_rows(&[&[-0.4]]),
    };
    let cases = [(scalar, one, 0.0)];
    let mut extra = Vec::new();
    for _ in 0..3 {
        let d_in = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=3);
        let mlp = TinyMlp::random(&[d_in, d_out], Activation::Identity, Loss::HalfMse, 1.0, &mut rng)?;
        let batch = random_batch(1, d_in, d_out, Loss::HalfMse, &mut rng);
        extra.push((mlp, batch, 0.05));
    }
    for (mlp, batch, damping) in cases.into_iter().chain(extra) {
        let lr = 0.5;
        let want = dense_ngd_step(&mlp, &batch, damping, lr)?;
        let mut got = mlp.clone();
        let fb = forward_backward(&mlp, &batch)?;
        let mut st = KfacState::new(1, damping, lr);
        st.refresh(&fb.tape)?;
        ngd_step(&mut got, &mut st, &fb.grads)?;
        ngd_worst = ngd_worst.max(rel_err(got.weights[0].as_slice(), want.as_slice()));
    }
    out.push(OracleCheck::new("ngd step equals dense natural-gradient solve", ngd_worst, 1e-10));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elimination_solves_a_permuted_system() {
        let m = Mat::from_rows(&[&[0.0, 2.0], &[3.0, 1.0]]);
        let x = gauss_solve(&m, &[4.0, 5.0]).unwrap();
        assert!(rel_err(&x, &[1.0, 2.0]) < 1e-15);
        let inv = gauss_jordan_inverse(&m).unwrap();
        assert!(m.matmul(&inv).sub(&Mat::identity(2)).max_abs() < 1e-15);
        assert!(gauss_solve(&Mat::zeros(2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn every_oracle_passes() {
        for seed in [0, 1, 42] {
            for c in verify_all(seed).unwrap() {
                assert!(c.passed, "seed {seed}: {c:?}");
            }
        }
    }
}
