//! Kronecker factors, the empirical Fisher block they approximate, and
//! preconditioning with factor inverses.

use super::matrix::{check_dense, Mat};
use super::mlp::BatchTape;
use crate::error::{Error, Result};

fn check_layer(tape: &BatchTape, l: usize) -> Result<()> {
    if l >= tape.inputs.len() || l >= tape.errors.len() {
        return Err(Error::Shape(format!("tape has no layer {l}")));
    }
    Ok(())
}

/// `A = mean_i a_i a_i^T`, `B = mean_i e_i e_i^T`.
pub fn curvature_factors(tape: &BatchTape, l: usize) -> Result<(Mat, Mat)> {
    check_layer(tape, l)?;
    let n = tape.batch_size.max(1) as f64;
    let a = &tape.inputs[l];
    let e = &tape.errors[l];
    let mut fa = a.t().matmul(a).scale(1.0 / n);
    let mut fb = e.t().matmul(e).scale(1.0 / n);
    fa.symmetrize();
    fb.symmetrize();
    Ok((fa, fb))
}

/// Dense `mean_i g_i g_i^T` with `g_i = vec(e_i a_i^T) = a_i (x) e_i`.
pub fn empirical_fisher_block(tape: &BatchTape, l: usize) -> Result<Mat> {
    check_layer(tape, l)?;
    let a = &tape.inputs[l];
    let e = &tape.errors[l];
    let p = a.cols() * e.cols();
    check_dense(p, p)?;
    let n = tape.batch_size.max(1) as f64;
    let mut f = Mat::zeros(p, p);
    for i in 0..a.rows() {
        let g = Mat::outer(e.row(i), a.row(i)).vec();
        for r in 0..p {
            if g[r] == 0.0 {
                continue;
            }
            for c in 0..p {
                f[(r, c)] += g[r] * g[c];
            }
        }
    }
    Ok(f.scale(1.0 / n))
}

/// `B^-1 G A^-1`, which is `(A^-1 (x) B^-1) vec(G)` reshaped.
pub fn precondition(grad: &Mat, a_inv: &Mat, b_inv: &Mat) -> Result<Mat> {
    let (d_out, d_in) = grad.shape();
    if a_inv.shape() != (d_in, d_in) || b_inv.shape() != (d_out, d_out) {
        return Err(Error::Shape(format!(
            "gradient {d_out}x{d_in} needs A^-1 {d_in}x{d_in} and B^-1 {d_out}x{d_out}, got {:?} and {:?}",
            a_inv.shape(),
            b_inv.shape()
        )));
    }
    Ok(b_inv.matmul(grad).matmul(a_inv))
}

/// The `k` principal diagonal blocks of a square matrix.
pub fn block_diag_split_factor(m: &Mat, k: usize) -> Result<Vec<Mat>> {
    let d = m.rows();
    if m.cols() != d {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", m.shape())));
    }
    if k == 0 || !d.is_multiple_of(k) {
        return Err(Error::Indivisible { dim: d, parts: k });
    }
    let b = d / k;
    Ok((0..k).map(|i| m.submatrix(i * b, i * b, b, b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(a: &[f64], e: &[f64]) -> BatchTape {
        BatchTape {
            inputs: vec![Mat::from_rows(&[a])],
            errors: vec![Mat::from_rows(&[e])],
            batch_size: 1,
        }
    }

    #[test]
    fn factors_by_hand() {
        let (a, b) = curvature_factors(&single(&[1.0, 2.0], &[3.0]), 0).unwrap();
        assert_eq!(a, Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]));
        assert_eq!(b, Mat::from_rows(&[&[9.0]]));
    }

    #[test]
    fn duplicated_sample_keeps_factors() {
        let one = curvature_factors(&single(&[1.0, -2.0], &[0.5, 3.0]), 0).unwrap();
        let two = BatchTape {
            inputs: vec![Mat::from_rows(&[&[1.0, -2.0], &[1.0, -2.0]])],
            errors: vec![Mat::from_rows(&[&[0.5, 3.0], &[0.5, 3.0]])],
            batch_size: 2,
        };
        assert_eq!(curvature_factors(&two, 0).unwrap(), one);
        let (_, b) = curvature_factors(&single(&[1.0], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(b, Mat::zeros(2, 2));
    }

    #[test]
    fn fisher_by_hand() {
        let f = empirical_fisher_block(&single(&[1.0, 2.0], &[3.0]), 0).unwrap();
        assert_eq!(f, Mat::from_rows(&[&[9.0, 18.0], &[18.0, 36.0]]));
        let z = empirical_fisher_block(&single(&[0.0, 0.0], &[0.0]), 0).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn precondition_by_hand() {
        let g = Mat::from_rows(&[&[6.0, 6.0]]);
        let out = precondition(&g, &Mat::identity(2).scale(0.5), &Mat::from_rows(&[&[1.0 / 3.0]])).unwrap();
        assert_eq!(out, Mat::from_rows(&[&[1.0, 1.0]]));
        assert_eq!(precondition(&g, &Mat::identity(2), &Mat::identity(1)).unwrap(), g);
        assert!(matches!(precondition(&g, &Mat::identity(1), &Mat::identity(1)), Err(Error::Shape(_))));
    }

    #[test]
    fn block_split() {
        let m = Mat::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(block_diag_split_factor(&m, 1).unwrap(), vec![m.clone()]);
        let parts = block_diag_split_factor(&m, 2).unwrap();
        assert_eq!(parts[0], Mat::from_rows(&[&[0.0, 1.0], &[4.0, 5.0]]));
        assert_eq!(parts[1], Mat::from_rows(&[&[10.0, 11.0], &[14.0, 15.0]]));
        assert!(matches!(block_diag_split_factor(&m, 3), Err(Error::Indivisible { dim: 4, parts: 3 })));
    }
}
