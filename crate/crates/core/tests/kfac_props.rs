use kfac_pipe::kfac::oracle::{finite_difference_grads, gauss_jordan_inverse, gauss_solve, rel_err};
use kfac_pipe::kfac::{
    block_diag_split_factor, cholesky_spd_inverse, curvature_factors, empirical_fisher_block, forward_backward,
    kron, precondition, Activation, Batch, Loss, Mat, TinyMlp,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vec_trick_matches_dense_solve(seed in any::<u64>(), d_in in 1usize..=6, d_out in 1usize..=6, damping in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = Mat::random_spd(d_in, 0.1, &mut r);
        let b = Mat::random_spd(d_out, 0.1, &mut r);
        let g = Mat::random(d_out, d_in, &mut r);
        let ai = cholesky_spd_inverse(&a, damping).unwrap();
        let bi = cholesky_spd_inverse(&b, damping).unwrap();
        let fast = precondition(&g, &ai, &bi).unwrap().vec();
        let mut ad = a.clone();
        ad.add_diag(damping);
        let mut bd = b.clone();
        bd.add_diag(damping);
        let dense = gauss_solve(&kron(&ad, &bd).unwrap(), &g.vec()).unwrap();
        prop_assert!(rel_err(&fast, &dense) < 1e-9, "{}", rel_err(&fast, &dense));
    }

    #[test]
    fn kronecker_inverse_property(seed in any::<u64>(), p in 1usize..=5, q in 1usize..=5) {
        let mut r = rng(seed);
        let a = Mat::random_spd(p, 0.2, &mut r);
        let b = Mat::random_spd(q, 0.2, &mut r);
        let lhs = gauss_jordan_inverse(&kron(&a, &b).unwrap()).unwrap();
        let rhs = kron(&gauss_jordan_inverse(&a).unwrap(), &gauss_jordan_inverse(&b).unwrap()).unwrap();
        prop_assert!(rel_err(lhs.as_slice(), rhs.as_slice()) < 1e-9);
    }

    #[test]
    fn cholesky_inverse_agrees_with_elimination(seed in any::<u64>(), n in 1usize..=10) {
        let mut r = rng(seed);
        let m = Mat::random_spd(n, 0.1, &mut r);
        let chol = cholesky_spd_inverse(&m, 0.0).unwrap();
        let gj = gauss_jordan_inverse(&m).unwrap();
        prop_assert!(rel_err(chol.as_slice(), gj.as_slice()) < 1e-9);
        prop_assert!(chol.asymmetry() == 0.0);
    }

    #[test]
    fn single_example_fisher_is_a_kronecker_product(seed in any::<u64>(), widths in prop::collection::vec(1usize..=4, 2..=4)) {
        let mut r = rng(seed);
        let mlp = TinyMlp::random(&widths, Activation::Tanh, Loss::HalfMse, 1.0, &mut r).unwrap();
        let batch = Batch {
            inputs: Mat::random(1, widths[0], &mut r),
            targets: Mat::random(1, *widths.last().unwrap(), &mut r),
        };
        let fb = forward_backward(&mlp, &batch).unwrap();
        for l in 0..mlp.layers() {
            let (a, b) = curvature_factors(&fb.tape, l).unwrap();
            let f = empirical_fisher_block(&fb.tape, l).unwrap();
            prop_assert!(f.sub(&kron(&a, &b).unwrap()).max_abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..=5, softmax in any::<bool>()) {
        let mut r = rng(seed);
        let loss = if softmax { Loss::SoftmaxCrossEntropy } else { Loss::HalfMse };
        let mlp = TinyMlp::random(&[3, 4, 2], Activation::Tanh, loss, 1.0, &mut r).unwrap();
        let targets = if softmax {
            Mat::from_fn(n, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 })
        } else {
            Mat::random(n, 2, &mut r)
        };
        let batch = Batch { inputs: Mat::random(n, 3, &mut r), targets };
        let fb = forward_backward(&mlp, &batch).unwrap();
        let fd = finite_difference_grads(&mlp, &batch, 1e-5).unwrap();
        for (g, f) in fb.grads.iter().zip(&fd) {
            let scale = f.frobenius().max(1e-3);
            prop_assert!(g.sub(f).frobenius() / scale < 1e-5);
        }
    }

    #[test]
    fn factors_are_symmetric_psd(seed in any::<u64>(), n in 1usize..=8) {
        let mut r = rng(seed);
        let mlp = TinyMlp::random(&[4, 3, 2], Activation::Tanh, Loss::HalfMse, 1.0, &mut r).unwrap();
        let batch = Batch { inputs: Mat::random(n, 4, &mut r), targets: Mat::random(n, 2, &mut r) };
        let fb = forward_backward(&mlp, &batch).unwrap();
        for l in 0..2 {
            let (a, b) = curvature_factors(&fb.tape, l).unwrap();
            for m in [a, b] {
                prop_assert_eq!(m.asymmetry(), 0.0);
                let v = Mat::random(m.rows(), 1, &mut r);
                let quad = v.t().matmul(&m).matmul(&v)[(0, 0)];
                prop_assert!(quad >= -1e-12 * m.frobenius());
            }
        }
    }

    #[test]
    fn block_split_recovers_block_diagonal(seed in any::<u64>(), k in 1usize..=4, b in 1usize..=3) {
        let mut r = rng(seed);
        let blocks: Vec<Mat> = (0..k).map(|_| Mat::random(b, b, &mut r)).collect();
        let d = k * b;
        let m = Mat::from_fn(d, d, |i, j| if i / b == j / b { blocks[i / b][(i % b, j % b)] } else { 0.0 });
        prop_assert_eq!(block_diag_split_factor(&m, k).unwrap(), blocks);
    }
}
