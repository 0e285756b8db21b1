//! Desk-scale numeric K-FAC: Kronecker factors, Cholesky inverses, vec-trick
//! preconditioning and natural-gradient updates, with dense oracles.

pub mod factors;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod oracle;
pub mod train;

pub use factors::{block_diag_split_factor, curvature_factors, empirical_fisher_block, precondition};
pub use matrix::{cholesky_spd_inverse, kron, Mat};
pub use mlp::{forward_backward, Activation, Batch, BatchTape, ForwardBackward, Loss, TinyMlp};
pub use optim::{ngd_step, KfacState};
pub use oracle::{verify_all, OracleCheck};
pub use train::{train_toy, ConvergenceFixture, Optimizer, ToyConfig, Trajectory, TrajectoryPoint};
