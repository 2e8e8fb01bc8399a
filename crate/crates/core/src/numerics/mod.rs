//! Dense linear algebra, activations, the differentiation tape, the seeded
//! generator and the optimizer.

mod matrix;
mod optim;
mod rng;
mod tape;

pub use matrix::{
    argmax, gelu, gelu_grad_scalar, gelu_scalar, mac_count, matmul, matmul_at, matmul_bt,
    normal_cdf, normal_pdf, pairwise_dots, reset_mac_count, row_l2_normalize, row_softmax, sigmoid,
    softmax_in_place, softplus, Matrix, NORM_EPS,
};
pub use optim::{adamw_step, lr_at, OptimizerState};
pub use rng::Rng;
pub use tape::{Gradients, RopeSpec, Tape, Var};

/// Matrix of i.i.d. normal entries scaled by `std`.
pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

/// Dot product of equal-length slices, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
