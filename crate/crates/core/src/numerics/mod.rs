//! Dense linear algebra, seeded randomness, and numerical differentiation.

mod diff;
pub(crate) mod matrix;
mod rng;
mod svd;

pub use diff::{finite_diff_gradient, relative_error};
pub use matrix::{l2_normalize_rows, log_sum_exp, softmax_row, Matrix, NORMALIZE_EPS};
pub use rng::{derive_seed, Rng};
pub use svd::{singular_values, SVD_MAX_SWEEPS, SVD_TOLERANCE};

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    a.matmul(b)
}

/// Matrix of i.i.d. normal entries, row-major fill order.
pub fn rng_gaussian(rng: &mut Rng, rows: usize, cols: usize, mean: f64, stddev: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| mean + stddev * rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data).expect("length is rows * cols")
}

/// One draw from a Dirichlet distribution with the given concentration.
pub fn rng_dirichlet(rng: &mut Rng, concentration: &[f64]) -> crate::Result<alloc::vec::Vec<f64>> {
    rng.dirichlet(concentration)
}
