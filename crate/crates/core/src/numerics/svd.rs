use alloc::vec::Vec;

use super::matrix::Matrix;
use crate::{Error, Result};

/// Relative off-diagonal threshold for a column pair to count as orthogonal.
pub const SVD_TOLERANCE: f64 = 1e-10;
pub const SVD_MAX_SWEEPS: usize = 1000;

/// Singular values in descending order, via one-sided (Hestenes) Jacobi.
///
/// Columns of a working copy are rotated pairwise until every pair satisfies
/// `|aₚ·a_q| ≤ tol · ‖aₚ‖ ‖a_q‖`; the column norms are then the singular
/// values. Wide inputs are transposed first so the working copy has at most as
/// many columns as rows.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Precondition(alloc::format!(
            "singular_values needs a nonempty matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("singular_values"));
    }
    // Column-major working copy: cols[j] is column j.
    let work = if m.cols() > m.rows() { m.transpose() } else { m.clone() };
    let (rows, n) = work.shape();
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| work[(i, j)]).collect())
        .collect();

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in a.iter().zip(b) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (a, b) = (&mut left[p], &mut right[0]);
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            op: "singular_values",
            iterations: SVD_MAX_SWEEPS,
        });
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| super::matrix::norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}
