//! Dense linear solves for the M-step systems.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative residual every M-step solve must reach.
pub(crate) const RESIDUAL_TOL: f64 = 1e-9;

/// Solve A·W = B for a square A with partial-pivot LU, followed by up to two
/// rounds of iterative refinement. Fails if the factorization breaks down or
/// the relative residual ‖A·W−B‖/‖B‖ stays above [`RESIDUAL_TOL`].
pub(crate) fn solve_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    debug_assert_eq!(a.nrows(), a.ncols());
    debug_assert_eq!(a.nrows(), b.nrows());

    let lu = a.clone().lu();
    let mut w = lu.solve(b).ok_or_else(|| Error::Numerical {
        iteration: 0,
        condition: pivot_condition_estimate(&lu),
        detail: "singular M-step system".to_string(),
    })?;

    let b_norm = b.norm().max(f64::MIN_POSITIVE);
    let mut residual = b - a * &w;
    let mut rel = residual.norm() / b_norm;
    for _ in 0..2 {
        if rel <= RESIDUAL_TOL {
            break;
        }
        match lu.solve(&residual) {
            Some(correction) => {
                w += correction;
                residual = b - a * &w;
                rel = residual.norm() / b_norm;
            }
            None => break,
        }
    }
    if !rel.is_finite() || rel > RESIDUAL_TOL {
        return Err(Error::Numerical {
            iteration: 0,
            condition: pivot_condition_estimate(&lu),
            detail: format!("M-step relative residual {rel:.3e} exceeds {RESIDUAL_TOL:.1e}"),
        });
    }
    Ok(w)
}

/// Ratio of the largest to smallest |U| pivot — a cheap conditioning signal
/// for error reports, not a rigorous condition number.
fn pivot_condition_estimate(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    let n = u.nrows().min(u.ncols());
    let mut max_p = 0.0f64;
    let mut min_p = f64::INFINITY;
    for i in 0..n {
        let p = u[(i, i)].abs();
        max_p = max_p.max(p);
        min_p = min_p.min(p);
    }
    if min_p == 0.0 {
        f64::INFINITY
    } else {
        max_p / min_p
    }
}
