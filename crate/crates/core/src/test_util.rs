//! Helpers shared by unit tests. The Gauss-Jordan solver is an independent
//! oracle: it never touches the LU path used by the M-step.

use nalgebra::DMatrix;
use rand::Rng;

use crate::types::PointSet;

pub(crate) fn random_point_set<R: Rng>(rng: &mut R, n: usize, d: usize, half_width: f64) -> PointSet {
    PointSet::new(DMatrix::from_fn(n, d, |_, _| {
        rng.gen_range(-half_width..half_width)
    }))
    .unwrap()
}

/// Solve A·W = B by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn gauss_jordan_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let k = b.ncols();
    let mut aug = DMatrix::zeros(n, n + k);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, k)).copy_from(b);

    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if aug[(row, col)].abs() > aug[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            aug.swap_rows(pivot, col);
        }
        let p = aug[(col, col)];
        assert!(p != 0.0, "singular system handed to oracle");
        for j in col..(n + k) {
            aug[(col, j)] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = aug[(row, col)];
                if f != 0.0 {
                    for j in col..(n + k) {
                        aug[(row, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
    }
    aug.view((0, n), (n, k)).into_owned()
}

/// Central-difference gradient of `f` with respect to every entry of `w`.
pub(crate) fn numeric_gradient<F: Fn(&DMatrix<f64>) -> f64>(
    w: &DMatrix<f64>,
    h: f64,
    f: F,
) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
    let mut probe = w.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let hi = f(&probe);
            probe[(i, j)] = orig - h;
            let lo = f(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (hi - lo) / (2.0 * h);
        }
    }
    grad
}
