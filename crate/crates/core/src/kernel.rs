//! The Gaussian motion-coherence kernel and the displacement field it spans.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::{row_sq_dist, PointSet};

/// Dense M×M Gaussian kernel over a template set: g[i][j] = exp(−‖yᵢ−yⱼ‖²/(2β²)).
///
/// Symmetric with unit diagonal; every entry lies in (0, 1]. Positive
/// semi-definite, which keeps the M-step quadratic form convex.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    g: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn size(&self) -> usize {
        self.g.nrows()
    }

    /// G·W, the displacement of each template point under coefficients W.
    pub fn displacement(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.g * w
    }
}

/// Build the Gaussian kernel of a template set for squared width β².
pub fn gaussian_kernel(template: &PointSet, beta_sq: f64) -> Result<KernelMatrix> {
    if !(beta_sq > 0.0 && beta_sq.is_finite()) {
        return Err(Error::parameter("beta_sq", "must be positive and finite"));
    }
    let y = template.matrix();
    let m = y.nrows();
    let inv = 1.0 / (2.0 * beta_sq);
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        g[(i, i)] = 1.0;
        for j in (i + 1)..m {
            let v = (-row_sq_dist(y, i, y, j) * inv).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { g })
}

/// A non-rigid displacement field v(z) = Σₘ wₘ·exp(−‖z−yₘ‖²/(2β²)) anchored
/// at a template set. Applying it to the template itself reproduces the
/// aligned set T = Y + G·W.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    w: DMatrix<f64>,
    template: PointSet,
    beta_sq: f64,
}

impl DisplacementField {
    /// Pair coefficients W (M×D) with the template they are anchored to.
    pub fn new(w: DMatrix<f64>, template: PointSet, beta_sq: f64) -> Result<Self> {
        if !(beta_sq > 0.0 && beta_sq.is_finite()) {
            return Err(Error::parameter("beta_sq", "must be positive and finite"));
        }
        if w.nrows() != template.n_points() || w.ncols() != template.dim() {
            return Err(Error::Input(format!(
                "coefficient matrix is {}x{}, template needs {}x{}",
                w.nrows(),
                w.ncols(),
                template.n_points(),
                template.dim()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "coefficient matrix contains a non-finite value".to_string(),
            ));
        }
        Ok(DisplacementField {
            w,
            template,
            beta_sq,
        })
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn template(&self) -> &PointSet {
        &self.template
    }

    pub fn beta_sq(&self) -> f64 {
        self.beta_sq
    }

    /// Move every query point by the field: zₖ′ = zₖ + Σₘ wₘ·G(zₖ, yₘ).
    pub fn apply(&self, query: &PointSet) -> Result<PointSet> {
        if query.dim() != self.template.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.template.dim(),
                actual: query.dim(),
            });
        }
        let z = query.matrix();
        let y = self.template.matrix();
        let d = z.ncols();
        let inv = 1.0 / (2.0 * self.beta_sq);
        let mut out = z.clone();
        for k in 0..z.nrows() {
            for m in 0..y.nrows() {
                let gk = (-row_sq_dist(z, k, y, m) * inv).exp();
                for c in 0..d {
                    out[(k, c)] += self.w[(m, c)] * gk;
                }
            }
        }
        Ok(PointSet::from_matrix_unchecked(out))
    }
}
