//! Variance initialization and mixture likelihood evaluation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::types::{row_sq_dist, PointSet};

/// log(e^a + e^b) without overflow.
#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Initial variance σ² = (1/(D·M·N))·ΣₙΣₘ‖xₙ−yₘ‖².
///
/// Evaluated through the expansion M·Σ‖xₙ‖² + N·Σ‖yₘ‖² − 2·(Σxₙ)·(Σyₘ),
/// which makes the result exactly symmetric in its arguments.
pub fn init_sigma2(data: &PointSet, template: &PointSet) -> Result<f64> {
    if data.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            actual: template.dim(),
        });
    }
    let x = data.matrix();
    let y = template.matrix();
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());

    let sq_x: f64 = x.iter().map(|v| v * v).sum();
    let sq_y: f64 = y.iter().map(|v| v * v).sum();
    let mut cross = 0.0;
    for c in 0..d {
        let sx: f64 = x.column(c).iter().sum();
        let sy: f64 = y.column(c).iter().sum();
        cross += sx * sy;
    }
    let total = (m as f64) * sq_x + (n as f64) * sq_y - 2.0 * cross;
    // round-off can leave a tiny negative residue when the sets coincide
    Ok(total.max(0.0) / ((d * m * n) as f64))
}

/// Negative log-likelihood of `data` under the outlier-augmented Gaussian
/// mixture centered on `transformed`:
///
///   −Σₙ log( ω/N + (1−ω)·(1/M)·Σₘ (2πσ²)^(−D/2)·exp(−‖xₙ−tₘ‖²/(2σ²)) )
///
/// Each point's term is evaluated in the log domain, so the result stays
/// finite for any σ² > 0.
pub fn negative_log_likelihood(
    data: &PointSet,
    transformed: &PointSet,
    sigma2: f64,
    omega: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::parameter("sigma2", "must be positive and finite"));
    }
    if !(0.0..1.0).contains(&omega) {
        return Err(Error::parameter("omega", "must satisfy 0 <= omega < 1"));
    }
    if data.dim() != transformed.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            actual: transformed.dim(),
        });
    }
    let x = data.matrix();
    let t = transformed.matrix();
    let (n, m, d) = (x.nrows(), t.nrows(), x.ncols());

    let inv = 1.0 / (2.0 * sigma2);
    // log[(1-ω)/M · (2πσ²)^(-D/2)]
    let log_gauss_scale =
        (1.0 - omega).ln() - (m as f64).ln() - 0.5 * (d as f64) * (2.0 * PI * sigma2).ln();
    let log_noise = if omega > 0.0 {
        (omega / n as f64).ln()
    } else {
        f64::NEG_INFINITY
    };

    let mut nll = 0.0;
    let mut exps = vec![0.0f64; m];
    for i in 0..n {
        let mut max_e = f64::NEG_INFINITY;
        for (j, e) in exps.iter_mut().enumerate() {
            *e = -row_sq_dist(x, i, t, j) * inv;
            if *e > max_e {
                max_e = *e;
            }
        }
        let sum: f64 = exps.iter().map(|e| (e - max_e).exp()).sum();
        let log_mixture = log_gauss_scale + max_e + sum.ln();
        nll -= log_add_exp(log_noise, log_mixture);
    }
    Ok(nll)
}
