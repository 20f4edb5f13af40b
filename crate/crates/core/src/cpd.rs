//! Baseline non-rigid coherent point drift: EM over an outlier-augmented
//! Gaussian mixture whose centroids are the moving template points.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::ecpd::{mstep_objective_ecpd, mstep_solve_ecpd, CorrespondencePriors};
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, DisplacementField, KernelMatrix};
use crate::likelihood::{init_sigma2, negative_log_likelihood};
use crate::solve::solve_dense;
use crate::types::{
    row_sq_dist, IterationRecord, PointSet, RegistrationConfig, RegistrationResult,
    TerminationReason,
};

/// E-step responsibilities: p[m][n] is the probability that data point n was
/// generated by template centroid m, with the remaining column mass absorbed
/// by the uniform outlier component.
#[derive(Debug, Clone)]
pub struct PosteriorMatrix {
    p: DMatrix<f64>,
    np: f64,
    pairwise_evals: u64,
}

impl PosteriorMatrix {
    /// Wrap an explicit responsibility matrix (rows: template, columns: data).
    /// Entries must lie in [0, 1]; the total responsibility is recomputed.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input(
                "responsibilities must lie in [0, 1]".to_string(),
            ));
        }
        let np = p.iter().sum();
        Ok(PosteriorMatrix {
            p,
            np,
            pairwise_evals: 0,
        })
    }

    /// M×N responsibility matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Total responsibility N_p = Σₘₙ p[m][n].
    pub fn np(&self) -> f64 {
        self.np
    }

    /// Number of pairwise Gaussian terms evaluated to produce this matrix.
    pub fn pairwise_evals(&self) -> u64 {
        self.pairwise_evals
    }

    /// Per-template-row sums (P·1), in row order.
    pub(crate) fn row_sums(&self) -> Vec<f64> {
        (0..self.p.nrows())
            .map(|i| self.p.row(i).iter().sum())
            .collect()
    }
}

/// log of the outlier constant c = (2πσ²)^(D/2)·ω/(1−ω)·M/N, where `m` and
/// `n` are the centroid and data counts the posterior is normalized over.
#[inline]
pub(crate) fn log_noise_constant(d: usize, sigma2: f64, omega: f64, m: usize, n: usize) -> f64 {
    0.5 * (d as f64) * (2.0 * PI * sigma2).ln() + (omega / (1.0 - omega)).ln()
        + ((m as f64) / (n as f64)).ln()
}

/// Compute posterior responsibilities of every template centroid for every
/// data point. Exponents are shifted by the per-column maximum (and the
/// noise constant joins the denominator in the same shifted domain), so the
/// computation cannot overflow.
pub fn estep(
    data: &PointSet,
    transformed: &PointSet,
    sigma2: f64,
    omega: f64,
) -> Result<PosteriorMatrix> {
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
    let log_c = (omega > 0.0).then(|| log_noise_constant(d, sigma2, omega, m, n));

    let mut p = DMatrix::zeros(m, n);
    let mut np = 0.0;
    let mut exponents = vec![0.0f64; m];
    for col in 0..n {
        let mut max_e = f64::NEG_INFINITY;
        for (row, e) in exponents.iter_mut().enumerate() {
            *e = -row_sq_dist(x, col, t, row) * inv;
            if *e > max_e {
                max_e = *e;
            }
        }
        let shift = match log_c {
            Some(lc) => max_e.max(lc),
            None => max_e,
        };
        let mut denom = match log_c {
            Some(lc) => (lc - shift).exp(),
            None => 0.0,
        };
        for (row, e) in exponents.iter().enumerate() {
            let v = (e - shift).exp();
            p[(row, col)] = v;
            denom += v;
        }
        let inv_denom = 1.0 / denom;
        let mut col_sum = 0.0;
        for row in 0..m {
            p[(row, col)] *= inv_denom;
            col_sum += p[(row, col)];
        }
        np += col_sum;
    }
    Ok(PosteriorMatrix {
        p,
        np,
        pairwise_evals: (m as u64) * (n as u64),
    })
}

/// Solve the M-step system for the displacement coefficients W.
///
/// The system is assembled in the pre-multiplied form
/// (d(P1)·G + λσ²·I)·W = P·X − d(P1)·Y, which needs no inverse of d(P1) and
/// stays well defined when some row sums vanish: those rows reduce to
/// λσ²·wₘ = 0.
pub fn mstep_solve(
    kernel: &KernelMatrix,
    posterior: &PosteriorMatrix,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    check_mstep_inputs(kernel, posterior.matrix(), data, template, lambda, sigma2)?;
    let g = kernel.matrix();
    let y = template.matrix();
    let m = g.nrows();
    let d = y.ncols();

    let row_sums = posterior.row_sums();
    let shift = lambda * sigma2;
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        let s = row_sums[i];
        for j in 0..m {
            a[(i, j)] = s * g[(i, j)];
        }
        a[(i, i)] += shift;
    }
    let mut b = posterior.matrix() * data.matrix();
    for i in 0..m {
        let s = row_sums[i];
        for c in 0..d {
            b[(i, c)] -= s * y[(i, c)];
        }
    }
    solve_dense(&a, &b)
}

pub(crate) fn check_mstep_inputs(
    kernel: &KernelMatrix,
    posterior: &DMatrix<f64>,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::parameter("lambda", "must be positive and finite"));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::parameter("sigma2", "must be positive and finite"));
    }
    if kernel.size() != template.n_points() {
        return Err(Error::Input(format!(
            "kernel is {}x{} but template has {} points",
            kernel.size(),
            kernel.size(),
            template.n_points()
        )));
    }
    if posterior.nrows() != template.n_points() || posterior.ncols() != data.n_points() {
        return Err(Error::Input(format!(
            "posterior is {}x{} but expected {}x{}",
            posterior.nrows(),
            posterior.ncols(),
            template.n_points(),
            data.n_points()
        )));
    }
    if data.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: template.dim(),
            actual: data.dim(),
        });
    }
    Ok(())
}

/// Closed-form variance update
/// σ² = (tr(Xᵀd(Pᵀ1)X) − 2·tr((PX)ᵀT) + tr(Tᵀd(P1)T)) / (N_p·D),
/// clamped at zero against round-off.
pub fn update_sigma2_cpd(
    data: &PointSet,
    transformed: &PointSet,
    posterior: &PosteriorMatrix,
) -> Result<f64> {
    if !(posterior.np() > 0.0) {
        return Err(Error::DegeneratePosterior);
    }
    let x = data.matrix();
    let t = transformed.matrix();
    let p = posterior.matrix();
    let (n, m, d) = (x.nrows(), t.nrows(), x.ncols());
    if p.nrows() != m || p.ncols() != n {
        return Err(Error::Input(format!(
            "posterior is {}x{} but expected {}x{}",
            p.nrows(),
            p.ncols(),
            m,
            n
        )));
    }
    if x.ncols() != t.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            actual: t.ncols(),
        });
    }

    let px = p * x;
    let mut t1 = 0.0;
    for col in 0..n {
        let cs: f64 = p.column(col).iter().sum();
        t1 += cs * x.row(col).norm_squared();
    }
    let t2 = px.dot(t);
    let mut t3 = 0.0;
    for row in 0..m {
        let rs: f64 = p.row(row).iter().sum();
        t3 += rs * t.row(row).norm_squared();
    }
    Ok(((t1 - 2.0 * t2 + t3) / (posterior.np() * d as f64)).max(0.0))
}

/// M-step objective at coefficients `w`:
/// (1/(2σ²))·Σₘₙ pₘₙ‖xₙ−(yₘ+(GW)ₘ)‖² + (λ/2)·tr(WᵀGW).
/// `mstep_solve` returns its stationary point.
pub fn mstep_objective(
    kernel: &KernelMatrix,
    posterior: &PosteriorMatrix,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
    w: &DMatrix<f64>,
) -> f64 {
    let gw = kernel.displacement(w);
    let moved = template.matrix() + &gw;
    let data_term = weighted_sq_dist_sum(posterior.matrix(), data.matrix(), &moved);
    data_term / (2.0 * sigma2) + 0.5 * lambda * w.dot(&gw)
}

/// Σₘₙ p[m][n]·‖xₙ − movedₘ‖².
pub(crate) fn weighted_sq_dist_sum(
    p: &DMatrix<f64>,
    x: &DMatrix<f64>,
    moved: &DMatrix<f64>,
) -> f64 {
    let mut acc = 0.0;
    for col in 0..x.nrows() {
        for row in 0..moved.nrows() {
            let w = p[(row, col)];
            if w != 0.0 {
                acc += w * row_sq_dist(x, col, moved, row);
            }
        }
    }
    acc
}

/// Register `template` onto `data` with plain CPD.
pub fn register_cpd(
    data: &PointSet,
    template: &PointSet,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    run_em(data, template, config, None)
}

/// Shared EM driver for CPD and ECPD. `priors` augments the M-step with
/// correspondence terms; `None` and an empty prior set follow the identical
/// numerical path.
pub(crate) fn run_em(
    data: &PointSet,
    template: &PointSet,
    config: &RegistrationConfig,
    priors: Option<&CorrespondencePriors>,
) -> Result<RegistrationResult> {
    config.validate()?;
    if data.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: template.dim(),
            actual: data.dim(),
        });
    }
    if let Some(p) = priors {
        p.validate_bounds(data.n_points(), template.n_points())?;
    }
    let use_priors = priors.map_or(false, |p| !p.is_empty());

    let kernel = gaussian_kernel(template, config.beta_sq)?;
    let y = template.matrix();
    let mut sigma2 = init_sigma2(data, template)?.max(config.sigma2_floor);
    let mut transformed = template.clone();
    let mut w = DMatrix::zeros(template.n_points(), template.dim());
    let mut prev_nll = negative_log_likelihood(data, &transformed, sigma2, config.omega)?;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut termination = TerminationReason::MaxIters;

    for iteration in 1..=config.max_iters {
        let started = Instant::now();
        let posterior = estep(data, &transformed, sigma2, config.omega)?;
        w = if use_priors {
            let pr = priors.unwrap();
            mstep_solve_ecpd(
                &kernel,
                &posterior,
                pr,
                data,
                template,
                config.lambda,
                sigma2,
            )
        } else {
            mstep_solve(&kernel, &posterior, data, template, config.lambda, sigma2)
        }
        .map_err(|e| e.at_iteration(iteration))?;
        transformed = PointSet::from_matrix_unchecked(y + kernel.displacement(&w));
        let q_value = if use_priors {
            mstep_objective_ecpd(
                &kernel,
                &posterior,
                priors.unwrap(),
                data,
                template,
                config.lambda,
                sigma2,
                &w,
            )
        } else {
            mstep_objective(
                &kernel,
                &posterior,
                data,
                template,
                config.lambda,
                sigma2,
                &w,
            )
        };
        let updated = update_sigma2_cpd(data, &transformed, &posterior)?;
        let floor_hit = updated < config.sigma2_floor;
        sigma2 = updated.max(config.sigma2_floor);
        let nll = negative_log_likelihood(data, &transformed, sigma2, config.omega)?;
        trace.push(IterationRecord {
            iteration,
            sigma2,
            nll,
            q_value,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        let rel = (prev_nll - nll).abs() / prev_nll.abs().max(f64::MIN_POSITIVE);
        prev_nll = nll;
        if floor_hit {
            termination = TerminationReason::Sigma2Floor;
            break;
        }
        if rel < config.rel_tol {
            termination = TerminationReason::RelTol;
            break;
        }
    }

    let iterations = trace.len();
    Ok(RegistrationResult {
        field: DisplacementField::new(w, template.clone(), config.beta_sq)?,
        transformed,
        sigma2_final: sigma2,
        iterations,
        trace,
        termination,
    })
}
