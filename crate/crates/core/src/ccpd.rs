//! Clustered coherent point drift: a two-level mixture where responsibilities
//! are computed per cluster and the M-step blends the cluster-weighted
//! systems. Points only ever bind to template points sharing their label;
//! cross-cluster pairs are structural zeros that are never stored or
//! evaluated, which is also where the speedup over plain CPD comes from.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::cpd::log_noise_constant;
use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, DisplacementField, KernelMatrix};
use crate::likelihood::{init_sigma2, log_add_exp};
use crate::solve::solve_dense;
use crate::types::{
    row_sq_dist, ClusterAssignment, IterationRecord, PointSet, RegistrationConfig,
    RegistrationResult, TerminationReason, UNCLUSTERED,
};

/// Cluster labelings of both point sets plus the cluster weights P(c).
///
/// Weights default to each cluster's share of the labeled data points and
/// always sum to one. Sentinel-labeled points sit outside the model: they
/// belong to the implicit overflow cluster whose weight is zero.
#[derive(Debug, Clone)]
pub struct ClusterPriorModel {
    data_labels: ClusterAssignment,
    template_labels: ClusterAssignment,
    cluster_weights: Vec<f64>,
}

impl ClusterPriorModel {
    /// P(c) proportional to the number of labeled data points in cluster c.
    pub fn from_labels(
        data_labels: ClusterAssignment,
        template_labels: ClusterAssignment,
    ) -> Result<Self> {
        check_label_pair(&data_labels, &template_labels)?;
        let sizes = data_labels.cluster_sizes();
        let labeled: usize = sizes.iter().sum();
        if labeled == 0 {
            return Err(Error::Input(
                "no labeled data points to derive cluster weights from".to_string(),
            ));
        }
        let cluster_weights = sizes
            .iter()
            .map(|&s| s as f64 / labeled as f64)
            .collect();
        Ok(ClusterPriorModel {
            data_labels,
            template_labels,
            cluster_weights,
        })
    }

    /// P(c) = 1/C regardless of cluster sizes.
    pub fn with_uniform_weights(
        data_labels: ClusterAssignment,
        template_labels: ClusterAssignment,
    ) -> Result<Self> {
        check_label_pair(&data_labels, &template_labels)?;
        let c = data_labels.n_clusters();
        Ok(ClusterPriorModel {
            data_labels,
            template_labels,
            cluster_weights: vec![1.0 / c as f64; c],
        })
    }

    /// Explicit weights; must be non-negative and sum to 1 within 1e-12.
    pub fn with_weights(
        data_labels: ClusterAssignment,
        template_labels: ClusterAssignment,
        cluster_weights: Vec<f64>,
    ) -> Result<Self> {
        check_label_pair(&data_labels, &template_labels)?;
        if cluster_weights.len() != data_labels.n_clusters() {
            return Err(Error::Input(format!(
                "{} weights for {} clusters",
                cluster_weights.len(),
                data_labels.n_clusters()
            )));
        }
        if cluster_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Input("cluster weights must be >= 0".to_string()));
        }
        let sum: f64 = cluster_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!(
                "cluster weights sum to {sum}, expected 1"
            )));
        }
        Ok(ClusterPriorModel {
            data_labels,
            template_labels,
            cluster_weights,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.data_labels.n_clusters()
    }

    pub fn data_labels(&self) -> &ClusterAssignment {
        &self.data_labels
    }

    pub fn template_labels(&self) -> &ClusterAssignment {
        &self.template_labels
    }

    /// P(c), indexed by `label - 1`.
    pub fn weights(&self) -> &[f64] {
        &self.cluster_weights
    }
}

fn check_label_pair(data: &ClusterAssignment, template: &ClusterAssignment) -> Result<()> {
    if data.n_clusters() != template.n_clusters() {
        return Err(Error::Input(format!(
            "cluster counts differ: data has {}, template has {}",
            data.n_clusters(),
            template.n_clusters()
        )));
    }
    Ok(())
}

/// Responsibilities P(m|xₙ,c) of one cluster, stored only over that
/// cluster's members of each set.
#[derive(Debug, Clone)]
pub struct PosteriorBlock {
    /// 1-based cluster label.
    pub cluster: usize,
    /// Indices into the data set carrying this label, ascending.
    pub data_idx: Vec<usize>,
    /// Indices into the template set carrying this label, ascending.
    pub template_idx: Vec<usize>,
    /// M_c×N_c responsibilities over the member index lists.
    pub p: DMatrix<f64>,
}

/// Per-cluster E-step output. Cross-cluster responsibilities are identically
/// zero and never materialized.
#[derive(Debug, Clone)]
pub struct ClusterPosteriors {
    blocks: Vec<PosteriorBlock>,
    np_bar: f64,
    pairwise_evals: u64,
}

impl ClusterPosteriors {
    /// One block per cluster, ascending by label.
    pub fn blocks(&self) -> &[PosteriorBlock] {
        &self.blocks
    }

    /// N̄_p = Σ_c P(c)·Σₙₘ P̄(c)ₘₙ.
    pub fn np_bar(&self) -> f64 {
        self.np_bar
    }

    /// Number of pairwise Gaussian terms evaluated to produce the blocks.
    pub fn pairwise_evals(&self) -> u64 {
        self.pairwise_evals
    }

    /// Scatter the blocks into a dense M×N matrix (testing/diagnostics).
    pub fn to_dense(&self, n_template: usize, n_data: usize) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(n_template, n_data);
        for block in &self.blocks {
            for (li, &gm) in block.template_idx.iter().enumerate() {
                for (lj, &gn) in block.data_idx.iter().enumerate() {
                    full[(gm, gn)] = block.p[(li, lj)];
                }
            }
        }
        full
    }
}

/// Per-cluster E-step: within each cluster the posterior follows the plain
/// CPD formula restricted to that cluster's template members, with the
/// outlier constant rescaled to the cluster's own template and data counts so
/// ω keeps its meaning cluster-locally.
pub fn estep_ccpd(
    data: &PointSet,
    transformed: &PointSet,
    sigma2: f64,
    omega: f64,
    prior_model: &ClusterPriorModel,
) -> Result<ClusterPosteriors> {
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
    check_model_shapes(prior_model, data.n_points(), transformed.n_points())?;

    let x = data.matrix();
    let t = transformed.matrix();
    let d = x.ncols();
    let inv = 1.0 / (2.0 * sigma2);

    let mut blocks = Vec::with_capacity(prior_model.n_clusters());
    let mut np_bar = 0.0;
    let mut evals = 0u64;
    for c in 1..=prior_model.n_clusters() {
        let data_idx = prior_model.data_labels.members(c);
        let template_idx = prior_model.template_labels.members(c);
        let (n_c, m_c) = (data_idx.len(), template_idx.len());
        if n_c > 0 && m_c == 0 {
            return Err(Error::DegenerateCluster { cluster: c });
        }
        let mut p = DMatrix::zeros(m_c, n_c);
        let mut block_sum = 0.0;
        if n_c > 0 {
            let log_c = (omega > 0.0).then(|| log_noise_constant(d, sigma2, omega, m_c, n_c));
            let mut exponents = vec![0.0f64; m_c];
            for (lj, &gn) in data_idx.iter().enumerate() {
                let mut max_e = f64::NEG_INFINITY;
                for (li, e) in exponents.iter_mut().enumerate() {
                    *e = -row_sq_dist(x, gn, t, template_idx[li]) * inv;
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
                for (li, e) in exponents.iter().enumerate() {
                    let v = (e - shift).exp();
                    p[(li, lj)] = v;
                    denom += v;
                }
                let inv_denom = 1.0 / denom;
                let mut col_sum = 0.0;
                for li in 0..m_c {
                    p[(li, lj)] *= inv_denom;
                    col_sum += p[(li, lj)];
                }
                block_sum += col_sum;
            }
            evals += (m_c as u64) * (n_c as u64);
        }
        np_bar += prior_model.cluster_weights[c - 1] * block_sum;
        blocks.push(PosteriorBlock {
            cluster: c,
            data_idx,
            template_idx,
            p,
        });
    }
    Ok(ClusterPosteriors {
        blocks,
        np_bar,
        pairwise_evals: evals,
    })
}

fn check_model_shapes(model: &ClusterPriorModel, n_data: usize, n_template: usize) -> Result<()> {
    if model.data_labels.len() != n_data {
        return Err(Error::Input(format!(
            "data labeling covers {} points but the data set has {n_data}",
            model.data_labels.len()
        )));
    }
    if model.template_labels.len() != n_template {
        return Err(Error::Input(format!(
            "template labeling covers {} points but the template has {n_template}",
            model.template_labels.len()
        )));
    }
    Ok(())
}

/// Cluster-blended coefficient row weights Σ_c P(c)·d(P̄(c)1) and right-hand
/// accumulation Σ_c P(c)·P̄(c)X, scattered to global template rows.
fn blended_rows(
    posteriors: &ClusterPosteriors,
    prior_model: &ClusterPriorModel,
    data: &PointSet,
    n_template: usize,
) -> (Vec<f64>, DMatrix<f64>) {
    let x = data.matrix();
    let d = x.ncols();
    let mut row_weight = vec![0.0f64; n_template];
    let mut px = DMatrix::zeros(n_template, d);
    for block in &posteriors.blocks {
        let pc = prior_model.cluster_weights[block.cluster - 1];
        if block.data_idx.is_empty() {
            continue;
        }
        let x_c = DMatrix::from_fn(block.data_idx.len(), d, |i, j| x[(block.data_idx[i], j)]);
        let px_c = &block.p * x_c;
        for (li, &gm) in block.template_idx.iter().enumerate() {
            let rs: f64 = block.p.row(li).iter().sum();
            row_weight[gm] += pc * rs;
            for c in 0..d {
                px[(gm, c)] += pc * px_c[(li, c)];
            }
        }
    }
    (row_weight, px)
}

/// Solve the blended M-step system
/// (Σ_c P(c)·d(P̄(c)1)·G + λσ²I)·W = Σ_c P(c)·(P̄(c)X − d(P̄(c)1)Y).
pub fn mstep_solve_ccpd(
    kernel: &KernelMatrix,
    posteriors: &ClusterPosteriors,
    prior_model: &ClusterPriorModel,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
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
    if data.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: template.dim(),
            actual: data.dim(),
        });
    }
    check_model_shapes(prior_model, data.n_points(), template.n_points())?;

    let g = kernel.matrix();
    let y = template.matrix();
    let m = g.nrows();
    let d = y.ncols();
    let (row_weight, px) = blended_rows(posteriors, prior_model, data, m);

    let shift = lambda * sigma2;
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        let s = row_weight[i];
        for j in 0..m {
            a[(i, j)] = s * g[(i, j)];
        }
        a[(i, i)] += shift;
    }
    let mut b = px;
    for i in 0..m {
        let s = row_weight[i];
        for c in 0..d {
            b[(i, c)] -= s * y[(i, c)];
        }
    }
    solve_dense(&a, &b)
}

/// Variance update
/// σ² = (tr(Xᵀd(ΣP(c)P̄(c)ᵀ1)X) − 2·tr((ΣP(c)P̄(c)·X)ᵀT) + tr(Tᵀd(ΣP(c)P̄(c)1)T)) / (N̄_p·D)
/// with T = Y + G·W, clamped at zero. The first trace weighs data points by
/// column sums, the third weighs template points by row sums.
pub fn update_sigma2_ccpd(
    data: &PointSet,
    template: &PointSet,
    kernel: &KernelMatrix,
    w: &DMatrix<f64>,
    posteriors: &ClusterPosteriors,
    prior_model: &ClusterPriorModel,
) -> Result<f64> {
    if !(posteriors.np_bar() > 0.0) {
        return Err(Error::DegeneratePosterior);
    }
    check_model_shapes(prior_model, data.n_points(), template.n_points())?;
    let x = data.matrix();
    let t = template.matrix() + kernel.displacement(w);
    let (n, m, d) = (x.nrows(), t.nrows(), x.ncols());

    let mut col_weight = vec![0.0f64; n];
    for block in &posteriors.blocks {
        let pc = prior_model.cluster_weights[block.cluster - 1];
        for (lj, &gn) in block.data_idx.iter().enumerate() {
            let cs: f64 = block.p.column(lj).iter().sum();
            col_weight[gn] += pc * cs;
        }
    }
    let (row_weight, px) = blended_rows(posteriors, prior_model, data, m);

    let mut t1 = 0.0;
    for (col, &cw) in col_weight.iter().enumerate() {
        t1 += cw * x.row(col).norm_squared();
    }
    let t2 = px.dot(&t);
    let mut t3 = 0.0;
    for (row, &rw) in row_weight.iter().enumerate() {
        t3 += rw * t.row(row).norm_squared();
    }
    Ok(((t1 - 2.0 * t2 + t3) / (posteriors.np_bar() * d as f64)).max(0.0))
}

/// Blended M-step objective at coefficients `w`:
/// (1/(2σ²))·Σ_c P(c)·Σₙₘ P̄(c)ₘₙ‖xₙ−(yₘ+(GW)ₘ)‖² + (λ/2)·tr(WᵀGW).
pub fn mstep_objective_ccpd(
    kernel: &KernelMatrix,
    posteriors: &ClusterPosteriors,
    prior_model: &ClusterPriorModel,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
    w: &DMatrix<f64>,
) -> f64 {
    let gw = kernel.displacement(w);
    let moved = template.matrix() + &gw;
    let x = data.matrix();
    let mut data_term = 0.0;
    for block in &posteriors.blocks {
        let pc = prior_model.cluster_weights[block.cluster - 1];
        let mut block_term = 0.0;
        for (lj, &gn) in block.data_idx.iter().enumerate() {
            for (li, &gm) in block.template_idx.iter().enumerate() {
                let p = block.p[(li, lj)];
                if p != 0.0 {
                    block_term += p * row_sq_dist(x, gn, &moved, gm);
                }
            }
        }
        data_term += pc * block_term;
    }
    data_term / (2.0 * sigma2) + 0.5 * lambda * w.dot(&gw)
}

/// Negative log-likelihood of the clustered mixture,
/// −Σₙ log p̄(xₙ) with p̄(xₙ) = P(cₙ)·(ω/N_c + (1−ω)·(1/M_c)·Σ_{m∈cₙ} N(xₙ; tₘ, σ²)).
/// Sentinel-labeled points belong to the zero-weight overflow cluster and are
/// excluded from the sum. Reduces exactly to the plain CPD likelihood at C=1.
pub fn ccpd_negative_log_likelihood(
    data: &PointSet,
    transformed: &PointSet,
    sigma2: f64,
    omega: f64,
    prior_model: &ClusterPriorModel,
) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::parameter("sigma2", "must be positive and finite"));
    }
    if !(0.0..1.0).contains(&omega) {
        return Err(Error::parameter("omega", "must satisfy 0 <= omega < 1"));
    }
    check_model_shapes(prior_model, data.n_points(), transformed.n_points())?;
    let x = data.matrix();
    let t = transformed.matrix();
    let d = x.ncols();
    let inv = 1.0 / (2.0 * sigma2);
    let log_norm = -0.5 * (d as f64) * (2.0 * PI * sigma2).ln();

    // per-cluster member lists and sizes, fetched once
    let c_total = prior_model.n_clusters();
    let mut template_members = Vec::with_capacity(c_total);
    let mut data_counts = vec![0usize; c_total];
    for c in 1..=c_total {
        template_members.push(prior_model.template_labels.members(c));
        data_counts[c - 1] = prior_model.data_labels.members(c).len();
    }

    let mut nll = 0.0;
    for (i, &label) in prior_model.data_labels.labels().iter().enumerate() {
        if label == UNCLUSTERED {
            continue;
        }
        let members = &template_members[label - 1];
        if members.is_empty() {
            return Err(Error::DegenerateCluster { cluster: label });
        }
        let m_c = members.len();
        let n_c = data_counts[label - 1];
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(m_c);
        for &gm in members {
            let e = -row_sq_dist(x, i, t, gm) * inv;
            exps.push(e);
            if e > max_e {
                max_e = e;
            }
        }
        let sum: f64 = exps.iter().map(|e| (e - max_e).exp()).sum();
        let log_mix = (1.0 - omega).ln() - (m_c as f64).ln() + log_norm + max_e + sum.ln();
        let log_noise = if omega > 0.0 {
            (omega / n_c as f64).ln()
        } else {
            f64::NEG_INFINITY
        };
        nll -= prior_model.cluster_weights[label - 1].ln() + log_add_exp(log_noise, log_mix);
    }
    Ok(nll)
}

/// Register `template` onto `data` with the clustered EM loop.
pub fn register_ccpd(
    data: &PointSet,
    template: &PointSet,
    prior_model: &ClusterPriorModel,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if data.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: template.dim(),
            actual: data.dim(),
        });
    }
    check_model_shapes(prior_model, data.n_points(), template.n_points())?;

    let kernel = gaussian_kernel(template, config.beta_sq)?;
    let y = template.matrix();
    let mut sigma2 = init_sigma2(data, template)?.max(config.sigma2_floor);
    let mut transformed = template.clone();
    let mut w = DMatrix::zeros(template.n_points(), template.dim());
    let mut prev_nll =
        ccpd_negative_log_likelihood(data, &transformed, sigma2, config.omega, prior_model)?;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut termination = TerminationReason::MaxIters;

    for iteration in 1..=config.max_iters {
        let started = Instant::now();
        let posteriors = estep_ccpd(data, &transformed, sigma2, config.omega, prior_model)?;
        w = mstep_solve_ccpd(
            &kernel,
            &posteriors,
            prior_model,
            data,
            template,
            config.lambda,
            sigma2,
        )
        .map_err(|e| e.at_iteration(iteration))?;
        transformed = PointSet::from_matrix_unchecked(y + kernel.displacement(&w));
        let q_value = mstep_objective_ccpd(
            &kernel,
            &posteriors,
            prior_model,
            data,
            template,
            config.lambda,
            sigma2,
            &w,
        );
        let updated = update_sigma2_ccpd(data, template, &kernel, &w, &posteriors, prior_model)?;
        let floor_hit = updated < config.sigma2_floor;
        sigma2 = updated.max(config.sigma2_floor);
        let nll =
            ccpd_negative_log_likelihood(data, &transformed, sigma2, config.omega, prior_model)?;
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
