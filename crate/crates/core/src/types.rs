//! Core domain types: point sets, cluster labelings, solver configuration,
//! and registration results.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::DisplacementField;

/// Label value marking a point that belongs to no declared cluster
/// (e.g. an injected outlier). Such points are skipped by cluster metrics
/// and receive zero responsibility from the clustered solver.
pub const UNCLUSTERED: usize = 0;

/// An ordered set of N points in D dimensions, stored as an N×D row-major
/// matrix. Point order is significant and preserved by every operation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: DMatrix<f64>,
}

impl PointSet {
    /// Wrap an N×D coordinate matrix. Requires N ≥ 1, D ≥ 1 and finite entries.
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::Input(format!(
                "point set must be non-empty, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "point set contains a non-finite coordinate".to_string(),
            ));
        }
        Ok(PointSet { points })
    }

    /// Build from per-point coordinate rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("point set must be non-empty".to_string()));
        }
        let dim = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Input(format!(
                "ragged point rows: expected {} coordinates, got {}",
                dim,
                bad.len()
            )));
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Coordinates of point `i`.
    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    pub(crate) fn from_matrix_unchecked(points: DMatrix<f64>) -> Self {
        PointSet { points }
    }
}

/// Squared Euclidean distance between row `i` of `a` and row `j` of `b`.
#[inline]
pub(crate) fn row_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for d in 0..a.ncols() {
        let diff = a[(i, d)] - b[(j, d)];
        acc += diff * diff;
    }
    acc
}

/// A per-point cluster labeling. Labels 1..=C name the declared clusters;
/// label [`UNCLUSTERED`] (0) marks points outside every cluster. Every
/// declared cluster must own at least one point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("cluster assignment is empty".to_string()));
        }
        if n_clusters == 0 {
            return Err(Error::Input(
                "cluster assignment declares zero clusters".to_string(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > n_clusters) {
            return Err(Error::Input(format!(
                "label {bad} exceeds declared cluster count {n_clusters}"
            )));
        }
        let mut seen = vec![false; n_clusters + 1];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(c) = (1..=n_clusters).find(|&c| !seen[c]) {
            return Err(Error::Input(format!("declared cluster {c} has no points")));
        }
        Ok(ClusterAssignment { labels, n_clusters })
    }

    /// A single cluster covering every point.
    pub fn single_cluster(len: usize) -> Self {
        ClusterAssignment {
            labels: vec![1; len],
            n_clusters: 1,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the points labeled `c`, in point order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect()
    }

    /// Number of points per declared cluster, indexed by `label - 1`.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters];
        for &l in &self.labels {
            if l != UNCLUSTERED {
                sizes[l - 1] += 1;
            }
        }
        sizes
    }
}

/// Registration parameters shared by all three solvers.
///
/// Defaults follow the reference settings β²=2, λ=2, ω=0.1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Squared width β² of the motion-coherence kernel.
    pub beta_sq: f64,
    /// Regularization weight λ on the displacement coefficients.
    pub lambda: f64,
    /// Expected outlier fraction ω ∈ [0, 1). ω = 1 is rejected because the
    /// posterior noise constant divides by 1−ω.
    pub omega: f64,
    /// Hard cap on EM iterations.
    pub max_iters: usize,
    /// Relative change in negative log-likelihood below which EM stops.
    pub rel_tol: f64,
    /// σ² value at which the variance is clamped and the loop terminates.
    pub sigma2_floor: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            beta_sq: 2.0,
            lambda: 2.0,
            omega: 0.1,
            max_iters: 150,
            rel_tol: 1e-5,
            sigma2_floor: 1e-8,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0 && self.beta_sq.is_finite()) {
            return Err(Error::parameter("beta_sq", "must be positive and finite"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::parameter("lambda", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::parameter("omega", "must satisfy 0 <= omega < 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::parameter("max_iters", "must be at least 1"));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::parameter("rel_tol", "must be positive and finite"));
        }
        if !(self.sigma2_floor > 0.0 && self.sigma2_floor.is_finite()) {
            return Err(Error::parameter(
                "sigma2_floor",
                "must be positive and finite",
            ));
        }
        Ok(())
    }
}

/// Why an EM loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    /// Relative NLL change dropped below `rel_tol`.
    RelTol,
    /// σ² fell to `sigma2_floor`; the fit is as tight as representable.
    Sigma2Floor,
    /// `max_iters` reached without meeting the tolerance.
    MaxIters,
}

/// One EM iteration of a registration run. Doubles as the on-disk run-log
/// record (one JSON object per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based EM iteration index.
    pub iteration: usize,
    /// σ² after this iteration's variance update (clamped at the floor).
    pub sigma2: f64,
    /// Negative log-likelihood at the iteration's final parameters.
    pub nll: f64,
    /// M-step objective (data term + any prior term + λ/2·tr(WᵀGW)) at the
    /// accepted W, using the σ² the solve was performed with.
    pub q_value: f64,
    /// Wall-clock duration of the iteration in milliseconds. Excluded from
    /// determinism comparisons.
    pub wall_ms: f64,
}

/// Output of a registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// The learned displacement field (coefficients W over the template).
    pub field: DisplacementField,
    /// The aligned template, template + G·W.
    pub transformed: PointSet,
    /// Final variance σ².
    pub sigma2_final: f64,
    /// Number of EM iterations executed; equals `trace.len()`.
    pub iterations: usize,
    /// Per-iteration diagnostics.
    pub trace: Vec<IterationRecord>,
    pub termination: TerminationReason,
}

impl RegistrationResult {
    /// True unless the loop hit `max_iters` without meeting the tolerance.
    pub fn converged(&self) -> bool {
        self.termination != TerminationReason::MaxIters
    }
}
