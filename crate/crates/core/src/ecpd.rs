//! Extended coherent point drift: sparse correspondence priors with
//! reliability weight α² folded into the M-step system.

use nalgebra::DMatrix;

use crate::cpd::{
    check_mstep_inputs, mstep_objective, mstep_solve, run_em, PosteriorMatrix,
};
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::solve::solve_dense;
use crate::types::{
    row_sq_dist, ClusterAssignment, PointSet, RegistrationConfig, RegistrationResult, UNCLUSTERED,
};

/// A sparse set of known (data point, template point) correspondences with a
/// single reliability α². Pairs are kept sorted and unique, so any
/// permutation of the same pair set assembles the identical system.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondencePriors {
    /// 0-based (data index, template index) pairs, sorted ascending.
    pairs: Vec<(usize, usize)>,
    alpha_sq: f64,
}

impl CorrespondencePriors {
    pub fn new(mut pairs: Vec<(usize, usize)>, alpha_sq: f64) -> Result<Self> {
        if !(alpha_sq > 0.0 && alpha_sq.is_finite()) {
            return Err(Error::parameter("alpha_sq", "must be positive and finite"));
        }
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate correspondence pair".to_string()));
        }
        Ok(CorrespondencePriors { pairs, alpha_sq })
    }

    /// No pairs: the solver degenerates to plain CPD bit-for-bit.
    pub fn empty(alpha_sq: f64) -> Result<Self> {
        Self::new(Vec::new(), alpha_sq)
    }

    /// 0-based (data index, template index) pairs in sorted order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn alpha_sq(&self) -> f64 {
        self.alpha_sq
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub(crate) fn validate_bounds(&self, n_data: usize, n_template: usize) -> Result<()> {
        for &(n, m) in &self.pairs {
            if n >= n_data || m >= n_template {
                return Err(Error::Input(format!(
                    "correspondence pair ({}, {}) out of range for N={n_data}, M={n_template}",
                    n + 1,
                    m + 1
                )));
            }
        }
        Ok(())
    }

    /// Template-row sums of the indicator matrix, d(P̃·1).
    fn template_row_sums(&self, n_template: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n_template];
        for &(_, m) in &self.pairs {
            sums[m] += 1.0;
        }
        sums
    }

    /// P̃·X accumulated from the pair list.
    fn indicator_times_data(&self, data: &PointSet, n_template: usize) -> DMatrix<f64> {
        let x = data.matrix();
        let mut px = DMatrix::zeros(n_template, x.ncols());
        for &(n, m) in &self.pairs {
            for c in 0..x.ncols() {
                px[(m, c)] += x[(n, c)];
            }
        }
        px
    }
}

/// Build the dense within-cluster prior set: every (data, template) pair
/// whose points carry the same declared cluster label becomes a
/// correspondence. Sentinel-labeled points contribute no pairs.
pub fn priors_from_clusters(
    data_labels: &ClusterAssignment,
    template_labels: &ClusterAssignment,
    alpha_sq: f64,
) -> Result<CorrespondencePriors> {
    if data_labels.n_clusters() != template_labels.n_clusters() {
        return Err(Error::Input(format!(
            "cluster counts differ: data has {}, template has {}",
            data_labels.n_clusters(),
            template_labels.n_clusters()
        )));
    }
    let mut pairs = Vec::new();
    for (n, &ln) in data_labels.labels().iter().enumerate() {
        if ln == UNCLUSTERED {
            continue;
        }
        for (m, &lm) in template_labels.labels().iter().enumerate() {
            if lm == ln {
                pairs.push((n, m));
            }
        }
    }
    CorrespondencePriors::new(pairs, alpha_sq)
}

/// Solve the prior-augmented M-step system
/// (d(P1)G + (σ²/α²)d(P̃1)G + λσ²I)·W = PX − d(P1)Y + (σ²/α²)(P̃X − d(P̃1)Y).
///
/// With no pairs this is exactly [`mstep_solve`], same code path.
pub fn mstep_solve_ecpd(
    kernel: &KernelMatrix,
    posterior: &PosteriorMatrix,
    priors: &CorrespondencePriors,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    if priors.is_empty() {
        return mstep_solve(kernel, posterior, data, template, lambda, sigma2);
    }
    check_mstep_inputs(kernel, posterior.matrix(), data, template, lambda, sigma2)?;
    priors.validate_bounds(data.n_points(), template.n_points())?;

    let g = kernel.matrix();
    let y = template.matrix();
    let m = g.nrows();
    let d = y.ncols();
    let weight = sigma2 / priors.alpha_sq();

    let post_sums = posterior.row_sums();
    let prior_sums = priors.template_row_sums(m);
    let shift = lambda * sigma2;
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        let s = post_sums[i] + weight * prior_sums[i];
        for j in 0..m {
            a[(i, j)] = s * g[(i, j)];
        }
        a[(i, i)] += shift;
    }

    let mut b = posterior.matrix() * data.matrix();
    let prior_px = priors.indicator_times_data(data, m);
    for i in 0..m {
        for c in 0..d {
            b[(i, c)] += weight * prior_px[(i, c)]
                - (post_sums[i] + weight * prior_sums[i]) * y[(i, c)];
        }
    }
    solve_dense(&a, &b)
}

/// Prior-augmented M-step objective: the plain CPD objective plus
/// (1/(2α²))·Σ_{(n,m)} ‖xₙ−(yₘ+(GW)ₘ)‖². `mstep_solve_ecpd` returns its
/// stationary point.
#[allow(clippy::too_many_arguments)]
pub fn mstep_objective_ecpd(
    kernel: &KernelMatrix,
    posterior: &PosteriorMatrix,
    priors: &CorrespondencePriors,
    data: &PointSet,
    template: &PointSet,
    lambda: f64,
    sigma2: f64,
    w: &DMatrix<f64>,
) -> f64 {
    let base = mstep_objective(kernel, posterior, data, template, lambda, sigma2, w);
    if priors.is_empty() {
        return base;
    }
    let moved = template.matrix() + kernel.displacement(w);
    let x = data.matrix();
    let mut prior_term = 0.0;
    for &(n, m) in priors.pairs() {
        prior_term += row_sq_dist(x, n, &moved, m);
    }
    base + prior_term / (2.0 * priors.alpha_sq())
}

/// Register `template` onto `data` with correspondence priors in the M-step.
/// The E-step and variance update are those of plain CPD.
pub fn register_ecpd(
    data: &PointSet,
    template: &PointSet,
    priors: &CorrespondencePriors,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    run_em(data, template, config, Some(priors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpd::{estep, register_cpd};
    use crate::kernel::gaussian_kernel;
    use crate::test_util::{gauss_jordan_solve, numeric_gradient, random_point_set};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn priors_reject_bad_alpha_and_duplicates() {
        assert!(CorrespondencePriors::new(vec![], 0.0).is_err());
        assert!(CorrespondencePriors::new(vec![], -1.0).is_err());
        assert!(CorrespondencePriors::new(vec![(0, 0), (0, 0)], 1.0).is_err());
        assert!(CorrespondencePriors::new(vec![(0, 0), (0, 1)], 1.0).is_ok());
    }

    #[test]
    fn cluster_priors_single_cluster_is_full_grid() {
        let da = ClusterAssignment::new(vec![1, 1, 1], 1).unwrap();
        let ta = ClusterAssignment::new(vec![1, 1], 1).unwrap();
        let priors = priors_from_clusters(&da, &ta, 1e5).unwrap();
        assert_eq!(priors.len(), 6);
    }

    #[test]
    fn cluster_priors_disjoint_labels_are_empty() {
        let da = ClusterAssignment::new(vec![1, 1, 2], 2).unwrap();
        let ta = ClusterAssignment::new(vec![2, 1], 2).unwrap();
        // clusters overlap here; build truly disjoint via sentinel labels
        let da_sentinel = ClusterAssignment::new(vec![0, 0, 1], 1).unwrap();
        let ta_sentinel = ClusterAssignment::new(vec![1, 0], 1).unwrap();
        let priors = priors_from_clusters(&da_sentinel, &ta_sentinel, 1e5).unwrap();
        assert_eq!(priors.len(), 1);
        let full = priors_from_clusters(&da, &ta, 1e5).unwrap();
        assert_eq!(full.len(), 2 * 1 + 1 * 1);
    }

    #[test]
    fn cluster_priors_count_matches_label_products() {
        // data clusters of sizes (2,1), template clusters of sizes (1,2)
        let da = ClusterAssignment::new(vec![1, 1, 2], 2).unwrap();
        let ta = ClusterAssignment::new(vec![1, 2, 2], 2).unwrap();
        let priors = priors_from_clusters(&da, &ta, 1e5).unwrap();
        assert_eq!(priors.len(), 2 * 1 + 1 * 2);
        let expected: Vec<(usize, usize)> = vec![(0, 0), (1, 0), (2, 1), (2, 2)];
        assert_eq!(priors.pairs(), expected.as_slice());
    }

    #[test]
    fn cluster_priors_reject_mismatched_cluster_counts() {
        let da = ClusterAssignment::new(vec![1, 2], 2).unwrap();
        let ta = ClusterAssignment::new(vec![1], 1).unwrap();
        assert!(priors_from_clusters(&da, &ta, 1e5).is_err());
    }

    #[test]
    fn empty_priors_reduce_to_cpd_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_point_set(&mut rng, 8, 2, 2.0);
        let y = random_point_set(&mut rng, 6, 2, 2.0);
        let kernel = gaussian_kernel(&y, 2.0).unwrap();
        let post = estep(&x, &y, 1.0, 0.1).unwrap();
        let empty = CorrespondencePriors::empty(1e5).unwrap();
        let w_cpd = mstep_solve(&kernel, &post, &x, &y, 2.0, 1.0).unwrap();
        let w_ecpd = mstep_solve_ecpd(&kernel, &post, &empty, &x, &y, 2.0, 1.0).unwrap();
        for (a, b) in w_cpd.iter().zip(w_ecpd.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn huge_alpha_matches_cpd_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_point_set(&mut rng, 6, 2, 2.0);
        let y = random_point_set(&mut rng, 6, 2, 2.0);
        let kernel = gaussian_kernel(&y, 2.0).unwrap();
        let post = estep(&x, &y, 0.9, 0.1).unwrap();
        let priors = CorrespondencePriors::new(vec![(0, 0), (3, 2)], 1e20).unwrap();
        let w_cpd = mstep_solve(&kernel, &post, &x, &y, 2.0, 0.9).unwrap();
        let w_ecpd = mstep_solve_ecpd(&kernel, &post, &priors, &x, &y, 2.0, 0.9).unwrap();
        for (a, b) in w_cpd.iter().zip(w_ecpd.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn pinned_pair_matches_explicit_assembly_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_point_set(&mut rng, 4, 2, 2.0);
        let y = random_point_set(&mut rng, 4, 2, 2.0);
        let kernel = gaussian_kernel(&y, 1.5).unwrap();
        let post = estep(&x, &y, 0.7, 0.05).unwrap();
        let priors = CorrespondencePriors::new(vec![(1, 2)], 0.01).unwrap();
        let (lambda, sigma2) = (2.0, 0.7);
        let w = mstep_solve_ecpd(&kernel, &post, &priors, &x, &y, lambda, sigma2).unwrap();

        // dense indicator assembly, solved by the independent oracle
        let g = kernel.matrix();
        let mut ptilde = DMatrix::zeros(4, 4);
        ptilde[(2, 1)] = 1.0; // template row 2, data column 1
        let weight = sigma2 / 0.01;
        let post_sums = post.row_sums();
        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            let prior_sum: f64 = ptilde.row(i).iter().sum();
            for j in 0..4 {
                a[(i, j)] = (post_sums[i] + weight * prior_sum) * g[(i, j)];
            }
            a[(i, i)] += lambda * sigma2;
        }
        let mut b = post.matrix() * x.matrix() + weight * (&ptilde * x.matrix());
        for i in 0..4 {
            let prior_sum: f64 = ptilde.row(i).iter().sum();
            for c in 0..2 {
                b[(i, c)] -= (post_sums[i] + weight * prior_sum) * y.matrix()[(i, c)];
            }
        }
        let oracle = gauss_jordan_solve(&a, &b);
        for i in 0..4 {
            for c in 0..2 {
                assert_relative_eq!(w[(i, c)], oracle[(i, c)], max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pair_permutation_assembles_identical_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = random_point_set(&mut rng, 5, 2, 2.0);
        let y = random_point_set(&mut rng, 5, 2, 2.0);
        let kernel = gaussian_kernel(&y, 2.0).unwrap();
        let post = estep(&x, &y, 1.0, 0.1).unwrap();
        let fwd = CorrespondencePriors::new(vec![(0, 1), (2, 3), (4, 0)], 100.0).unwrap();
        let rev = CorrespondencePriors::new(vec![(4, 0), (0, 1), (2, 3)], 100.0).unwrap();
        let w1 = mstep_solve_ecpd(&kernel, &post, &fwd, &x, &y, 2.0, 1.0).unwrap();
        let w2 = mstep_solve_ecpd(&kernel, &post, &rev, &x, &y, 2.0, 1.0).unwrap();
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ecpd_solution_is_stationary_point_of_full_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = random_point_set(&mut rng, 6, 2, 1.5);
        let y = random_point_set(&mut rng, 6, 2, 1.5);
        let kernel = gaussian_kernel(&y, 2.0).unwrap();
        let post = estep(&x, &y, 1.0, 0.1).unwrap();
        let priors = CorrespondencePriors::new(vec![(0, 0), (5, 4)], 0.5).unwrap();
        let (lambda, sigma2) = (2.0, 1.0);
        let w = mstep_solve_ecpd(&kernel, &post, &priors, &x, &y, lambda, sigma2).unwrap();
        let grad = numeric_gradient(&w, 1e-6, |wp| {
            mstep_objective_ecpd(&kernel, &post, &priors, &x, &y, lambda, sigma2, wp)
        });
        let max_grad = grad.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_grad <= 1e-4, "gradient entry {max_grad}");
    }

    #[test]
    fn register_with_empty_priors_reproduces_cpd_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = random_point_set(&mut rng, 12, 2, 2.0);
        let y = random_point_set(&mut rng, 10, 2, 2.0);
        let config = RegistrationConfig::default();
        let cpd = register_cpd(&x, &y, &config).unwrap();
        let empty = CorrespondencePriors::empty(1e5).unwrap();
        let ecpd = register_ecpd(&x, &y, &empty, &config).unwrap();
        assert_eq!(cpd.iterations, ecpd.iterations);
        assert_eq!(cpd.sigma2_final.to_bits(), ecpd.sigma2_final.to_bits());
        for (a, b) in cpd.trace.iter().zip(&ecpd.trace) {
            assert_eq!(a.nll.to_bits(), b.nll.to_bits());
            assert_eq!(a.q_value.to_bits(), b.q_value.to_bits());
        }
        for (a, b) in cpd
            .field
            .coefficients()
            .iter()
            .zip(ecpd.field.coefficients().iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pinned_pair_pulls_template_point_closer() {
        // y0 sits ambiguously between two data points; the prior resolves it
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut template_rows = vec![vec![0.0, 0.0]];
        let mut data_rows = vec![vec![0.0, 1.5], vec![0.0, -1.5]];
        for _ in 0..6 {
            let p = vec![rng.gen_range(3.0..6.0), rng.gen_range(-1.0..1.0)];
            template_rows.push(p.clone());
            data_rows.push(p);
        }
        let template = PointSet::from_rows(&template_rows).unwrap();
        let data = PointSet::from_rows(&data_rows).unwrap();
        let config = RegistrationConfig {
            omega: 0.0,
            ..Default::default()
        };
        let cpd = register_cpd(&data, &template, &config).unwrap();
        let priors = CorrespondencePriors::new(vec![(0, 0)], 1e-2).unwrap();
        let ecpd = register_ecpd(&data, &template, &priors, &config).unwrap();
        let dist = |r: &RegistrationResult| {
            row_sq_dist(r.transformed.matrix(), 0, data.matrix(), 0).sqrt()
        };
        assert!(
            dist(&ecpd) < dist(&cpd),
            "prior did not improve pinned pair: {} vs {}",
            dist(&ecpd),
            dist(&cpd)
        );
    }

    #[test]
    fn final_coefficients_vary_continuously_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let y = random_point_set(&mut rng, 8, 2, 2.0);
        let w_true = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-0.1..0.1));
        let kernel = gaussian_kernel(&y, 2.0).unwrap();
        let x = PointSet::new(y.matrix() + kernel.displacement(&w_true)).unwrap();
        let config = RegistrationConfig::default();
        let alpha_sq = 10.0;
        let run = |a: f64| {
            let priors =
                priors_from_clusters(
                    &ClusterAssignment::single_cluster(8),
                    &ClusterAssignment::single_cluster(8),
                    a,
                )
                .unwrap();
            register_ecpd(&x, &y, &priors, &config).unwrap()
        };
        let w1 = run(alpha_sq);
        let w2 = run(alpha_sq * 1.01);
        let diff = (w1.field.coefficients() - w2.field.coefficients()).norm();
        let scale = w1.field.coefficients().norm().max(1e-12);
        assert!(
            diff / scale < 0.01,
            "relative change {} for 1% alpha change",
            diff / scale
        );
    }

    #[test]
    fn out_of_range_pairs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let x = random_point_set(&mut rng, 3, 2, 1.0);
        let y = random_point_set(&mut rng, 3, 2, 1.0);
        let priors = CorrespondencePriors::new(vec![(0, 5)], 1.0).unwrap();
        let err = register_ecpd(&x, &y, &priors, &RegistrationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
