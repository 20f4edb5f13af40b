//! Registration quality metrics: Hausdorff distance and its per-cluster mean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{row_sq_dist, ClusterAssignment, PointSet};

/// Point count above which nearest-neighbor queries go through a uniform
/// grid. The grid is a pruning accelerator only: results are bit-identical
/// to the brute-force double loop.
const GRID_THRESHOLD: usize = 1000;

/// Quality report for a pair of clustered point sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Plain symmetric Hausdorff distance over the full sets.
    pub hausdorff: f64,
    /// Mean of the per-cluster Hausdorff distances.
    pub cluster_hausdorff: f64,
    /// H(A(c), B(c)) for each cluster, indexed by `label - 1`.
    pub per_cluster: Vec<f64>,
}

/// Symmetric Hausdorff distance H(A,B) = max(h(A,B), h(B,A)) with
/// h(A,B) = max_{a∈A} min_{b∈B} ‖a−b‖.
pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let ia: Vec<usize> = (0..a.n_points()).collect();
    let ib: Vec<usize> = (0..b.n_points()).collect();
    Ok(hausdorff_subsets(a.matrix(), &ia, b.matrix(), &ib))
}

/// Per-cluster Hausdorff distances and their mean. Points carrying the
/// sentinel label are excluded; every declared cluster must be populated on
/// both sides.
pub fn cluster_hausdorff(
    a: &PointSet,
    a_labels: &ClusterAssignment,
    b: &PointSet,
    b_labels: &ClusterAssignment,
) -> Result<MetricReport> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a_labels.len() != a.n_points() || b_labels.len() != b.n_points() {
        return Err(Error::Input(
            "labeling length does not match its point set".to_string(),
        ));
    }
    if a_labels.n_clusters() != b_labels.n_clusters() {
        return Err(Error::Input(format!(
            "cluster counts differ: {} vs {}",
            a_labels.n_clusters(),
            b_labels.n_clusters()
        )));
    }
    let c_total = a_labels.n_clusters();
    let mut per_cluster = Vec::with_capacity(c_total);
    for c in 1..=c_total {
        let ia = a_labels.members(c);
        let ib = b_labels.members(c);
        if ia.is_empty() || ib.is_empty() {
            return Err(Error::Input(format!(
                "cluster {c} is empty on one side"
            )));
        }
        per_cluster.push(hausdorff_subsets(a.matrix(), &ia, b.matrix(), &ib));
    }
    let cluster_hausdorff = per_cluster.iter().sum::<f64>() / c_total as f64;
    Ok(MetricReport {
        hausdorff: hausdorff(a, b)?,
        cluster_hausdorff,
        per_cluster,
    })
}

fn hausdorff_subsets(a: &DMatrix<f64>, ia: &[usize], b: &DMatrix<f64>, ib: &[usize]) -> f64 {
    let fwd = directed_sq(a, ia, b, ib);
    let back = directed_sq(b, ib, a, ia);
    fwd.max(back).sqrt()
}

/// max over `ia` of the squared distance to the nearest point of `ib`.
fn directed_sq(a: &DMatrix<f64>, ia: &[usize], b: &DMatrix<f64>, ib: &[usize]) -> f64 {
    let grid = (ib.len() >= GRID_THRESHOLD && b.ncols() <= 3).then(|| Grid::build(b, ib));
    let mut worst = 0.0f64;
    for &i in ia {
        let best = match &grid {
            Some(g) => g.nearest_sq(a, i, b),
            None => brute_nearest_sq(a, i, b, ib),
        };
        if best > worst {
            worst = best;
        }
    }
    worst
}

fn brute_nearest_sq(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, ib: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &j in ib {
        let d2 = row_sq_dist(a, i, b, j);
        if d2 < best {
            best = d2;
        }
    }
    best
}

/// Uniform bucket grid over ≤3-dimensional points, searched in expanding
/// Chebyshev rings. A ring at index r can only hold points at distance
/// ≥ (r−1)·cell from the query, which bounds the search exactly.
struct Grid {
    cell: f64,
    origin: Vec<f64>,
    dims: Vec<i64>,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn build(b: &DMatrix<f64>, ib: &[usize]) -> Self {
        let d = b.ncols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &j in ib {
            for c in 0..d {
                lo[c] = lo[c].min(b[(j, c)]);
                hi[c] = hi[c].max(b[(j, c)]);
            }
        }
        let max_extent = (0..d).map(|c| hi[c] - lo[c]).fold(0.0f64, f64::max);
        // aim for a handful of points per cell along the largest extent
        let cells_per_axis = ((ib.len() as f64).powf(1.0 / d as f64).ceil() as i64).max(1);
        let cell = if max_extent > 0.0 {
            max_extent / cells_per_axis as f64
        } else {
            1.0
        };
        // dims come from the raw indices themselves, so every point sits
        // strictly inside its cell's span and the ring bound stays exact
        let raw: Vec<Vec<i64>> = ib
            .iter()
            .map(|&j| {
                (0..d)
                    .map(|c| ((b[(j, c)] - lo[c]) / cell).floor() as i64)
                    .collect()
            })
            .collect();
        let dims: Vec<i64> = (0..d)
            .map(|c| raw.iter().map(|r| r[c]).max().unwrap_or(0) + 1)
            .collect();
        let total: i64 = dims.iter().product();
        let mut buckets = vec![Vec::new(); total as usize];
        for (k, &j) in ib.iter().enumerate() {
            buckets[Self::flat_index(&raw[k], &dims)].push(j);
        }
        Grid {
            cell,
            origin: lo,
            dims,
            buckets,
        }
    }

    fn flat_index(coords: &[i64], dims: &[i64]) -> usize {
        let mut idx = 0i64;
        for (c, &v) in coords.iter().enumerate() {
            idx = idx * dims[c] + v;
        }
        idx as usize
    }

    /// Virtual (unclamped) cell coordinates of a query point.
    fn query_cell(&self, a: &DMatrix<f64>, i: usize) -> Vec<i64> {
        (0..a.ncols())
            .map(|c| ((a[(i, c)] - self.origin[c]) / self.cell).floor() as i64)
            .collect()
    }

    fn nearest_sq(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>) -> f64 {
        let center = self.query_cell(a, i);
        let d = center.len();
        let max_ring: i64 = (0..d)
            .map(|c| (center[c] - 0).abs().max((self.dims[c] - 1 - center[c]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            if best.is_finite() {
                let bound = (r - 1).max(0) as f64 * self.cell;
                if bound * bound >= best {
                    break;
                }
            }
            self.visit_ring(&center, r, &mut |coords| {
                let idx = Self::flat_index(coords, &self.dims);
                for &j in &self.buckets[idx] {
                    let d2 = row_sq_dist(a, i, b, j);
                    if d2 < best {
                        best = d2;
                    }
                }
            });
        }
        best
    }

    /// Invoke `f` on every in-bounds cell at Chebyshev distance exactly `r`
    /// from `center`, in lexicographic order.
    fn visit_ring<F: FnMut(&[i64])>(&self, center: &[i64], r: i64, f: &mut F) {
        let d = center.len();
        let mut coords = vec![0i64; d];
        self.visit_ring_rec(center, r, 0, false, &mut coords, f);
    }

    fn visit_ring_rec<F: FnMut(&[i64])>(
        &self,
        center: &[i64],
        r: i64,
        axis: usize,
        boundary_hit: bool,
        coords: &mut Vec<i64>,
        f: &mut F,
    ) {
        if axis == center.len() {
            if boundary_hit {
                f(coords);
            }
            return;
        }
        for off in -r..=r {
            let v = center[axis] + off;
            if v < 0 || v >= self.dims[axis] {
                continue;
            }
            coords[axis] = v;
            let is_boundary = off.abs() == r;
            // remaining axes can still reach the ring boundary
            self.visit_ring_rec(center, r, axis + 1, boundary_hit || is_boundary, coords, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ps(rows: &[Vec<f64>]) -> PointSet {
        PointSet::from_rows(rows).unwrap()
    }

    fn brute_hausdorff(a: &PointSet, b: &PointSet) -> f64 {
        let directed = |p: &PointSet, q: &PointSet| {
            let mut worst = 0.0f64;
            for i in 0..p.n_points() {
                let mut best = f64::INFINITY;
                for j in 0..q.n_points() {
                    let d2 = row_sq_dist(p.matrix(), i, q.matrix(), j);
                    if d2 < best {
                        best = d2;
                    }
                }
                if best > worst {
                    worst = best;
                }
            }
            worst
        };
        directed(a, b).max(directed(b, a)).sqrt()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = ps(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_is_euclidean_distance() {
        let a = ps(&[vec![0.0, 0.0]]);
        let b = ps(&[vec![3.0, 4.0]]);
        assert_relative_eq!(hausdorff(&a, &b).unwrap(), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn asymmetric_directed_distances_collapse_to_max() {
        let a = ps(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
        let b = ps(&[vec![0.0, 0.0]]);
        assert_relative_eq!(hausdorff(&a, &b).unwrap(), 10.0, epsilon = 1e-15);
    }

    #[test]
    fn hausdorff_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = crate::test_util::random_point_set(&mut rng, 15, 3, 4.0);
            let b = crate::test_util::random_point_set(&mut rng, 9, 3, 4.0);
            assert_eq!(
                hausdorff(&a, &b).unwrap().to_bits(),
                hausdorff(&b, &a).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn hausdorff_rejects_dimension_mismatch() {
        let a = ps(&[vec![0.0, 0.0]]);
        let b = ps(&[vec![0.0, 0.0, 0.0]]);
        assert!(hausdorff(&a, &b).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.gen_range(1..60);
            let m = rng.gen_range(1..60);
            let d = if rng.gen_bool(0.5) { 2 } else { 3 };
            let a = crate::test_util::random_point_set(&mut rng, n, d, 5.0);
            let b = crate::test_util::random_point_set(&mut rng, m, d, 5.0);
            let got = hausdorff(&a, &b).unwrap();
            let expected = brute_hausdorff(&a, &b);
            assert_eq!(got.to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn grid_path_is_bit_identical_to_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for &d in &[2usize, 3] {
            let a = crate::test_util::random_point_set(&mut rng, 300, d, 10.0);
            let b = crate::test_util::random_point_set(&mut rng, 1500, d, 10.0);
            let got = hausdorff(&a, &b).unwrap();
            let expected = brute_hausdorff(&a, &b);
            assert_eq!(got.to_bits(), expected.to_bits());
        }
        // degenerate cloud: all points coincide, grid extent is zero
        let b = ps(&vec![vec![1.0, 1.0]; 1200]);
        let a = ps(&[vec![4.0, 5.0]]);
        assert_relative_eq!(hausdorff(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn cluster_variant_reduces_to_plain_for_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = crate::test_util::random_point_set(&mut rng, 12, 2, 3.0);
        let b = crate::test_util::random_point_set(&mut rng, 10, 2, 3.0);
        let la = ClusterAssignment::single_cluster(12);
        let lb = ClusterAssignment::single_cluster(10);
        let report = cluster_hausdorff(&a, &la, &b, &lb).unwrap();
        let plain = hausdorff(&a, &b).unwrap();
        assert_eq!(report.cluster_hausdorff.to_bits(), plain.to_bits());
        assert_eq!(report.per_cluster.len(), 1);
    }

    #[test]
    fn pairwise_identical_clusters_score_zero() {
        let a = ps(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0], vec![6.0, 5.0]]);
        let labels = ClusterAssignment::new(vec![1, 1, 2, 2], 2).unwrap();
        let report = cluster_hausdorff(&a, &labels, &a, &labels).unwrap();
        assert_eq!(report.cluster_hausdorff, 0.0);
        assert_eq!(report.per_cluster, vec![0.0, 0.0]);
    }

    #[test]
    fn swapped_identical_clusters_expose_the_mismatch() {
        // identical shapes at distance d, swapped between label assignments:
        // plain Hausdorff sees nothing, the cluster variant sees d
        let shape = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.8]];
        let dist = 7.0;
        let mut a_rows = Vec::new();
        let mut b_rows = Vec::new();
        for p in &shape {
            a_rows.push(vec![p[0], p[1]]);
            b_rows.push(vec![p[0] + dist, p[1]]);
        }
        for p in &shape {
            a_rows.push(vec![p[0] + dist, p[1]]);
            b_rows.push(vec![p[0], p[1]]);
        }
        let a = ps(&a_rows);
        let b = ps(&b_rows);
        let labels = ClusterAssignment::new(vec![1, 1, 1, 2, 2, 2], 2).unwrap();
        let report = cluster_hausdorff(&a, &labels, &b, &labels).unwrap();
        assert_relative_eq!(report.hausdorff, 0.0, epsilon = 1e-12);
        assert_relative_eq!(report.per_cluster[0], dist, epsilon = 1e-12);
        assert_relative_eq!(report.per_cluster[1], dist, epsilon = 1e-12);
        assert_relative_eq!(report.cluster_hausdorff, dist, epsilon = 1e-12);
    }

    #[test]
    fn cluster_mean_matches_per_cluster_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = crate::test_util::random_point_set(&mut rng, 20, 2, 3.0);
        let b = crate::test_util::random_point_set(&mut rng, 20, 2, 3.0);
        let labels = ClusterAssignment::new((0..20).map(|i| 1 + i % 3).collect(), 3).unwrap();
        let report = cluster_hausdorff(&a, &labels, &b, &labels).unwrap();
        let mean = report.per_cluster.iter().sum::<f64>() / 3.0;
        assert!((report.cluster_hausdorff - mean).abs() <= 1e-12);
    }

    #[test]
    fn empty_cluster_side_is_rejected_with_its_label() {
        let a = ps(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let b = ps(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let la = ClusterAssignment::new(vec![1, 2], 2).unwrap();
        // side b declares 2 clusters but populates only cluster 1 via sentinel
        let lb = ClusterAssignment::new(vec![1, 2], 2).unwrap();
        assert!(cluster_hausdorff(&a, &la, &b, &lb).is_ok());
        let err = ClusterAssignment::new(vec![1, 1], 2).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn sentinel_points_are_ignored_by_cluster_metric() {
        let a = ps(&[vec![0.0, 0.0], vec![100.0, 100.0]]);
        let b = ps(&[vec![0.0, 0.0]]);
        let la = ClusterAssignment::new(vec![1, 0], 1).unwrap();
        let lb = ClusterAssignment::new(vec![1], 1).unwrap();
        let report = cluster_hausdorff(&a, &la, &b, &lb).unwrap();
        assert_eq!(report.per_cluster[0], 0.0);
        // the plain metric still sees the outlier
        assert!(report.hausdorff > 100.0);
    }

    proptest! {
        #[test]
        fn hausdorff_zero_iff_mutual_subsets(
            xs in proptest::collection::vec((0i8..6, 0i8..6), 1..12),
            ys in proptest::collection::vec((0i8..6, 0i8..6), 1..12),
        ) {
            let a = ps(&xs.iter().map(|&(x, y)| vec![x as f64, y as f64]).collect::<Vec<_>>());
            let b = ps(&ys.iter().map(|&(x, y)| vec![x as f64, y as f64]).collect::<Vec<_>>());
            let h = hausdorff(&a, &b).unwrap();
            let set_a: std::collections::BTreeSet<_> = xs.iter().collect();
            let set_b: std::collections::BTreeSet<_> = ys.iter().collect();
            prop_assert_eq!(h == 0.0, set_a == set_b);
        }

        #[test]
        fn hausdorff_symmetry_property(
            xs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..15),
            ys in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..15),
        ) {
            let a = ps(&xs.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>());
            let b = ps(&ys.iter().map(|&(x, y)| vec![x, y]).collect::<Vec<_>>());
            prop_assert_eq!(
                hausdorff(&a, &b).unwrap().to_bits(),
                hausdorff(&b, &a).unwrap().to_bits()
            );
        }
    }
}
