//! Synthetic clustered scenes with ground-truth deformations, plus a sweep
//! harness that runs the three solvers over scene ensembles and records
//! Hausdorff metrics per (scene, method, alpha) row.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ccpd::{register_ccpd, ClusterPriorModel};
use crate::cpd::register_cpd;
use crate::ecpd::{priors_from_clusters, register_ecpd};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::kernel::DisplacementField;
use crate::metrics::{cluster_hausdorff, hausdorff};
use crate::types::{ClusterAssignment, PointSet, RegistrationConfig, UNCLUSTERED};

fn default_beta_sq() -> f64 {
    2.0
}

/// Recipe for one synthetic scene. Identical specs always generate identical
/// scenes: every random draw comes from one seeded stream in a fixed order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    /// C rows of D coordinates.
    pub cluster_centers: Vec<Vec<f64>>,
    /// Standard deviation of the Gaussian blob around each center.
    pub cluster_spread: f64,
    /// Standard deviation of the ground-truth coefficient entries W*.
    pub deform_magnitude: f64,
    /// Fraction of uniform outliers appended to the data set, in [0, 1).
    pub noise_fraction: f64,
    /// Cluster label pairs whose centers are exchanged in the data only,
    /// creating the label ambiguity the clustered solver resolves.
    #[serde(default)]
    pub swap_clusters: Option<Vec<(usize, usize)>>,
    pub seed: u64,
    /// Kernel width of the ground-truth displacement field.
    #[serde(default = "default_beta_sq")]
    pub beta_sq: f64,
}

/// A generated scene: labeled template and data plus the field that made it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub template: PointSet,
    pub template_labels: ClusterAssignment,
    pub data: PointSet,
    pub data_labels: ClusterAssignment,
    pub ground_truth: DisplacementField,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::parameter("n_clusters", "must be at least 1"));
        }
        if self.points_per_cluster == 0 {
            return Err(Error::parameter("points_per_cluster", "must be at least 1"));
        }
        if self.cluster_centers.len() != self.n_clusters {
            return Err(Error::parameter(
                "cluster_centers",
                format!(
                    "{} centers for {} clusters",
                    self.cluster_centers.len(),
                    self.n_clusters
                ),
            ));
        }
        let d = self.cluster_centers[0].len();
        if d == 0 || self.cluster_centers.iter().any(|c| c.len() != d) {
            return Err(Error::parameter(
                "cluster_centers",
                "centers must share one non-zero dimension",
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::parameter("cluster_spread", "must be positive"));
        }
        if !(self.deform_magnitude >= 0.0 && self.deform_magnitude.is_finite()) {
            return Err(Error::parameter("deform_magnitude", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::parameter(
                "noise_fraction",
                "must satisfy 0 <= noise_fraction < 1",
            ));
        }
        if !(self.beta_sq > 0.0 && self.beta_sq.is_finite()) {
            return Err(Error::parameter("beta_sq", "must be positive"));
        }
        if let Some(swaps) = &self.swap_clusters {
            let mut used = vec![false; self.n_clusters + 1];
            for &(a, b) in swaps {
                if a == 0 || b == 0 || a > self.n_clusters || b > self.n_clusters || a == b {
                    return Err(Error::parameter(
                        "swap_clusters",
                        format!("bad swap pair ({a}, {b})"),
                    ));
                }
                if used[a] || used[b] {
                    return Err(Error::parameter(
                        "swap_clusters",
                        format!("cluster {} appears in more than one swap", if used[a] { a } else { b }),
                    ));
                }
                used[a] = true;
                used[b] = true;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cluster_centers.first().map(|c| c.len()).unwrap_or(0)
    }
}

/// Generate a scene: Gaussian blob template, smooth ground-truth deformation
/// data = template + G·W*, optional cluster swaps applied to the data only,
/// and uniform outliers (sentinel label 0) in the 20%-inflated data bounding
/// box.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let d = spec.dim();
    let m = spec.n_clusters * spec.points_per_cluster;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut template = DMatrix::zeros(m, d);
    let mut labels = Vec::with_capacity(m);
    let mut row = 0;
    for c in 0..spec.n_clusters {
        for _ in 0..spec.points_per_cluster {
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                template[(row, k)] = spec.cluster_centers[c][k] + spec.cluster_spread * z;
            }
            labels.push(c + 1);
            row += 1;
        }
    }
    let template = PointSet::new(template)?;
    let template_labels = ClusterAssignment::new(labels.clone(), spec.n_clusters)?;

    let mut w_true = DMatrix::zeros(m, d);
    for i in 0..m {
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            w_true[(i, k)] = spec.deform_magnitude * z;
        }
    }
    let ground_truth = DisplacementField::new(w_true, template.clone(), spec.beta_sq)?;
    let mut data = ground_truth.apply(&template)?.matrix().clone();

    if let Some(swaps) = &spec.swap_clusters {
        for &(a, b) in swaps {
            for (i, &l) in labels.iter().enumerate() {
                let (from, to) = if l == a {
                    (a, b)
                } else if l == b {
                    (b, a)
                } else {
                    continue;
                };
                for k in 0..d {
                    data[(i, k)] +=
                        spec.cluster_centers[to - 1][k] - spec.cluster_centers[from - 1][k];
                }
            }
        }
    }

    let n_outliers = (spec.noise_fraction * m as f64).round() as usize;
    let mut data_labels = labels;
    if n_outliers > 0 {
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..m {
            for k in 0..d {
                lo[k] = lo[k].min(data[(i, k)]);
                hi[k] = hi[k].max(data[(i, k)]);
            }
        }
        let mut rows: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..d).map(|k| data[(i, k)]).collect())
            .collect();
        for _ in 0..n_outliers {
            let mut p = Vec::with_capacity(d);
            for k in 0..d {
                let pad = 0.2 * (hi[k] - lo[k]).max(f64::MIN_POSITIVE);
                p.push(rng.gen_range((lo[k] - pad)..(hi[k] + pad)));
            }
            rows.push(p);
            data_labels.push(UNCLUSTERED);
        }
        data = PointSet::from_rows(&rows)?.matrix().clone();
    }
    let data = PointSet::new(data)?;
    let data_labels = ClusterAssignment::new(data_labels, spec.n_clusters)?;

    Ok(Scene {
        template,
        template_labels,
        data,
        data_labels,
        ground_truth,
    })
}

/// Registration algorithms the benchmark can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Cpd,
    Ecpd,
    Ccpd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cpd => "cpd",
            Method::Ecpd => "ecpd",
            Method::Ccpd => "ccpd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpd" => Ok(Method::Cpd),
            "ecpd" => Ok(Method::Ecpd),
            "ccpd" => Ok(Method::Ccpd),
            other => Err(Error::Input(format!("unknown method `{other}`"))),
        }
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub scene_id: usize,
    pub method: Method,
    pub alpha: f64,
    pub hausdorff: f64,
    pub cluster_hausdorff: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub status: String,
}

impl BenchmarkRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Subset of `points` carrying a declared (non-sentinel) label, with the
/// labels re-packed over the subset.
fn labeled_subset(points: &PointSet, labels: &ClusterAssignment) -> (PointSet, ClusterAssignment) {
    let keep: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l != UNCLUSTERED).then_some(i))
        .collect();
    if keep.len() == labels.len() {
        return (points.clone(), labels.clone());
    }
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| points.point(i)).collect();
    let sub_labels: Vec<usize> = keep.iter().map(|&i| labels.label(i)).collect();
    (
        PointSet::from_rows(&rows).expect("labeled subset is non-empty"),
        ClusterAssignment::new(sub_labels, labels.n_clusters()).expect("labels stay valid"),
    )
}

/// Run every (scene, method, alpha) combination and collect metric rows in
/// that order. Solvers receive the full data set (outliers included). The
/// plain Hausdorff column is measured against that full data set — without
/// labels there is no way to exclude outliers — while the cluster metric
/// compares labeled points only. Solver failures mark their row's status and
/// do not stop the sweep.
pub fn run_benchmark(
    scenes: &[SceneSpec],
    methods: &[Method],
    config: &RegistrationConfig,
    alpha_grid: &[f64],
) -> Result<Vec<BenchmarkRow>> {
    if scenes.is_empty() || methods.is_empty() || alpha_grid.is_empty() {
        return Err(Error::Input(
            "benchmark needs at least one scene, one method, and one alpha".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(scenes.len() * methods.len() * alpha_grid.len());
    for (scene_id, spec) in scenes.iter().enumerate() {
        let scene = generate_scene(spec)?;
        let (eval_data, eval_labels) = labeled_subset(&scene.data, &scene.data_labels);
        for &method in methods {
            for &alpha in alpha_grid {
                let started = Instant::now();
                let outcome = run_one(&scene, method, alpha, config);
                let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                let row = match outcome {
                    Ok((transformed, iterations)) => {
                        let h = hausdorff(&transformed, &scene.data)?;
                        let report = cluster_hausdorff(
                            &transformed,
                            &scene.template_labels,
                            &eval_data,
                            &eval_labels,
                        )?;
                        BenchmarkRow {
                            scene_id,
                            method,
                            alpha,
                            hausdorff: h,
                            cluster_hausdorff: report.cluster_hausdorff,
                            iterations,
                            wall_ms,
                            status: "ok".to_string(),
                        }
                    }
                    Err(e) => BenchmarkRow {
                        scene_id,
                        method,
                        alpha,
                        hausdorff: f64::NAN,
                        cluster_hausdorff: f64::NAN,
                        iterations: 0,
                        wall_ms,
                        status: format!("error: {e}").replace(['\n', ','], ";"),
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn run_one(
    scene: &Scene,
    method: Method,
    alpha: f64,
    config: &RegistrationConfig,
) -> Result<(PointSet, usize)> {
    let result = match method {
        Method::Cpd => register_cpd(&scene.data, &scene.template, config)?,
        Method::Ecpd => {
            let priors = priors_from_clusters(
                &scene.data_labels,
                &scene.template_labels,
                alpha * alpha,
            )?;
            register_ecpd(&scene.data, &scene.template, &priors, config)?
        }
        Method::Ccpd => {
            let model = ClusterPriorModel::from_labels(
                scene.data_labels.clone(),
                scene.template_labels.clone(),
            )?;
            register_ccpd(&scene.data, &scene.template, &model, config)?
        }
    };
    Ok((result.transformed, result.iterations))
}

/// Serialize benchmark rows as CSV with the column set
/// `scene_id,method,alpha,hausdorff,cluster_hausdorff,iterations,wall_ms,status`.
pub fn write_benchmark_csv(rows: &[BenchmarkRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("scene_id,method,alpha,hausdorff,cluster_hausdorff,iterations,wall_ms,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scene_id,
            r.method,
            fmt_f64(r.alpha),
            fmt_f64(r.hausdorff),
            fmt_f64(r.cluster_hausdorff),
            r.iterations,
            fmt_f64(r.wall_ms),
            r.status
        ));
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
