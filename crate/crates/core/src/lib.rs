//! Non-rigid point-set registration by coherent point drift.
//!
//! Three expectation-maximization solvers over a Gaussian-mixture model of
//! the moving template: plain CPD, ECPD with sparse correspondence priors,
//! and a clustered variant (CCPD) that restricts responsibilities to points
//! sharing a cluster label. Hausdorff-based quality metrics, CSV/PLY point
//! cloud I/O, and a synthetic benchmark harness round out the toolkit.

pub mod ccpd;
pub mod cpd;
pub mod ecpd;
pub mod error;
pub mod io;
pub mod kernel;
pub mod likelihood;
pub mod metrics;
pub mod synth;
pub mod types;

mod solve;
#[cfg(test)]
mod test_util;

pub use ccpd::{
    ccpd_negative_log_likelihood, estep_ccpd, mstep_objective_ccpd, mstep_solve_ccpd,
    register_ccpd, update_sigma2_ccpd, ClusterPosteriors, ClusterPriorModel, PosteriorBlock,
};
pub use cpd::{
    estep, mstep_objective, mstep_solve, register_cpd, update_sigma2_cpd, PosteriorMatrix,
};
pub use ecpd::{
    mstep_objective_ecpd, mstep_solve_ecpd, priors_from_clusters, register_ecpd,
    CorrespondencePriors,
};
pub use error::{Error, Result};
pub use kernel::{gaussian_kernel, DisplacementField, KernelMatrix};
pub use likelihood::{init_sigma2, negative_log_likelihood};
pub use metrics::{cluster_hausdorff, hausdorff, MetricReport};
pub use types::{
    ClusterAssignment, IterationRecord, PointSet, RegistrationConfig, RegistrationResult,
    TerminationReason, UNCLUSTERED,
};
