//! Numerical kernels shared by the validators.

mod contingency;
mod kernel;
mod kmeans;
mod linalg;
mod stats;

pub use contingency::{contingency, ContingencyTable};
pub(crate) use kernel::rbf_from_sq_dist;
pub use kernel::rbf_kernel;
pub use kmeans::{kmeans, kmeans_traced, ClusterConfig, KMeansResult};
pub use linalg::{clamp_small_singular_values, covariance, singular_values, sq_dist, SV_RELATIVE_FLOOR};
pub use stats::{average_ranks, entropy, row_softmax, softmax_rows, PROB_SUM_TOL};
