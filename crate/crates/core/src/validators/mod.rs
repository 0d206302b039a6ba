//! The validation criteria, their specs, and per-checkpoint evaluation.

mod clustering;
mod evaluate;
mod scores;
mod spec;

pub use clustering::{
    adjusted_mutual_info, adjusted_rand_index, calinski_harabasz, davies_bouldin, fowlkes_mallows, silhouette,
    v_measure,
};
pub use evaluate::{evaluate, parse_score_key, score_key, CheckpointScorer, ValidatorScore};
pub use scores::{accuracy, bnm, coral, infomax, mean_entropy, mmd, mmd_bandwidth, mse, rankme, snd};
pub use spec::{
    default_specs, parse_specs, Bandwidth, ClusterParams, DefaultProfile, Orientation, SplitRef, SplitSet,
    ValidatorKind, ValidatorParams, ValidatorSpec,
};
