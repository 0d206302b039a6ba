//! On-disk representation of benchmark runs: manifests, split assignments
//! and per-checkpoint tensor files.

mod bbox;
mod bundle;
mod manifest;
mod pack;
mod splits;
mod tensor;

pub use bbox::{discretize_bbox, discretize_boxes, one_hot_predictions, NUM_BOX_CLASSES};
pub use bundle::{argmax, BundleId, CheckpointKey, Domain, Layer, OutputsBundle, SplitTag, ROW_SUM_TOL};
pub use manifest::{
    BundleEntry, CheckpointRecord, DomainNames, OracleMetric, OracleRef, PackManifest, Setting, FORMAT_VERSION,
};
pub use pack::{read_labels_csv, read_pack, write_pack, BundleSource, MemoryPack, Pack, MANIFEST_FILE, TENSOR_DIR};
pub use splits::{assign_splits, SplitAssignment, SplitFractions};
pub use tensor::{DType, TensorData, TensorFile};
