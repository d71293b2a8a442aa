//! Dataset schema, the `NENC` container, fold assignment and loading.

mod dataset;
mod folds;
pub mod nenc;

pub(crate) use dataset::{create_dir, read_json, write_json};
pub use dataset::{
    default_fold_seed, load_dataset, ChannelStats, Dataset, DatasetManifest, Hemisphere, ImageDims,
    Roi, Split, SplitData, SubjectData, SubjectEntry, SubjectSpec, TestArrays, MANIFEST_FILE,
    MANIFEST_VERSION,
};
pub use folds::{make_folds, FoldAssignment, DEFAULT_FOLDS};
pub use nenc::{read_array, write_array};
