//! Class taxonomy, dataset manifests, preprocessing and the synthetic
//! dataset generator.

pub mod manifest;
pub mod preprocess;
pub mod synth;
pub mod table;
pub mod taxonomy;

pub use manifest::{apportion, scan_dataset, split_manifest, DatasetManifest, Record, Source, Split};
pub use preprocess::{compute_norm_stats, load_split, Augment, LoadedSplit, NormStats};
pub use synth::{synth_generate, SynthSpec};
pub use table::SplitTable;
