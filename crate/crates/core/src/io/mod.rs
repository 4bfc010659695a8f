//! Checkpoints, IDX datasets and run configuration files.

pub mod checkpoint;
pub mod config;
pub mod idx;

pub use checkpoint::{config_digest, Checkpoint, Dtype, StoredTensor};
pub use config::{DataSource, IdxSource, RunConfig};
pub use idx::{encode_idx, idx_dataset, load_idx, parse_idx_images, parse_idx_labels};
