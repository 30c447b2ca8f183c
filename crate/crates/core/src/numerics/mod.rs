//! Deterministic numeric substrate: tensors, keyed RNG streams, the two
//! classifier models, and datasets.

mod data;
mod idx;
mod model;
mod rng;
mod tensor;

pub use data::{make_synthetic, Batch, Dataset, SyntheticTask};
pub use idx::{load_idx_dataset, parse_idx, read_idx, IdxArray};
pub use model::{layout, random_batch, Architecture, Model};
pub use rng::{ElementRng, Purpose, RngStream, StreamKey};
pub use tensor::{GradTensor, TensorSpec};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{name}: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("IDX format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
