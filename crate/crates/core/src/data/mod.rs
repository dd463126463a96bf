//! MNIST ingestion and the checkpoint file format.

pub mod checkpoint;
pub mod idx;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, model_hash, save_checkpoint,
};
pub use idx::{load_mnist, mnist_paths, parse_idx_images, parse_idx_labels, Dataset, Split};
