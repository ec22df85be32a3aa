//! Datasets for the source and unseen domains, input preprocessing and
//! on-disk containers.

pub mod blobs;
pub mod checkpoint;
pub mod dataset;
pub mod digits;
pub(crate) mod io;
pub mod preprocess;

pub use blobs::{make_blob_domains, make_blob_domains_with, Arrangement, BlobLayout, BlobShift};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, Checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dataset::Dataset;
pub use digits::{generate_digit_corpus, import_idx, make_digit_domains, split_digit_domains};
pub use io::atomic_write;
pub use preprocess::{invert, preprocess, InputMeta};
