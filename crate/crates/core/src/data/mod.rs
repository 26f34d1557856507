//! Dataset ingestion: feature files, manifests, vocabulary, per-recording
//! normalization, batching, and a synthetic toy corpus.

mod batch;
mod features;
mod manifest;
mod normalize;
mod synthetic;
mod vocab;

pub use batch::{make_batches, plan_batches, Batch};
pub use features::{read_features, write_features, FBANK_MAGIC};
pub use manifest::{load_manifest, read_manifest_entries, read_transcripts, write_manifest, ManifestEntry, Utterance};
pub use normalize::{normalize_per_recording, STD_FLOOR};
pub use synthetic::{make_synthetic, SyntheticSpec};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};
