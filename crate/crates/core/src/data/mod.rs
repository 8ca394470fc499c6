//! Interaction ingestion, preprocessing, splitting, the normalized bipartite
//! adjacency, and BPR triple sampling.

mod adjacency;
mod cache;
mod graph;
mod ingest;
mod prepare;
mod sampler;
mod split;

pub use adjacency::{build_adjacency, NormalizedAdjacency};
pub use cache::{read_cache, write_cache, Manifest, CACHE_FILE, MANIFEST_FILE};
pub use graph::{Interaction, InteractionGraph};
pub use ingest::{
    ingest_interactions, ingest_records, kcore_filter, read_records, sweep_rating_thresholds,
    IngestOptions, InputFormat, RawRecord, ML1M_RATING_THRESHOLD,
};
pub use prepare::{prepare_dataset, sha256_file, PrepareOutcome};
pub use sampler::{sample_triples, EpochSampler, TripleBatch, UserItemIndex};
pub use split::{build_split, split_sizes, DatasetSplit};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed { path: PathBuf, line: u64, reason: String },
    #[error("empty result after filtering")]
    EmptyAfterFiltering,
    #[error("index out of range: {kind} {index} >= {bound}")]
    IndexOutOfRange { kind: &'static str, index: usize, bound: usize },
    #[error("duplicate interaction (user {user}, item {item})")]
    DuplicateInteraction { user: usize, item: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("user {user} has interacted with every item; no negative can be sampled")]
    SaturatedUser { user: usize },
    #[error("corrupt dataset cache: {0}")]
    CorruptCache(String),
    #[error("{0}")]
    Inconsistent(String),
}
