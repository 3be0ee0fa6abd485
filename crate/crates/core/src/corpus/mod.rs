//! Synthetic instructional corpus: task grammars, videos with latent states
//! and 3-frame observations, sliding-window plan instances, splits and files.

mod dataset;
pub mod grammar;
pub mod io;
mod video;

pub use dataset::{split_dataset, window_instances, Corpus, CorpusConfig, DatasetSplit, PlanInstance};
pub use grammar::{generate_grammar, GrammarConfig, TaskGrammar};
pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use video::{sample_video, synthesize_observations, Embeddings, ObservationConfig, PlanVideo, FRAMES};
