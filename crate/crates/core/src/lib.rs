//! Short-text clustering through iterative representation refinement:
//! a prompt-based encoder is alternately fit with a contrastive-clustering
//! objective and a keyword-supervised classification objective, with a
//! graph filter and a merge pass cleaning up cluster structure in between.

pub mod clustering;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod objective;
pub mod pipeline;
pub mod refine;
pub mod supervise;

pub use clustering::{cdcc_train, gmm_fit, kmeans, ClusterResult, TrainConfig};
pub use corpus::{load_jsonl, synth_corpus, tokenize, Corpus, Vocabulary};
pub use encoder::{encode, encode_batch, init_params, EncoderMode, EncoderParams, PromptTemplate};
pub use error::{CeilError, Result};
pub use eval::{accuracy, metrics_report, nmi, MetricsReport};
pub use objective::{total_loss, LossBreakdown, LossWeights};
pub use pipeline::{
    load_checkpoint, run_ceil, run_ceil_from, save_checkpoint, write_artifacts, Backend,
    CeilConfig, CeilState, IterationRecord,
};
pub use refine::{aggregate, filter_all, filter_cluster, ClusterSet};
pub use supervise::{train_classifier, verbalize, ClassifierConfig, VerbalizerMap};
