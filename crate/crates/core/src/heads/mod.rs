//! Task heads: lemmatization edit scripts, tagging and parsing, dependency
//! tree decoding, CRF and nested NER labeling, sentiment fine-tuning.

mod biaffine;
mod crf;
mod edit_script;
mod nested;
mod sentiment;
mod tagger;
mod tree;

pub use biaffine::{biaffine_scores, init_biaffine, label_scores, BiaffineParams};
pub use crf::{crf_decode, crf_log_partition, crf_loss, crf_path_score, BioConstraints, CrfScores};
pub use edit_script::{
    apply_edit_script, build_lemma_inventory, derive_edit_script, Case, EditOp, EditScript, LemmaCategoryInventory,
};
pub use nested::{decode_nested, encode_nested, NestedLabelSequence, OUTSIDE};
pub use sentiment::{
    parse_sentiment_tsv, predict_polarity, run_sentiment_protocol, train_sentiment_fold, FoldOutcome, FoldTraining,
    Polarity, SentimentConfig, SentimentExample, SentimentReport,
};
pub use tagger::{ContextualEncoder, TaggedSentence, Tagger, TaggerConfig, TaggerTrainReport};
pub use tree::{decode_tree, DepArcScores, ParsedTree, RootConstraint};

use thiserror::Error;

use crate::neural::NeuralError;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("edit script does not fit form `{form}`")]
    ScriptApplication { form: String },
    #[error("spans cross or fall outside the sentence")]
    IllNestedSpans,
    #[error("invalid tag sequence: {0}")]
    InvalidTags(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty fold: {0}")]
    EmptyFold(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}
