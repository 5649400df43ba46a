//! Configuration, checkpoints, training, evaluation and diagnostics.

pub mod ablate;
pub mod census;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod train;

pub use ablate::{ablate, row_config, AblationRow, AblationTable, ROW_NAMES};
pub use census::{param_count, Census};
pub use checkpoint::{fnv1a, Checkpoint};
pub use config::{RunConfig, VoteIdf};
pub use evaluate::{check_vocab, evaluate, evaluate_params, score_texts, EvalReport, SampleRecord, Scores};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use train::{
    batch_gradients, mean_pairwise_cosine, prepare_data, template_vocab, train, train_from, Dataset, TrainOutcome,
};
