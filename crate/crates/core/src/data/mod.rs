//! Vocabulary, synthetic corpus and batching.

pub mod batch;
pub mod corpus;
pub mod records;
pub mod vocab;

pub use batch::{batchify, make_batch, Batch};
pub use corpus::{generate_corpus, render_report, split_corpus, GridSpec, Region, Sample};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};
