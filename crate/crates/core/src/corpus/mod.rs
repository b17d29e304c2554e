//! Text pipeline: normalisation, BPE, vocabularies and datasets.

mod bpe;
mod dataset;
pub mod io;
mod normalize;
mod synth;
mod vocab;

pub use bpe::{strip_bpe, BpeCodes, CONTINUATION, END_OF_WORD};
pub use dataset::{
    copy_target_pairs, mix_backtranslation, MixOptions, ParallelDataset, Provenance, SentencePair,
};
pub use normalize::{normalize, normalize_bytes, tokenize, FoldMap, NormalizeConfig};
pub use synth::{synth_task_generate, Grammar, GrammarConfig, SynthTask};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
