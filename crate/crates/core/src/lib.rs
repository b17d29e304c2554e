//! Neural machine translation trained jointly with a fixed language model.
//!
//! A translation model (TM) produces unnormalised scores over the target
//! vocabulary. Those scores are combined with the log-probabilities of a
//! pre-trained, frozen language model (LM) either before normalisation
//! (PreNorm) or after (PostNorm), or at decode time only (shallow fusion),
//! or through a learned gate (cold fusion). Everything needed to compare
//! these strategies end to end lives here: text preprocessing and BPE,
//! LM and TM training, beam search and ensembling, BLEU and entropy
//! analysis, and the experiment recipes that tie them together.

pub mod corpus;
pub mod decoding;
pub mod fusion;
pub mod lm;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod numerics;
pub mod par;
pub mod seq2seq;
pub mod training;

pub use error::{Error, Result};
