//! Synthetic keyword corpus and the toy encoders trained on it.

mod corpus;
mod encoder;

pub use corpus::{generate_corpus, ClassInfo, Corpus, Split, SyntheticCorpusSpec, SyntheticUtterance};
pub use encoder::{AcousticForward, Dense, EncoderConfig, ToyAcousticEncoder, ToyTextEncoder};
