//! Chinese word segmentation over heterogeneous graphs of characters, lexicon
//! words and n-grams, decoded with a linear-chain CRF.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hgnn;
pub mod model;
pub mod ngram;
pub mod parses;
pub mod trainer;

pub use error::{Error, Result};
