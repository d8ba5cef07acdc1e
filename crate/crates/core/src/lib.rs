//! Keyword speech translation without transcripts: unsupervised term
//! discovery turns speech into pseudotext, and IBM Model 1 maps the
//! pseudoterms to target-language keywords.

pub mod cluster;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod model1;
pub mod pipeline;
pub mod pseudotext;
pub mod synth;
pub mod translate;
pub mod utd;

pub use error::{Error, Result};
