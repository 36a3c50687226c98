//! Graph-constrained translation of text into component sequences.
//!
//! The space of valid outputs is compiled into a minimal acyclic automaton
//! ([`automaton::ComponentGraph`]). Inputs are decoded by a shortest-path
//! search over that automaton, scored either by a lexical translation model
//! ([`model1`], [`lexical_decoder`]) or by an attention encoder-decoder
//! ([`neural`], [`neural_decoder`]). [`kbest`] extends either search to ranked
//! lists and [`eval`] scores the lists against gold sequences.

pub mod automaton;
pub mod bpe;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kbest;
pub mod lexical_decoder;
pub mod model1;
pub mod neural;
pub mod neural_decoder;
pub mod par;
pub mod search;

pub use error::{Error, Result};
pub use par::Execution;
