//! Desk-scale laboratory for vector-quantized image modeling where the
//! codebooks are not learned from scratch but generated from word-embedding
//! priors: adjective and noun vectors are filtered out of a pretrained
//! embedding table, connected by an adjective-modifies-noun graph mined from
//! a corpus, and pushed through a small graph-convolution network whose
//! output is the pair of quantization codebooks. Because the codebooks are a
//! function of shared network weights, a gradient step moves every code, not
//! just the selected ones, which is the collapse-resistance property the
//! analysis tooling measures against a directly-learned baseline.

pub mod error;
pub mod analysis;
pub mod config;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod priors;
pub mod tensor;
pub mod vq;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{SparseMat, Tape, Tensor, Var};
