//! Product-quantized contrastive representation learning for unsupervised
//! continual learning, at desk scale.
//!
//! The crate trains a small feedforward encoder over a sequence of synthetic
//! tasks with an unsupervised Siamese objective plus a cross-quantized
//! contrastive term, keeps a per-task rehearsal buffer chosen by codeword
//! distance, and scores each run with ACC, BWT and MAA.

pub mod checkpoint;
pub mod datastream;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod losses;
pub mod quantizer;
pub mod rehearsal;

pub use error::{Error, Result};
