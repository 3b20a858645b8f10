//! Active and passive membership inference testing for convolutional image
//! classifiers.
//!
//! An *audited model* is a small convolutional classifier. A *MINT head*
//! reads two intermediate activation maps of that classifier and predicts
//! whether a sample was part of its training data. Active training fits
//! both jointly through a normalized multi-task loss; passive training fits
//! the head afterwards against a frozen classifier. Loss- and
//! confidence-threshold membership attacks are provided as baselines.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
