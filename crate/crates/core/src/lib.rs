//! Confidence-aware knowledge-graph recommendation with LLM-assisted graph
//! augmentation.

pub mod augment;
pub mod augmenter;
pub mod autograd;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
pub mod io;
pub mod kg;
pub mod params;
pub mod propagation;
pub mod synthetic;
pub mod train;
