//! Multi-objective controllable decision transformer for sequential
//! recommendation.

pub mod augment;
pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
