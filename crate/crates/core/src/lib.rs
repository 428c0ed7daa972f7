pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dit;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grid;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod semantics;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
