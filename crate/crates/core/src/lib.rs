pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
