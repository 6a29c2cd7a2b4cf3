pub mod diffcore;
pub mod error;
pub mod fixtures;
pub mod gnn2d;
pub mod gnn3d;
pub mod molgraph;
pub mod nn;
pub mod seed;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
