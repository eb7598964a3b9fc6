pub mod config;
pub mod env;
pub mod equiv;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grid;
pub mod io;
pub mod model;
pub mod train;

pub use error::{Error, Result};
