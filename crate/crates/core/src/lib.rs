pub mod cli;
pub mod dynamics;
pub mod error;
pub mod gsbr;
pub mod io;
pub mod manifold;
pub mod stochastics;

pub use error::{Error, Result};
