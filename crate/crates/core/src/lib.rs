pub mod aggregate;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gmrf;
pub mod hazard;
pub mod io;
pub mod model;
pub mod simulate;
pub mod survey;

pub use error::{Error, Result};
