//! Balanced metrics on symmetric powers of vector bundles over model curves,
//! their projectivizations, and the numerical checks that go with them.

pub mod balance;
pub mod cli;
pub mod error;
pub mod fiber;
pub mod gauss;
pub mod herm;
pub mod io;
pub mod linalg;
pub mod model;
pub mod probe;
pub mod ruled;

pub use error::{Error, Result};
