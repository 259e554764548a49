//! Differentiable co-design of tablet shape and excipient layout for a
//! prescribed dissolution release profile.

pub mod autodiff;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod materials;
pub mod matfield;
pub mod optimize;

pub use error::{Error, Result};
