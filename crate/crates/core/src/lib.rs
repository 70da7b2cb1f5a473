//! Multiscale time averaging for conservative linear flows `i ċ = βA(t)c`.

pub mod averaging;
pub mod error;
pub mod experiments;
pub mod generators;
pub mod matcore;
pub mod normalform;
pub mod oracle;
pub mod quadrature;

pub use error::{Error, Result};
