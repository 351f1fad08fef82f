//! Vulnerability classification, localization and root-cause attribution
//! for C/C++ functions using a graph-convolution model over token streams.

pub mod attribution;
pub mod corpus;
pub mod error;
mod kv;
pub mod lexer;
pub mod model;
pub mod objectives;
pub mod scanner;
pub mod svg;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
