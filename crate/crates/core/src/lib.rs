pub mod cli;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod primitives;
pub mod render;
pub mod sampling;
pub mod service;
pub mod stroke_data;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
