//! Blockwise self-supervised training of a tubelet video ViT and
//! depth-resolved comparison of its representations.

pub mod autodiff;
mod binio;
pub mod data;
pub mod diagnostics;
pub mod embeddings;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
