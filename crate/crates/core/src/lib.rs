//! Probing toolkit for multimodal masked language models: guided masking
//! with lemmatized top-k scoring, vision ablation, image-text matching
//! evaluation and attention relevancy maps, plus a small trainable
//! single-stream transformer and a synthetic grounded corpus to run them on.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod explain;
pub mod lexicon;
pub mod model;
pub mod probing;
pub mod synthetic;
pub mod text;
pub mod visual;

pub use error::{Error, ErrorKind, Result};
