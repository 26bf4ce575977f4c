//! Text-dependent speaker verification: feature extraction, text and
//! speaker embedding branches, pooling, fusion, scoring and a synthetic
//! digit-string corpus.

pub mod audio;
pub mod data;
pub mod error;
pub mod pooling;
pub mod scoring;
pub mod speaker;
pub mod text;

pub use error::{Error, Result};
