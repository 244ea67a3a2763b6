//! Video quality assessment driven by quality-language supervision.
//!
//! The pipeline samples and patchifies frames ([`frame_ingest`]), runs a frame
//! perception transformer that emits fusion tokens ([`fpt`]), aggregates
//! pseudo-MOS and fusion tokens into a video representation ([`sat`]), encodes
//! the five-grade quality scale as text ([`mos2language`]), fuses frame content
//! with that text ([`vat`]) and turns everything into a probability vector over
//! reference ratings ([`quality_head`]). [`harness`] holds data generation,
//! training and evaluation. Everything runs on the small reverse-mode tensor
//! engine in [`numerics`].

pub mod numerics;

pub mod config;
mod error;
pub mod fpt;
pub mod frame_ingest;
pub mod mos2language;
pub mod sat;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub mod quality_head;
pub mod vat;
pub mod model;
pub mod harness;
