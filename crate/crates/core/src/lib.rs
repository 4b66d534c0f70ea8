//! Acoustic scene classification toolkit.

pub mod audio;
pub(crate) mod binio;
pub mod diagnostics;
pub mod dsp;
pub mod eval;
pub mod fusion;
pub mod gmm;
pub mod ivector;
pub mod matrix;
pub mod neural;
pub mod pipeline;
