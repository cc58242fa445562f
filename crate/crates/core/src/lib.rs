//! One-shot skeleton action recognition with signal-level images,
//! cross-attention and dynamic time warping.
//!
//! The pipeline: [`skeleton`] sequences are rendered to position and
//! orientation images ([`sig`]), encoded column by column ([`encoder`]),
//! cross-attended pairwise ([`attention`]), aligned with [`dtw`], and
//! trained episodically ([`episode`], [`model`], [`train`]) on top of a
//! small reverse-mode [`autodiff`] tape.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod dtw;
pub mod encoder;
pub mod episode;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sig;
pub mod skeleton;
pub mod train;

pub use linalg::Mat;
