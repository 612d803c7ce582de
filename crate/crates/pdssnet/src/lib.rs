//! Library for progressive dual-path selective-scan segmentation networks:
//! selective state-space scan kernels (sequential and chunked), similarity-
//! modulated step sizes, direction serialization for 2-D feature maps,
//! class-prototype memory, hierarchical semantic/structural scanning,
//! channel scanning, a small reverse-mode tape, and the training/eval
//! harness tying them together.

pub mod apem;
pub mod autodiff;
pub mod cli;
pub mod csam;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod network;
pub mod scan2d;
pub mod scanblock;
pub mod sscm;
pub mod ssm;

pub use error::{PdssError, Result};
