//! DFPF-Net: siamese pyramid-transformer change detection for bi-temporal
//! imagery, with progressive residual fusion (PEFM), a dynamic change-focus
//! block combining agent attention and Sobel edges (DCFM), and a cross-scale
//! decoder. Includes the full training, evaluation, data-preparation, and
//! ablation harness.

pub mod dcfm;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod pefm;
pub mod tensor;

pub use error::{DfpfError, Result};
