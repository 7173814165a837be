//! Cross-architecture knowledge distillation: a ViT teacher distilled into a
//! small CNN student through attention (PCA) and group-wise linear (GL)
//! projectors, multi-view adversarial alignment, and I-JEPA pretraining of
//! the teacher, with an evaluation and int8 quantization harness.

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod ijepa;
pub mod model;
pub mod nn;
pub mod projectors;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
