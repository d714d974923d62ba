//! DiC: a diffusion denoiser built entirely from 3×3 convolutions.
//!
//! The crate carries its own small tensor engine with reverse-mode autograd
//! ([`tensor`], [`autograd`]), a Winograd F(2×2, 3×3) convolution path
//! ([`winograd`]), the hourglass denoiser and its ablation variants
//! ([`model`]), DDPM training and sampling with classifier-free guidance
//! ([`diffusion`]), a static parameter/FLOPs/receptive-field analyzer
//! ([`analyzer`]) and the training/evaluation harness ([`harness`]).

pub mod analyzer;
pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod winograd;

pub use autograd::{Activation, Gradients, Tape, Var};
pub use error::{DicError, Result};
pub use model::{build_model, DiCModel, ModelConfig};
pub use tensor::{Element, Tensor};
