//! Training-free diffusion style transfer.
//!
//! A content image and a style image are DDIM-inverted under the null text.
//! The target branch starts from the inverted content latent and denoises
//! under a text condition that concatenates the content prompt embedding with
//! a text-aligned embedding of the style image. Early steps replace residual
//! features and self-attention query/key with the content branch's; late
//! steps replace self-attention key/value with the style branch's.

pub mod codec;
pub mod conditioning;
pub mod ddim;
pub mod denoiser;
pub mod error;
pub mod injection;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod tensor_io;

pub use error::{Error, Result};
