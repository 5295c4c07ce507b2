//! Spiking diffusion transformer.
//!
//! A small reverse-mode autodiff core ([`tensor`]), leaky integrate-and-fire
//! neurons trained through a surrogate gradient ([`spiking`]), RWKV token
//! mixing ([`rwkv`]), the spiking transformer backbone with reconstruction
//! tokens ([`model`]), and a DDPM trainer and sampler ([`diffusion`]).

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod params;
pub mod real;
pub mod rwkv;
pub mod spiking;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
