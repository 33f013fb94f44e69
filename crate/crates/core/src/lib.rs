//! Task-oriented orthogonalised information bottleneck (TOIB) for multi-user
//! semantic broadcast.
//!
//! Each user has a Gaussian semantic encoder and a classifier decoder. The
//! base station superposes the users' power-normalised latents, the channel
//! adds noise (optionally with Rayleigh fading), and every user decodes its
//! own task label. Training minimises per-user cross-entropy, a KL
//! compression term, and a pairwise conditional mutual-information penalty
//! estimated with variational CLUB networks that are refreshed in a separate
//! phase before every main update.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod club;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
