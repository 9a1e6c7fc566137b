//! Toy-scale unified driving world model.
//!
//! The crate couples a procedural synthetic driving-scene generator with a
//! latent world model: a causal spatiotemporal encoder, decoupled decoders for
//! geometry / appearance / ego motion, a sketched-Gaussian prior regularizer,
//! and conditional flow-matching generation of future latents and
//! trajectories. Evaluation covers Chamfer reconstruction metrics, latent
//! smoothness statistics, and a simplified closed-loop planning score.
//!
//! Everything runs in `f64` on CPU through a small reverse-mode tape
//! ([`tape`]), which keeps training deterministic and lets analytic gradients
//! be checked against central finite differences.

pub mod decoders;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod scenario;
pub mod tape;

pub use error::{Error, Result};
