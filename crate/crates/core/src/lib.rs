//! Desk-scale laboratory for prompt-complexity generalization in
//! conditional diffusion models.
//!
//! The ground truth is a 2D Gaussian mixture ([`world`]) whose components
//! carry colour/animal prompts. [`diffusion`] provides the DDPM schedule and
//! the exact score of the noised world, [`net`] a small trainable
//! noise-prediction network, [`guidance`] classifier-free guidance,
//! compositional OR/AND operators and the APG/CADS/interval variants, and
//! [`sampler`] the ancestral sampler that ties them together. [`metrics`]
//! scores generated sets, and [`pipeline`] builds paired prompt/image sets
//! across caption complexities. [`experiment`] orchestrates the
//! general-vs-fine-grained generalization study.

pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod sampler;
pub mod seeds;
pub mod world;

pub use error::{Error, ErrorClass, Result};
