//! Unsupervised 3D point-cloud representation learning.
//!
//! A hierarchical point-set encoder is trained without labels by three
//! cooperating objectives: a local-to-global metric loss that pulls each
//! local embedding toward its own object's global embedding against in-batch
//! negatives, a self-reconstruction loss through a folding decoder measured
//! by Chamfer distance, and a normal-estimation loss. Representation quality
//! is measured by a linear probe plus robustness and label-fraction sweeps.
//!
//! Layering: [`tensor`] and [`autodiff`] provide the differentiable core;
//! [`geometry`] the non-learned kernels; [`data`] datasets and ingestion;
//! [`model`] the networks and checkpoints; [`objectives`] the losses;
//! [`pipeline`] the training loop; [`evaluation`] the measurement protocol.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
