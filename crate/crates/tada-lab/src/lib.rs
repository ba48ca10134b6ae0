//! Simulation laboratory for feature learning on planted two-patch data.
//!
//! The crate builds synthetic datasets in which every point carries one
//! planted feature patch (a fast-learnable direction `v_e` with strength
//! `beta_e`, present with probability `alpha`, or a slow-learnable direction
//! `v_d` with strength `beta_d`) plus an independent Gaussian noise patch.
//! A two-layer CNN with cubic activations is trained on those datasets with
//! GD, SAM, or mini-batch SGD, and the crate measures how much of each
//! filter ends up aligned with features versus noise.
//!
//! Two augmentation strategies are built in: upsampling (replicating
//! slow-feature points, noise included) and generation (fresh noise under
//! the same feature patch). The [`theoremcheck`] module turns the theory's
//! claims about these strategies into executable, seeded checks, and
//! [`harness`] wraps everything in a CLI with reproducible CSV/JSON/SVG
//! outputs.

pub mod analysis;
pub mod cnn;
mod fmt;
pub mod harness;
mod linalg;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod synthdata;
pub mod theoremcheck;

mod error;

pub use error::{Error, Result};
