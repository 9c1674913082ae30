//! Euler-angle regression with latent embedding clustering.
//!
//! A small MLP encoder maps feature vectors to a latent space; three bin
//! classification heads decode yaw, pitch and roll. Training runs in two
//! stages: the angle losses alone on clean samples, then the angle losses
//! plus a KL self-training clustering term on occluded samples, with cluster
//! centers initialized by k-means on the Stage-1 latent space.
//!
//! Everything differentiable runs on the reverse-mode tape in [`diff`].

// `!(x > 0.0)` is used deliberately so NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
