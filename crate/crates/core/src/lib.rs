//! Self-supervised masked autoencoding for point clouds.
//!
//! The pipeline groups a cloud into overlapping patches, describes every
//! patch center with an angular histogram, fuses both into one token per
//! patch with saliency gating, encodes the visible tokens with an
//! external-attention transformer and reconstructs the masked patches.

pub mod attention;
pub mod config;
pub mod error;
pub mod gate;
pub mod geometry;
pub mod io;
pub mod mae;
pub mod nn;
pub mod oracle;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
