//! Frame-masked video autoencoding and key-frame compression.
//!
//! The pipeline: [`clipio`] produces normalized clips, [`patchcube`] cuts
//! them into space-time cubes, [`framemae`] learns to reconstruct whole
//! masked temporal slots, [`labelgen`] scores every keep-`k` slot
//! combination through that model to label each clip with its best
//! combination, [`selector`] learns to predict the label from encoder
//! features, and [`codec`] stores only the chosen slots and rebuilds the
//! rest.

pub mod checkpoint;
pub mod clipio;
pub mod codec;
pub mod error;
pub mod framemae;
pub mod framemask;
pub mod labelgen;
pub mod nn;
pub mod patchcube;
pub mod selector;

pub use error::{Error, Result};
