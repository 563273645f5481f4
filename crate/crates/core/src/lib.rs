//! Diffusion-augmented few-shot semantic segmentation toolkit.
//!
//! The pipeline runs in three stages. Control conditions (seg-map, soft edge
//! boundary, scribble) are derived from each support image and its mask
//! ([`condition_gen`]). A generator backend turns each condition plus a text
//! prompt into auxiliary images that share the support mask ([`generation`]).
//! Extended episodes are then segmented and scored ([`episodes`], [`refseg`],
//! [`metrics`]). Generation quality is audited separately ([`drift_audit`],
//! [`proto_analysis`]).
//!
//! Every backend that would normally require model weights has a
//! deterministic in-tree stand-in, so the whole pipeline runs offline.

pub mod condition_gen;
pub mod drift_audit;
pub mod episodes;
pub mod error;
pub mod generation;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod proto_analysis;
pub mod refseg;
pub mod remote;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, GrayImage, RgbImage};
