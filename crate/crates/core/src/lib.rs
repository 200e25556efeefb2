//! Talking-portrait radiance fields on a CPU.
//!
//! The crate contains a small reverse-mode autodiff engine and, built on it, a
//! multiresolution hash encoder, region-specific cascaded deformation fields
//! (a face field driven by audio-motion and eye signals, a torso field driven by
//! head pose and the face deformation), a canonical radiance field, volume
//! rendering, the training objectives, identity-aware knowledge transfer through
//! an identity encoder and a hypernetwork, a deterministic synthetic portrait
//! generator, and the training/evaluation harness.

pub mod autodiff;
pub mod deform;
pub mod error;
pub mod harness;
pub mod hashenc;
pub mod idtransfer;
pub mod image;
pub mod losses;
pub mod model;
pub mod radiance;
pub mod render;
pub mod synthdata;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
