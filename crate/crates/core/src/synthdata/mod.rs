//! Procedural talking-portrait datasets and the binary checkpoint format.

mod checkpoint;
mod dataset;
mod scene;

pub use checkpoint::*;
pub use dataset::*;
pub use scene::*;
