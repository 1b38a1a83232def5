//! histoloop-core: cluster-level annotation of whole-slide images, a
//! six-class patch classifier trained in human-guided rounds, and the
//! quality-control outputs built on its predictions.
//!
//! Data flows through the modules in this order:
//!
//! ```text
//! tiler -> embedder -> cluster (session) -> labels -> classifier
//!                                                      |
//!                         active (rounds) <------------+
//!                         qc / viz  <- prediction maps
//! ```
//!
//! Everything here is synchronous and file-system based; the HTTP surface
//! lives in `histoloop-service`.

pub mod active;
pub mod class;
pub mod classifier;
pub mod cluster;
pub mod embedder;
pub mod event;
pub mod journal;
pub mod labels;
pub mod qc;
pub mod synthetic;
pub mod tiler;
pub mod viz;

pub use class::{ClassCounts, TissueClass, CLASS_COUNT};
pub use event::{EventMeta, Timestamp};
pub use tiler::{Patch, SlideRef, TileAddress, TileGrid};
