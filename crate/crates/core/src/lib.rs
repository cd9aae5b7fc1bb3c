//! Feature-level attribute manipulation.
//!
//! Attribute-specific embedders with learnable class dictionaries, a
//! conditional generator that rewrites one attribute of a retrieval feature,
//! and the retrieval metrics used to judge both.

pub mod autodiff;
mod codec;
pub mod embedder;
pub mod error;
pub mod manipulator;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod synthdata;

pub use embedder::{Dictionary, Embedder, EmbedderConfig, EmbedderSet};
pub use error::{Error, Result};
pub use manipulator::{Generator, ManipConfig, Manipulator, VARIANTS};
pub use pipeline::{Manifest, RunConfig};
pub use retrieval::{EvalReport, RetrievalIndex};
pub use synthdata::{AttributeSchema, Dataset, GenConfig};
