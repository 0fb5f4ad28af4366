//! Retrieval-augmented image captioning at desk scale.
//!
//! An image, given as a set of region feature vectors, is captioned by
//! first retrieving the `k` nearest captions from an exact vector datastore,
//! jointly encoding regions and retrieved text with a small cross-modal
//! transformer, and then decoding autoregressively with a decoder that
//! cross-attends over both encoder output blocks.

pub mod error;
pub mod tensor;
pub mod text;
pub mod datastore;
pub mod retrieval;
pub mod encoder;
pub mod decoder;
pub mod model;
pub mod metrics;
pub mod training;
pub mod analysis;
pub mod experiments;
mod layers;

pub use error::{Error, Result};
