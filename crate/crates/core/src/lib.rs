//! Storage codec for condensed image datasets.
//!
//! Images are cut into patches, patches are clustered by their quantization
//! parameters, each cluster is quantized to a few bits with shared
//! parameters, and the symbols are entropy coded into a single archive sized
//! against a full-precision storage budget.

mod bits;
pub mod container;
pub mod corpus;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod quantizer;
pub mod refine;
pub mod tensor;

pub use error::{Error, Result};
