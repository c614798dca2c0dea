//! Generalized hamming network: GHD algebra, autodiff tensors, GHN layers,
//! dataset ingestion, and the training harness.

pub mod data;
pub mod error;
pub mod ghd;
pub mod layers;
pub mod real;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{GhnError, Result};
pub use real::{lit, Dtype, Real};
