//! Learnable spatial polar transformation, angle-specific gating and a
//! multistream network for contour-sketch person re-identification.

pub mod ase;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod network;
pub mod ops;
pub mod optim;
pub mod seed;
pub mod spt;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
