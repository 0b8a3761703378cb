//! Semi-supervised image classification with consistency training.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod train;
