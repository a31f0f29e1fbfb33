//! Parser-free virtual try-on at desk scale: appearance-flow cloth warping
//! with a posture-awareness loss, a regional-mask guided generator, and
//! cyclic fake-triplet training on procedurally generated persons and
//! clothes.

pub mod atelier;
pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod objectives;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod train;
pub mod warp;

pub use error::{Result, RmgnError};
pub use scalar::Scalar;

/// Training default scalar type.
pub type Real = f32;
/// Scalar type used by gradient checks and the Fréchet metric.
pub type Precise = f64;

pub type Image = domain::ImageTensor<Real>;
pub type Flow = domain::FlowField<Real>;
pub type Mask = domain::RegionalMask<Real>;
