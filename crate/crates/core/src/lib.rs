//! dvne-core: a desk-scale differentiable engine for editing human-centric
//! videos through a dynamic neural radiance field.
//!
//! The scene is split into a canonical human field reached through a
//! pose-guided deformation, and an unbounded background field queried with
//! contracted frustum Gaussians. Optimization runs through a tape-based
//! reverse-mode differentiator; editing combines reference-image
//! reconstruction, score distillation against pluggable noise-prediction
//! priors, local-parts zoom cameras, and nearest-neighbor feature-matching
//! style transfer. All math is generic over the scalar type; the type
//! aliases below pin the default f64 training precision.

pub mod autodiff;
pub mod deformation;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod num;

pub use autodiff::{ParamRange, ParameterStore};
pub use linalg::{Aabb, Mat3, Vec3};
pub use num::{Real, Scalar};

/// Default training float: 64-bit end to end, per the gradient-check
/// tolerances; 32-bit instantiations remain available for render-only use.
pub type F = f64;

pub type Vec3d = Vec3<f64>;
pub type Mat3d = Mat3<f64>;
pub type Aabbd = Aabb<f64>;
pub type Vec3f = Vec3<f32>;
pub type Mat3f = Mat3<f32>;
pub type Tape = autodiff::Tape<f64>;
pub type Store = ParameterStore<f64>;
