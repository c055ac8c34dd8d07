//! Object reconstruction from one or a few views.
//!
//! Training views of a class are linked into a directed network whose nodes
//! are feature grid points and whose edges join matched points of instances
//! seen from similar viewpoints. A test view is docked to a few of them and
//! geodesic distances on the network give its correspondence with every
//! training view. Those correspondences, together with interpolated keypoint
//! tracks, feed a rigid scaled orthographic factorization with missing data.
//!
//! The numerical kernels ([`geometry`], [`warp`], [`factorization`]) are
//! generic over [`Scalar`]; the crate root exposes `f64` and `f32` aliases.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod factorization;
pub mod geometry;
pub mod harness;
pub mod network;
pub mod recon;
pub mod scalar;
pub mod synth;
pub mod warp;

pub use camera::Camera;
pub use dataset::{
    load_collection, normalize_instance, save_collection, Collection, FeatureGrid, Keypoint, KeypointSet, Mask,
    ObjectInstance,
};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type of the dataset model, the network and the pipeline.
pub type Real = f64;

pub type Camera64 = camera::Camera<f64>;
pub type Camera32 = camera::Camera<f32>;
pub type ObservationMatrix64 = factorization::ObservationMatrix<f64>;
pub type ObservationMatrix32 = factorization::ObservationMatrix<f32>;
pub type FactorizationResult64 = factorization::FactorizationResult<f64>;
pub type FactorizationResult32 = factorization::FactorizationResult<f32>;
pub type Similarity64 = geometry::SimilarityTransform3D<f64>;
pub type Similarity32 = geometry::SimilarityTransform3D<f32>;
