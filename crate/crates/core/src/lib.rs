//! Geodesic-aware distillation of per-vertex semantic features.
//!
//! Starting from precomputed per-vertex "base" features on a triangle mesh,
//! this crate learns a compact per-vertex embedding on the unit hypersphere
//! whose pairwise angles reproduce geodesic distances along the surface,
//! while a mirrored decoder keeps the embedding faithful to the base
//! features. The trained embeddings drive dense shape correspondence,
//! part segmentation, texture transfer, skinning-weight regression and
//! skeleton-based pose alignment.
//!
//! Modules:
//!
//! - [`mesh`]: triangle meshes, OBJ/PLY I/O, adjacency, farthest-point
//!   sampling.
//! - [`geodesics`]: heat-method geodesic fields (with a Dijkstra reference
//!   path) and distance rescaling.
//! - [`features`]: the SAF1 binary feature container, row normalization,
//!   image feature maps.
//! - [`net`]: a minimal reverse-mode tape, the encoder/decoder pair, AdamW
//!   and EMA tracking, checkpoints.
//! - [`losses`]: cosine-similarity losses (contrastive, reconstruction,
//!   combined) and the distance-fit / neighbor-spectrum ablation losses.
//! - [`train`]: the training loop (per-iteration anchor sampling, geodesic
//!   targets, validation snapshots) and embedding inference.
//! - [`matching`]: dense cosine matching, correspondence metrics, spherical
//!   k-means, PCA projection, texture transfer.
//! - [`pose`]: skeletons, linear blend skinning, two-phase pose alignment,
//!   sequence alignment, skinning-weight regression.
//! - [`synth`]: procedural test shapes (icospheres, bilaterally symmetric
//!   quadrupeds) with mirror maps, skeletons and feature recipes.
//! - [`gradcheck`]: finite-difference verification of every analytic
//!   gradient in the crate.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for the production
//! pipeline, `f64` for verification); the `*32`/`*64` aliases below pick the
//! concrete instantiations.

pub mod error;
pub mod features;
pub mod geodesics;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod matrix;
pub mod mesh;
pub mod net;
pub mod pose;
pub mod scalar;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod vec3;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Feature tables are plain dense matrices (one row per vertex or pixel).
pub type FeatureMatrix<T> = Matrix<T>;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type Mesh32 = mesh::Mesh<f32>;
pub type Mesh64 = mesh::Mesh<f64>;
pub type GeodesicField32 = geodesics::GeodesicField<f32>;
pub type GeodesicField64 = geodesics::GeodesicField<f64>;
pub type Autoencoder32 = net::Autoencoder<f32>;
pub type Autoencoder64 = net::Autoencoder<f64>;
pub type Skeleton32 = pose::Skeleton<f32>;
pub type Skeleton64 = pose::Skeleton<f64>;
