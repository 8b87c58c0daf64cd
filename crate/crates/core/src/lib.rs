//! Pole landmark extraction from 3-D lidar, landmark mapping, and
//! particle-filter localization against pole maps.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which is what the file formats
//! and the command line use.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod kdtree;
pub mod localization;
pub mod mapping;
pub mod poles;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
pub use geometry::{Pose2D, StampedPose, Vec2, Vec3};
pub use grid::{CountGrid, GridGeometry, OccupancyField, Ray, ReflectionPrior};
pub use poles::{DetectorParams, PoleDetection, ScoreMap, ScoreVolume};
pub use scalar::Real;

pub type Vec2d = Vec2<f64>;
pub type Vec3d = Vec3<f64>;
pub type Pose2 = Pose2D<f64>;
pub type Pose2f = Pose2D<f32>;
pub type Ray64 = Ray<f64>;
pub type Ray32 = Ray<f32>;
pub type GridGeometry64 = GridGeometry<f64>;
pub type CountGrid64 = CountGrid<f64>;
pub type DetectorParams64 = DetectorParams<f64>;
pub type PoleDetection64 = PoleDetection<f64>;
