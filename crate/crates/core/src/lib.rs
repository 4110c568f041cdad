//! Registration of above-canopy and below-canopy forest point clouds.
//!
//! Both clouds are ground-filtered, leveled, and projected to binary canopy
//! images. The images are matched in 2D, and the result is lifted back to a
//! 3D rigid transform that can be refined with ICP.

pub mod config;
pub mod csf;
pub mod error;
pub mod geometry;
pub mod icp;
pub mod ground;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod raster;
pub mod synthetic;

pub use config::{CanopyHeightMode, PlotConfig};
pub use error::{Error, Result};
pub use geometry::{Label, Plane, Point3, PointCloud, RigidTransform, RotationMatrix3, Vec3};
