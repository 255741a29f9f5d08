//! Select-then-fuse multi-vehicle vectorized mapping, desk scale: synthetic
//! road scenes, per-vehicle sensing with distance and occlusion uncertainty,
//! helper selection under a budget, pose-tolerant raster fusion, polyline
//! decoding, and Chamfer-based average precision.
//!
//! The modules mirror the pipeline stages:
//! - [`geom`]: poses, map elements, the BEV grid, raster warping.
//! - [`layers`]: the small convolution/affine building blocks.
//! - [`scene`]: synthetic corridors, trajectory logs, sensing, association.
//! - [`uncertainty`]: uncertainty rasterization and candidate partitioning.
//! - [`ovs`]: selection policies, from random draw to exhaustive oracle.
//! - [`fusion`]: pooling, residual alignment, gated fusion, map decoding.
//! - [`metrics`]: Chamfer-distance average precision reports.
//! - [`harness`]: batched experiments, sweeps, and report emission.
//! - [`io`]: binary raster/parameter containers plus JSON/CSV helpers.

pub mod error;
pub mod fusion;
pub mod geom;
pub mod harness;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod ovs;
pub mod scene;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geom::{BevGridSpec, BevRaster, ElementClass, MapElement, Pose2, VehicleId};
pub use harness::{
    run_pipeline, ExperimentConfig, FuseMode, NoiseModel, PipelineParams, Policy, SelectionTrace,
};
pub use metrics::{evaluate, EvalReport};
pub use scene::{generate_scene, observe, Scene, ScenarioConfig, SensorModel};
