//! Shared fixtures for the stage benchmarks: one deterministic scene and the
//! rasters derived from it, built once per bench run.

use mapfuse_core::harness::ego_frame_of;
use mapfuse_core::{generate_scene, observe, BevRaster, PipelineParams, Pose2, Scene, ScenarioConfig, VehicleId};

/// A benchmark scene small enough to prepare in milliseconds but with the
/// full default grid and element mix.
pub fn bench_scene() -> Scene {
    let mut cfg = ScenarioConfig::default();
    cfg.trajectories = 5;
    cfg.duration = 4.0;
    cfg.occluders_min = 2;
    cfg.occluders_max = 3;
    generate_scene(&cfg, 7).expect("bench scenario is valid")
}

/// Ego id, ego pose, and a helper pose from the bench scene.
pub fn bench_poses(scene: &Scene) -> (VehicleId, Pose2, Pose2) {
    let (ego_id, ego_frame) = ego_frame_of(scene);
    let ego_pose = scene.trajectory(ego_id).unwrap().frames[ego_frame];
    let helper = scene
        .trajectories
        .iter()
        .find(|t| t.vehicle_id != ego_id)
        .expect("bench scene has a helper");
    let helper_pose = helper.frames[helper.frames.len() / 2];
    (ego_id, ego_pose, helper_pose)
}

/// The ego's semantic observation raster for the bench scene.
pub fn bench_semantic(scene: &Scene) -> BevRaster {
    let params = PipelineParams::default();
    let (ego_id, ego_pose, _) = bench_poses(scene);
    observe(scene, ego_id, &ego_pose, &params.sensor, &params.spec)
        .expect("bench observation succeeds")
        .semantic
}
