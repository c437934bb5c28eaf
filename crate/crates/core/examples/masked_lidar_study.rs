//! Hides part of each object's Lidar returns, regenerates them from the
//! masks, and reports the Chamfer distance to the hidden returns.
//!
//! cargo run --example masked_lidar_study -- [MASK_FRACTION]

use mvp_core::eval::{masked_experiment, MaskedExperimentConfig};
use mvp_core::geometry::RigidTransform;
use mvp_core::simulator::{forward_camera_pose, simulate, SceneObject, SceneSpec};
use mvp_core::virtual_points::GenerationConfig;
use nalgebra::{Point3, Vector3};

fn main() -> mvp_core::Result<()> {
    let fraction = std::env::args().nth(1).map_or(0.8, |s| s.parse().expect("fraction must be a number"));
    let car = RigidTransform::from_axis_angle(Vector3::z(), 1.2, Vector3::new(15.0, 3.0, 0.8));
    let mut spec = SceneSpec::with_default_rig(vec![
        SceneObject::cuboid(car, [4.0, 1.8, 1.6], 0, 0.9),
        SceneObject::sphere(Point3::new(20.0, -3.0, 1.0), 1.1, 8, 0.7),
        SceneObject::plane(forward_camera_pose(26.0, 0.0, 1.6), 3.0, 2.5, 9, 0.6),
    ]);
    spec.ego_velocity = [6.0, 0.0, 0.0, 0.0];
    spec.t_camera = 0.03;
    let frame = simulate(&spec)?;
    let config = MaskedExperimentConfig { mask_fraction: fraction, ..MaskedExperimentConfig::default() };
    let report = masked_experiment(
        &frame.cloud,
        &frame.ground_truth.point_object_ids,
        &frame.masks,
        &frame.calibration,
        &GenerationConfig::default(),
        &config,
    )?;
    for row in &report.objects {
        let cd = row.chamfer.as_ref().map_or("-".to_string(), |c| format!("{:.4} m", c.bidirectional));
        println!(
            "instance {}: {} eligible, {} removed, {} kept, {:?}, chamfer {cd}",
            row.instance_id, row.eligible_points, row.removed, row.kept, row.status
        );
    }
    match &report.aggregate {
        Some(a) => println!("mean over {} objects: {:.4} m", a.objects, a.bidirectional),
        None => println!("no object had enough points"),
    }
    Ok(())
}
