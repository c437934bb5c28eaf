//! Simulates a small street scene and writes the frame bundle.
//!
//! cargo run --example simulate_frame -- [OUT_DIR]

use mvp_core::geometry::RigidTransform;
use mvp_core::simulator::{forward_camera_pose, simulate, write_frame, SceneObject, SceneSpec};
use nalgebra::{Point3, Vector3};

fn main() -> mvp_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "frame".into());
    let car = RigidTransform::from_axis_angle(Vector3::z(), 0.3, Vector3::new(14.0, 3.0, 0.8));
    let mut spec = SceneSpec::with_default_rig(vec![
        SceneObject::cuboid(car, [4.5, 1.9, 1.6], 0, 0.92),
        SceneObject::sphere(Point3::new(22.0, -4.0, 1.0), 0.8, 8, 0.61),
        SceneObject::plane(forward_camera_pose(40.0, 0.0, 3.0), 30.0, 12.0, 9, 0.4),
    ]);
    spec.ego_velocity = [8.0, 0.0, 0.0, 0.05];
    spec.t_lidar = 1_533_151_603.547;
    spec.t_camera = spec.t_lidar + 0.024;

    let frame = simulate(&spec)?;
    let files = write_frame(&frame, &out)?;
    println!("{} Lidar returns", frame.cloud.len());
    for m in frame.masks.instances() {
        let hits = frame
            .ground_truth
            .point_object_ids
            .iter()
            .filter(|&&id| id == m.instance_id)
            .count();
        println!(
            "instance {}: class {} score {:.2}, {} px, {} returns",
            m.instance_id, m.class_id, m.score, m.pixel_count, hits
        );
    }
    std::fs::write(
        std::path::Path::new(&out).join("scene.json"),
        serde_json::to_string_pretty(&spec).expect("scene serializes"),
    )
    .expect("write scene.json");
    println!("wrote {} and scene.json to {out}", files.join(", "));
    Ok(())
}
