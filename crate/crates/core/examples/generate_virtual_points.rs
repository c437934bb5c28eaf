//! Simulates a frame and turns its instance masks into virtual points.
//!
//! cargo run --example generate_virtual_points -- [TAU]

use mvp_core::geometry::RigidTransform;
use mvp_core::simulator::{simulate, SceneObject, SceneSpec};
use mvp_core::virtual_points::{generate, GenerationConfig};
use nalgebra::{Point3, Vector3};

fn main() -> mvp_core::Result<()> {
    let tau = std::env::args().nth(1).map_or(50, |s| s.parse().expect("TAU must be an integer"));
    let car = RigidTransform::from_axis_angle(Vector3::z(), 0.5, Vector3::new(18.0, -2.0, 0.8));
    let spec = SceneSpec::with_default_rig(vec![
        SceneObject::cuboid(car, [4.2, 1.8, 1.5], 0, 0.88),
        SceneObject::sphere(Point3::new(38.0, 5.0, 0.9), 0.5, 7, 0.55),
    ]);
    let frame = simulate(&spec)?;
    let config = GenerationConfig { tau, seed: 7, ..GenerationConfig::default() };
    let out = generate(&frame.cloud, &frame.masks, &frame.calibration, &config)?;

    println!("feature dimension {}", out.points.feature_dim);
    for (group, diag) in out.points.groups.iter().zip(&out.diagnostics) {
        let depths: Vec<f64> = group.points.iter().map(|p| p.position.coords.norm()).collect();
        let (lo, hi) = depths.iter().fold((f64::MAX, f64::MIN), |(a, b), &d| (a.min(d), b.max(d)));
        println!(
            "instance {}: {} frustum points, {} virtual points, range {:.2}-{:.2} m",
            diag.instance_id, diag.frustum_size, diag.emitted, lo, hi
        );
    }
    Ok(())
}
