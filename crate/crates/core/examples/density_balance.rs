//! Compares real and virtual point counts for a near and a far object.
//!
//! cargo run --example density_balance

use mvp_core::eval::density_report;
use mvp_core::simulator::{simulate, SceneObject, SceneSpec};
use mvp_core::virtual_points::{generate, GenerationConfig};
use nalgebra::Point3;

fn main() -> mvp_core::Result<()> {
    let spec = SceneSpec::with_default_rig(vec![
        SceneObject::sphere(Point3::new(8.0, 1.0, 1.0), 1.0, 0, 0.9),
        SceneObject::sphere(Point3::new(24.0, -3.0, 1.0), 1.0, 0, 0.9),
        SceneObject::sphere(Point3::new(42.0, -9.0, 1.0), 1.0, 0, 0.9),
        SceneObject::sphere(Point3::new(60.0, 0.0, 1.0), 1.0, 0, 0.9),
    ]);
    let frame = simulate(&spec)?;
    let virt = generate(&frame.cloud, &frame.masks, &frame.calibration, &GenerationConfig::default())?;
    let report = density_report(&frame.cloud, &virt.points, &frame.ground_truth)?;
    for row in &report.objects {
        println!(
            "instance {} at {:.1} m ({}): {} real, {} virtual",
            row.instance_id, row.range_m, row.range_bin, row.real_points, row.virtual_points
        );
    }
    Ok(())
}
