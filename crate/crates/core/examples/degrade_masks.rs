//! Applies each mask degradation to a simulated frame and reports how the
//! instance pixel counts change.
//!
//! cargo run --example degrade_masks

use mvp_core::simulator::{degrade_masks, simulate, Degradation, SceneObject, SceneSpec};
use mvp_core::util::{stream_rng, Stream};
use nalgebra::Point3;

fn main() -> mvp_core::Result<()> {
    let spec = SceneSpec::with_default_rig(vec![
        SceneObject::sphere(Point3::new(12.0, 1.0, 1.0), 1.2, 0, 0.9),
        SceneObject::sphere(Point3::new(30.0, -4.0, 1.0), 0.8, 1, 0.5),
    ]);
    let frame = simulate(&spec)?;
    let mut rng = stream_rng(3, 0, 0, Stream::ScoreNoise);
    let report = |name: &str, masks: &mvp_core::scene::InstanceMaskSet| {
        let cols: Vec<String> = masks
            .instances()
            .iter()
            .map(|m| format!("#{} {} px score {:.3}", m.instance_id, m.pixel_count, m.score))
            .collect();
        println!("{name:<14} {}", cols.join("  "));
    };
    report("original", &frame.masks);
    for mode in [
        Degradation::Downscale(2.0),
        Degradation::Downscale(4.0),
        Degradation::Erode(2),
        Degradation::ScoreNoise(0.1),
    ] {
        let degraded = degrade_masks(&frame.masks, mode, &mut rng)?;
        report(&format!("{mode:?}"), &degraded);
    }
    Ok(())
}
