#![allow(dead_code)]

use mvp_core::geometry::RigidTransform;
use mvp_core::simulator::{forward_camera_pose, SceneObject, SceneSpec};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One rectangle facing the camera squarely, with the ego moving forward
/// between Lidar and camera capture.
pub fn plane_scene() -> SceneSpec {
    let wall = SceneObject::plane(forward_camera_pose(12.0, 0.0, 1.6), 4.0, 3.0, 2, 0.9);
    let mut spec = SceneSpec::with_default_rig(vec![wall]);
    spec.ego_velocity = [10.0, 0.0, 0.0, 0.0];
    spec.t_lidar = 100.0;
    spec.t_camera = 100.05;
    spec
}

fn bounding_radius(o: &SceneObject) -> f64 {
    match o.dimensions.len() {
        1 => o.dimensions[0],
        _ => 0.5 * o.dimensions.iter().map(|d| d * d).sum::<f64>().sqrt(),
    }
}

/// Three to five boxes and spheres at 10-30 m in front of the car, randomly
/// sized and oriented, never intersecting each other.
pub fn random_object_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(3..=5);
    let mut objects: Vec<SceneObject> = Vec::new();
    while objects.len() < count {
        let range = rng.random_range(10.0..30.0);
        let azimuth: f64 = rng.random_range(-0.45..0.45);
        let center = Point3::new(range * azimuth.cos(), range * azimuth.sin(), rng.random_range(0.5..1.5));
        let class_id = rng.random_range(0..10);
        let score = rng.random_range(0.3..1.0);
        let candidate = if rng.random_bool(0.5) {
            SceneObject::sphere(center, rng.random_range(0.6..1.4), class_id, score)
        } else {
            let pose = RigidTransform::from_axis_angle(
                Vector3::z(),
                rng.random_range(0.0..std::f64::consts::PI),
                center.coords,
            );
            let size = [
                rng.random_range(1.0..4.5),
                rng.random_range(1.0..2.2),
                rng.random_range(1.0..2.0),
            ];
            SceneObject::cuboid(pose, size, class_id, score)
        };
        let r = bounding_radius(&candidate);
        let clear = objects.iter().all(|o| {
            let d = (o.pose.translation() - candidate.pose.translation()).norm();
            d > r + bounding_radius(o) + 0.5
        });
        if clear {
            objects.push(candidate);
        }
    }
    let mut spec = SceneSpec::with_default_rig(objects);
    spec.ego_velocity = [rng.random_range(0.0..15.0), 0.0, 0.0, rng.random_range(-0.2..0.2)];
    spec.t_lidar = 0.0;
    spec.t_camera = 0.04;
    spec.seed = seed;
    spec
}

/// `random_object_scene` in front of a large wall at 45 m, so that masks
/// spilling past an object's silhouette pick up background returns.
pub fn object_scene_with_wall(seed: u64) -> SceneSpec {
    let mut spec = random_object_scene(seed);
    spec.objects
        .push(SceneObject::plane(forward_camera_pose(45.0, 0.0, 2.0), 80.0, 30.0, 9, 0.8));
    spec
}

/// Two identical spheres, one near and one far.
pub fn near_far_scene() -> SceneSpec {
    SceneSpec::with_default_rig(vec![
        SceneObject::sphere(Point3::new(10.0, 2.0, 1.0), 1.0, 0, 0.9),
        SceneObject::sphere(Point3::new(45.0, -6.0, 1.0), 1.0, 0, 0.9),
    ])
}

/// Camera at the Lidar origin and a static ego: Lidar returns and mask pixels
/// see exactly the same surfaces.
pub fn colocated(mut spec: SceneSpec) -> SceneSpec {
    let origin = spec.lidar.pose.translation();
    spec.camera.pose = forward_camera_pose(origin.x, origin.y, origin.z);
    spec.ego_velocity = [0.0; 4];
    spec
}
