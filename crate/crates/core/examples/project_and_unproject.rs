//! Projects a Lidar point into the camera through the full calibration chain
//! and lifts the pixel back to 3D.
//!
//! cargo run --example project_and_unproject

use mvp_core::geometry::{CalibrationChain, CameraIntrinsics, RigidTransform};
use mvp_core::simulator::forward_camera_pose;
use nalgebra::{Point3, Vector3};

fn main() -> mvp_core::Result<()> {
    let k = CameraIntrinsics::new(1266.4, 1266.4, 816.3, 491.5, 1600, 900)?;
    let car_from_lidar = RigidTransform::from_axis_angle(Vector3::z(), -0.01, Vector3::new(0.94, 0.0, 1.84));
    let rgb_from_car = forward_camera_pose(1.7, 0.0, 1.5).inverse();
    // car moved 0.4 m forward and yawed slightly between the two captures
    let t1_from_t2 = RigidTransform::from_axis_angle(Vector3::z(), 0.002, Vector3::new(0.4, 0.0, 0.0));
    let chain = CalibrationChain { car_from_lidar, rgb_from_car, t1_from_t2, intrinsics: k, t_lidar: 0.0, t_camera: 0.04 };
    let projector = chain.projector();

    for p in [Point3::new(12.0, 1.5, -0.6), Point3::new(35.0, -8.0, 0.2), Point3::new(-5.0, 0.0, 0.0)] {
        match projector.project_lidar(&p) {
            Some(pd) => {
                let back = projector.unproject_to_lidar(&pd.pixel, pd.depth)?;
                println!(
                    "lidar ({:.2}, {:.2}, {:.2}) -> pixel ({:.3}, {:.3}) depth {:.3} m -> error {:.2e} m",
                    p.x, p.y, p.z, pd.pixel.x, pd.pixel.y, pd.depth, (back - p).norm()
                );
            }
            None => println!("lidar ({:.2}, {:.2}, {:.2}) is behind the camera or off the image", p.x, p.y, p.z),
        }
    }
    println!("rgb_from_lidar:\n{}", chain.rgb_from_lidar().matrix());
    Ok(())
}
