//! Voxelizes real and virtual points with both encodings and compares them.
//!
//! cargo run --example split_voxelization

use mvp_core::scene::{LidarPoint, PointCloud, VirtualGroup, VirtualPoint, VirtualPointSet};
use mvp_core::voxelizer::{encode_padded, encode_split, VoxelGridSpec};
use nalgebra::Point3;

fn main() -> mvp_core::Result<()> {
    let cloud = PointCloud::new(
        vec![LidarPoint::new(1.0, 1.0, 0.0, 0.2), LidarPoint::new(1.5, 1.2, 0.5, 0.6), LidarPoint::new(4.0, 0.5, 0.0, 0.9)],
        0.0,
    );
    let set = VirtualPointSet {
        feature_dim: 3,
        groups: vec![VirtualGroup {
            instance_id: 1,
            points: vec![
                VirtualPoint { position: Point3::new(1.2, 0.8, 0.1), t: 0.0, feature: vec![1.0, 0.0, 0.8] },
                VirtualPoint { position: Point3::new(-2.0, -2.0, 0.0), t: 0.0, feature: vec![0.0, 1.0, 0.4] },
            ],
        }],
    };
    let spec = VoxelGridSpec::new([-6.0, 6.0, -6.0, 6.0, -3.0, 3.0], [3.0, 3.0, 6.0])?;
    for enc in [encode_split(&cloud, &set, &spec)?, encode_padded(&cloud, &set, &spec)?] {
        println!("{:?}: {} voxels, width {}", enc.mode, enc.voxels.len(), enc.width());
        for v in &enc.voxels {
            let f: Vec<String> = v.features.iter().map(|x| format!("{x:.3}")).collect();
            println!("  {:?} real {} virtual {} [{}]", v.coord, v.real_count, v.virtual_count, f.join(", "));
        }
    }
    Ok(())
}
