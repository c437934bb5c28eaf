//! Multi-modal virtual point generation.
//!
//! Lidar points are projected into the image and collected into per-instance
//! frustums. For every instance mask, `tau` pixels are drawn uniformly without
//! replacement; each borrows the depth of its nearest projected Lidar point in
//! the same frustum and is unprojected back into the Lidar frame carrying the
//! instance's semantic feature.

mod index;

use nalgebra::Point2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use index::PixelIndex;

use crate::error::{Error, Result};
use crate::geometry::{containing_pixel, pixel_center, CalibrationChain, Projector};
use crate::scene::{
    semantic_feature, InstanceMaskSet, PointCloud, SemanticFeature, VirtualGroup, VirtualPoint,
    VirtualPointSet, DEFAULT_NUM_CLASSES,
};
use crate::util::{stream_rng, Stream};

pub const DEFAULT_TAU: usize = 50;
pub const DEFAULT_NN_CELL_SIZE: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrustumEntry {
    pub pixel: Point2<f64>,
    /// Camera-frame depth in meters.
    pub depth: f64,
    /// Index of the originating point in the Lidar cloud.
    pub source_index: usize,
}

/// Projected Lidar points falling inside one instance mask, in cloud order.
#[derive(Clone, Debug, PartialEq)]
pub struct Frustum {
    pub instance_id: u32,
    pub entries: Vec<FrustumEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Virtual points per object.
    pub tau: usize,
    pub seed: u64,
    /// Keys the per-instance random streams together with `seed`.
    pub frame_id: u64,
    pub nn_cell_size: u32,
    pub num_classes: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            seed: 0,
            frame_id: 0,
            nn_cell_size: DEFAULT_NN_CELL_SIZE,
            num_classes: DEFAULT_NUM_CLASSES,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::InvalidInput("tau must be at least 1".into()));
        }
        if self.nn_cell_size == 0 {
            return Err(Error::InvalidInput("nn_cell_size must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-instance outcome of a generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiagnostic {
    pub instance_id: u32,
    pub frustum_size: usize,
    pub emitted: usize,
    pub skipped_empty_frustum: bool,
}

/// Where a virtual point came from: the sampled pixel and the frustum entry
/// that supplied its depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTrace {
    pub pixel: Point2<f64>,
    pub neighbor: FrustumEntry,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub points: VirtualPointSet,
    pub diagnostics: Vec<InstanceDiagnostic>,
    /// Parallel to `points.groups`, one trace per virtual point.
    pub traces: Vec<Vec<SampleTrace>>,
}

impl Generation {
    pub fn skipped_instances(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| d.skipped_empty_frustum)
            .count()
    }
}

pub(crate) fn check_dimensions(masks: &InstanceMaskSet, calib: &CalibrationChain) -> Result<()> {
    let k = &calib.intrinsics;
    if (masks.width(), masks.height()) != (k.width(), k.height()) {
        return Err(Error::DimensionMismatch(format!(
            "masks are {}x{} but camera intrinsics are {}x{}",
            masks.width(),
            masks.height(),
            k.width(),
            k.height()
        )));
    }
    Ok(())
}

/// Projects every Lidar point and assigns it to the frustum of the instance
/// owning the pixel it lands in. Returns one frustum per instance, in the
/// instance order of `masks`.
pub fn build_frustums(
    cloud: &PointCloud,
    masks: &InstanceMaskSet,
    calib: &CalibrationChain,
) -> Result<Vec<Frustum>> {
    check_dimensions(masks, calib)?;
    let projector = calib.projector();
    Ok(frustums_with(cloud, masks, &projector))
}

pub(crate) fn frustums_with(
    cloud: &PointCloud,
    masks: &InstanceMaskSet,
    projector: &Projector,
) -> Vec<Frustum> {
    let hits: Vec<Option<(u16, FrustumEntry)>> = cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let pd = projector.project_lidar(&p.position())?;
            let (col, row) = containing_pixel(&pd.pixel, &projector.intrinsics)?;
            let id = masks.id_at(col, row);
            (id != 0).then_some((
                id,
                FrustumEntry {
                    pixel: pd.pixel,
                    depth: pd.depth,
                    source_index: i,
                },
            ))
        })
        .collect();

    let mut frustums: Vec<Frustum> = masks
        .instances()
        .iter()
        .map(|m| Frustum {
            instance_id: m.instance_id,
            entries: Vec::new(),
        })
        .collect();
    for (id, entry) in hits.into_iter().flatten() {
        let slot = frustums
            .binary_search_by_key(&u32::from(id), |f| f.instance_id)
            .expect("mask set guarantees metadata for every id");
        frustums[slot].entries.push(entry);
    }
    frustums
}

/// Draws `min(tau, pixels.len())` distinct pixels uniformly at random by a
/// partial Fisher-Yates shuffle and returns their centers.
pub fn sample_mask<R: Rng + ?Sized>(
    pixels: &[(u32, u32)],
    tau: usize,
    rng: &mut R,
) -> Vec<Point2<f64>> {
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    let k = tau.min(pixels.len());
    for i in 0..k {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    order[..k]
        .iter()
        .map(|&i| pixel_center(pixels[i].0, pixels[i].1))
        .collect()
}

/// Nearest frustum entry to `sample` and its depth; `None` for an empty
/// frustum, which means the instance is skipped.
pub fn nearest_depth<'a>(
    sample: &Point2<f64>,
    frustum: &'a Frustum,
    index: &PixelIndex,
) -> Option<(f64, &'a FrustumEntry)> {
    let e = &frustum.entries[index.nearest(sample)?];
    Some((e.depth, e))
}

/// Lifts 2D samples into Lidar-frame virtual points using nearest-neighbor
/// depths from `frustum`. The frustum must be non-empty.
pub(crate) fn lift_samples(
    samples: &[Point2<f64>],
    frustum: &Frustum,
    index: &PixelIndex,
    projector: &Projector,
    feature: &SemanticFeature,
    t: f64,
) -> Result<(Vec<VirtualPoint>, Vec<SampleTrace>)> {
    let mut points = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let (depth, neighbor) = nearest_depth(s, frustum, index)
            .ok_or_else(|| Error::InvalidInput("cannot lift samples from an empty frustum".into()))?;
        let position = projector.unproject_to_lidar(s, depth)?;
        points.push(VirtualPoint {
            position,
            t,
            feature: feature.0.clone(),
        });
        traces.push(SampleTrace {
            pixel: *s,
            neighbor: *neighbor,
        });
    }
    Ok((points, traces))
}

/// Runs the full generation for one frame.
///
/// Every instance yields one group, in instance order. Instances whose frustum
/// holds no Lidar point produce an empty group and are flagged in the
/// diagnostics. Virtual points carry time offset 0, i.e. the sweep timestamp.
pub fn generate(
    cloud: &PointCloud,
    masks: &InstanceMaskSet,
    calib: &CalibrationChain,
    config: &GenerationConfig,
) -> Result<Generation> {
    config.validate()?;
    check_dimensions(masks, calib)?;
    let projector = calib.projector();
    let frustums = frustums_with(cloud, masks, &projector);
    let pixels = masks.instance_pixels();
    let features = masks
        .instances()
        .iter()
        .map(|m| semantic_feature(m, config.num_classes))
        .collect::<Result<Vec<_>>>()?;

    let per_instance = frustums
        .par_iter()
        .zip(features.par_iter())
        .map(|(frustum, feature)| {
            let id = frustum.instance_id;
            if frustum.entries.is_empty() {
                return Ok((Vec::new(), Vec::new()));
            }
            let mut rng = stream_rng(config.seed, config.frame_id, u64::from(id), Stream::MaskSampling);
            let samples = sample_mask(&pixels[&id], config.tau, &mut rng);
            let index = PixelIndex::build(&frustum.entries, config.nn_cell_size);
            lift_samples(&samples, frustum, &index, &projector, feature, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut set = VirtualPointSet::new(config.num_classes + 1);
    let mut diagnostics = Vec::with_capacity(frustums.len());
    let mut traces = Vec::with_capacity(frustums.len());
    for (frustum, (points, trace)) in frustums.iter().zip(per_instance) {
        diagnostics.push(InstanceDiagnostic {
            instance_id: frustum.instance_id,
            frustum_size: frustum.entries.len(),
            emitted: points.len(),
            skipped_empty_frustum: frustum.entries.is_empty(),
        });
        set.groups.push(VirtualGroup {
            instance_id: frustum.instance_id,
            points,
        });
        traces.push(trace);
    }
    Ok(Generation {
        points: set,
        diagnostics,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use crate::scene::{Detection, LidarPoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Identity extrinsics: the Lidar frame is the camera frame.
    fn calib(w: u32, h: u32) -> CalibrationChain {
        CalibrationChain {
            car_from_lidar: RigidTransform::identity(),
            rgb_from_car: RigidTransform::identity(),
            t1_from_t2: RigidTransform::identity(),
            intrinsics: CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h)
                .unwrap(),
            t_lidar: 0.0,
            t_camera: 0.0,
        }
    }

    fn square_masks(w: u32, h: u32, ids: &[(u32, u32, u32, u32, u16)]) -> InstanceMaskSet {
        let mut map = vec![0u16; (w * h) as usize];
        for &(c0, r0, c1, r1, id) in ids {
            for r in r0..r1 {
                for c in c0..c1 {
                    map[(r * w + c) as usize] = id;
                }
            }
        }
        let dets = ids.iter().map(|&(.., id)| Detection {
            instance_id: u32::from(id),
            class_id: 1,
            score: 0.75,
        });
        InstanceMaskSet::new(w, h, map, dets).unwrap()
    }

    #[test]
    fn cloud_behind_camera_gives_empty_frustums() {
        let masks = square_masks(64, 48, &[(0, 0, 64, 48, 1)]);
        let cloud = PointCloud::new(
            (0..20)
                .map(|i| LidarPoint::new(0.1 * i as f64, 0.0, -5.0, 0.5))
                .collect(),
            0.0,
        );
        let f = build_frustums(&cloud, &masks, &calib(64, 48)).unwrap();
        assert_eq!(f.len(), 1);
        assert!(f[0].entries.is_empty());
    }

    #[test]
    fn single_point_lands_in_one_frustum() {
        let masks = square_masks(64, 48, &[(30, 20, 40, 30, 1), (0, 0, 10, 10, 2)]);
        // projects to the principal point (32, 24), inside instance 1
        let cloud = PointCloud::new(vec![LidarPoint::new(0.0, 0.0, 10.0, 0.5)], 0.0);
        let f = build_frustums(&cloud, &masks, &calib(64, 48)).unwrap();
        assert_eq!(f[0].entries.len(), 1);
        assert_eq!(f[0].entries[0].depth, 10.0);
        assert!(f[1].entries.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let masks = square_masks(32, 48, &[(0, 0, 4, 4, 1)]);
        let cloud = PointCloud::default();
        assert!(matches!(
            build_frustums(&cloud, &masks, &calib(64, 48)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn sampling_is_exhaustive_or_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<(u32, u32)> = (0..50).map(|i| (i % 10, i / 10)).collect();
        let mut s = sample_mask(&pixels, 50, &mut rng);
        s.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
        let expected: Vec<_> = pixels.iter().map(|&(c, r)| pixel_center(c, r)).collect();
        assert_eq!(s, expected);

        let few = &pixels[..10];
        let s = sample_mask(few, 50, &mut rng);
        assert_eq!(s.len(), 10);
        let mut keys: Vec<_> = s.iter().map(|p| (p.x as u32, p.y as u32)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 10);
    }

    #[test]
    fn one_entry_frustum_gives_its_depth() {
        let frustum = Frustum {
            instance_id: 1,
            entries: vec![FrustumEntry {
                pixel: Point2::new(3.0, 4.0),
                depth: 12.5,
                source_index: 7,
            }],
        };
        let index = PixelIndex::build(&frustum.entries, 8);
        let (d, e) = nearest_depth(&Point2::new(500.0, 1.0), &frustum, &index).unwrap();
        assert_eq!(d, 12.5);
        assert_eq!(e.source_index, 7);
        let empty = Frustum {
            instance_id: 2,
            entries: vec![],
        };
        assert!(nearest_depth(&Point2::new(0.0, 0.0), &empty, &PixelIndex::build(&[], 8)).is_none());
    }

    #[test]
    fn zero_instances_give_empty_output() {
        let masks = InstanceMaskSet::empty(64, 48);
        let cloud = PointCloud::new(vec![LidarPoint::new(0.0, 0.0, 10.0, 0.5)], 0.0);
        let g = generate(&cloud, &masks, &calib(64, 48), &GenerationConfig::default()).unwrap();
        assert!(g.points.groups.is_empty());
        assert!(g.points.is_empty());
    }

    #[test]
    fn empty_frustum_is_skipped_with_diagnostic() {
        let masks = square_masks(64, 48, &[(30, 20, 40, 30, 1), (0, 0, 10, 10, 2)]);
        let cloud = PointCloud::new(vec![LidarPoint::new(0.0, 0.0, 10.0, 0.5)], 0.0);
        let g = generate(&cloud, &masks, &calib(64, 48), &GenerationConfig::default()).unwrap();
        assert_eq!(g.points.groups[0].points.len(), 50);
        assert!(g.points.groups[1].points.is_empty());
        assert_eq!(g.skipped_instances(), 1);
        assert!(g.diagnostics[1].skipped_empty_frustum);
        assert_eq!(g.diagnostics[0].frustum_size, 1);
    }

    #[test]
    fn virtual_points_inherit_depth_and_feature() {
        let masks = square_masks(64, 48, &[(20, 10, 44, 38, 1)]);
        let cloud = PointCloud::new(
            vec![
                LidarPoint::new(-0.5, 0.0, 10.0, 0.5),
                LidarPoint::new(0.5, 0.0, 12.0, 0.5),
            ],
            0.0,
        );
        let config = GenerationConfig {
            tau: 30,
            num_classes: 3,
            ..Default::default()
        };
        let g = generate(&cloud, &masks, &calib(64, 48), &config).unwrap();
        assert_eq!(g.points.feature_dim, 4);
        for (v, tr) in g.points.groups[0].points.iter().zip(&g.traces[0]) {
            // identity chain: the Lidar frame is the camera frame
            assert_eq!(v.position.z, tr.neighbor.depth);
            assert_eq!(v.feature, vec![0.0, 1.0, 0.0, 0.75]);
            assert_eq!(v.t, 0.0);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let masks = InstanceMaskSet::empty(8, 8);
        let bad = GenerationConfig {
            tau: 0,
            ..Default::default()
        };
        assert!(generate(&PointCloud::default(), &masks, &calib(8, 8), &bad).is_err());
    }

    #[test]
    fn class_outside_label_space_is_an_error() {
        let masks = square_masks(16, 16, &[(0, 0, 4, 4, 1)]);
        let config = GenerationConfig {
            num_classes: 1,
            ..Default::default()
        };
        assert!(generate(&PointCloud::default(), &masks, &calib(16, 16), &config).is_err());
    }
}
