//! Depth-completion evaluation: chamfer distance, the masked-Lidar experiment
//! and per-range density statistics.

use std::io::Write;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CalibrationChain;
use crate::scene::{semantic_feature, InstanceMaskSet, PointCloud, VirtualPointSet};
use crate::simulator::GroundTruth;
use crate::util::{fmt_sig9, stream_rng, Stream};
use crate::virtual_points::{
    check_dimensions, frustums_with, lift_samples, Frustum, GenerationConfig, PixelIndex,
};

/// Human-readable definition written into every chamfer-bearing report.
pub const CHAMFER_DEFINITION: &str = "a_to_b = mean over a of the Euclidean distance (m) to the \
     nearest point of b; b_to_a symmetric; bidirectional = (a_to_b + b_to_a) / 2";

pub const DEFAULT_MIN_POINTS: usize = 15;
pub const DEFAULT_MASK_FRACTION: f64 = 0.8;

/// Slack on `mask_fraction * n` before flooring, so that e.g. 0.8 * 15 = 12
/// is not lost to representation error.
const REMOVAL_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferResult {
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub bidirectional: f64,
    pub count_a: usize,
    pub count_b: usize,
}

/// Static kd-tree stored as a permuted point array: the median of each range
/// is the node, split dimension cycles with depth.
struct KdTree {
    points: Vec<Point3<f64>>,
}

impl KdTree {
    fn build(points: &[Point3<f64>]) -> Self {
        let mut points = points.to_vec();
        Self::arrange(&mut points, 0);
        Self { points }
    }

    fn arrange(points: &mut [Point3<f64>], depth: usize) {
        if points.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = points.len() / 2;
        points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let (left, right) = points.split_at_mut(mid);
        Self::arrange(left, depth + 1);
        Self::arrange(&mut right[1..], depth + 1);
    }

    /// Smallest squared distance from `q` to any stored point.
    fn nearest_d2(&self, q: &Point3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.points, 0, q, &mut best);
        best
    }

    fn search(points: &[Point3<f64>], depth: usize, q: &Point3<f64>, best: &mut f64) {
        if points.is_empty() {
            return;
        }
        let mid = points.len() / 2;
        let p = &points[mid];
        let d2 = squared_distance(p, q);
        if d2 < *best {
            *best = d2;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&points[..mid], &points[mid + 1..])
        } else {
            (&points[mid + 1..], &points[..mid])
        };
        Self::search(near, depth + 1, q, best);
        if diff * diff <= *best {
            Self::search(far, depth + 1, q, best);
        }
    }
}

fn squared_distance(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

fn directed_mean(from: &[Point3<f64>], to: &KdTree) -> f64 {
    let dists: Vec<f64> = from.par_iter().map(|p| to.nearest_d2(p).sqrt()).collect();
    dists.iter().sum::<f64>() / dists.len() as f64
}

/// Bidirectional chamfer distance between two non-empty point sets.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<ChamferResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput(
            "chamfer distance is undefined for an empty point set".into(),
        ));
    }
    let a_to_b = directed_mean(a, &KdTree::build(b));
    let b_to_a = directed_mean(b, &KdTree::build(a));
    Ok(ChamferResult {
        a_to_b,
        b_to_a,
        bidirectional: (a_to_b + b_to_a) / 2.0,
        count_a: a.len(),
        count_b: b.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedExperimentConfig {
    pub min_points: usize,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for MaskedExperimentConfig {
    fn default() -> Self {
        Self {
            min_points: DEFAULT_MIN_POINTS,
            mask_fraction: DEFAULT_MASK_FRACTION,
            seed: 0,
        }
    }
}

impl MaskedExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "mask_fraction {} must lie in (0, 1)",
                self.mask_fraction
            )));
        }
        if self.min_points == 0 {
            return Err(Error::InvalidInput("min_points must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of points hidden from an object with `n` eligible points.
    pub fn removal_count(&self, n: usize) -> usize {
        ((self.mask_fraction * n as f64 + REMOVAL_SLACK).floor() as usize).min(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectStatus {
    Evaluated,
    BelowMinPoints,
    NoKeptPoints,
    NothingRemoved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedObjectRow {
    pub instance_id: u32,
    /// Frustum points whose ground-truth object is this instance.
    pub eligible_points: usize,
    pub removed: usize,
    pub kept: usize,
    pub status: ObjectStatus,
    /// `a` = generated virtual points, `b` = hidden real points.
    pub chamfer: Option<ChamferResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateChamfer {
    pub objects: usize,
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub bidirectional: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedReport {
    pub chamfer_definition: String,
    pub config: MaskedExperimentConfig,
    pub generation: GenerationConfig,
    pub objects: Vec<MaskedObjectRow>,
    /// Mean over evaluated objects; `None` when no object qualified.
    pub aggregate: Option<AggregateChamfer>,
}

/// Hides a random subset of each object's Lidar points, regenerates them as
/// virtual points at their projected pixels using only the remaining
/// frustum points for depth, and scores the result against the hidden points.
pub fn masked_experiment(
    cloud: &PointCloud,
    point_object_ids: &[u32],
    masks: &InstanceMaskSet,
    calib: &CalibrationChain,
    generation: &GenerationConfig,
    config: &MaskedExperimentConfig,
) -> Result<MaskedReport> {
    generation.validate()?;
    config.validate()?;
    check_dimensions(masks, calib)?;
    if point_object_ids.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth ids for {} points",
            point_object_ids.len(),
            cloud.len()
        )));
    }
    let projector = calib.projector();
    let frustums = frustums_with(cloud, masks, &projector);

    let rows = frustums
        .par_iter()
        .zip(masks.instances().par_iter())
        .map(|(frustum, meta)| {
            let id = frustum.instance_id;
            let own: Vec<usize> = frustum
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| point_object_ids[e.source_index] == id)
                .map(|(i, _)| i)
                .collect();
            let removed_count = config.removal_count(own.len());
            let mut row = MaskedObjectRow {
                instance_id: id,
                eligible_points: own.len(),
                removed: removed_count,
                kept: frustum.entries.len() - removed_count,
                status: ObjectStatus::Evaluated,
                chamfer: None,
            };
            if own.len() < config.min_points {
                row.status = ObjectStatus::BelowMinPoints;
                return Ok(row);
            }
            if removed_count == 0 {
                row.status = ObjectStatus::NothingRemoved;
                return Ok(row);
            }
            if row.kept == 0 {
                row.status = ObjectStatus::NoKeptPoints;
                return Ok(row);
            }

            let mut rng = stream_rng(config.seed, generation.frame_id, u64::from(id), Stream::LidarMasking);
            let mut order = own;
            for i in 0..removed_count {
                let j = rand::Rng::random_range(&mut rng, i..order.len());
                order.swap(i, j);
            }
            let mut hidden = order[..removed_count].to_vec();
            hidden.sort_unstable();

            let mut is_hidden = vec![false; frustum.entries.len()];
            for &i in &hidden {
                is_hidden[i] = true;
            }
            let kept = Frustum {
                instance_id: id,
                entries: frustum
                    .entries
                    .iter()
                    .zip(&is_hidden)
                    .filter(|(_, &h)| !h)
                    .map(|(e, _)| *e)
                    .collect(),
            };
            let samples: Vec<_> = hidden.iter().map(|&i| frustum.entries[i].pixel).collect();
            let index = PixelIndex::build(&kept.entries, generation.nn_cell_size);
            let feature = semantic_feature(meta, generation.num_classes)?;
            let (virtual_points, _) = lift_samples(&samples, &kept, &index, &projector, &feature, 0.0)?;

            let generated: Vec<Point3<f64>> = virtual_points.iter().map(|v| v.position).collect();
            let truth: Vec<Point3<f64>> = hidden
                .iter()
                .map(|&i| cloud.points[frustum.entries[i].source_index].position())
                .collect();
            row.chamfer = Some(chamfer(&generated, &truth)?);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    let evaluated: Vec<&ChamferResult> = rows.iter().filter_map(|r| r.chamfer.as_ref()).collect();
    let aggregate = (!evaluated.is_empty()).then(|| {
        let n = evaluated.len() as f64;
        let mean = |f: fn(&ChamferResult) -> f64| evaluated.iter().map(|c| f(c)).sum::<f64>() / n;
        AggregateChamfer {
            objects: evaluated.len(),
            a_to_b: mean(|c| c.a_to_b),
            b_to_a: mean(|c| c.b_to_a),
            bidirectional: mean(|c| c.bidirectional),
        }
    });

    Ok(MaskedReport {
        chamfer_definition: CHAMFER_DEFINITION.to_string(),
        config: config.clone(),
        generation: generation.clone(),
        objects: rows,
        aggregate,
    })
}

/// Upper edges of the range bins in meters; the last bin is open.
pub const RANGE_BIN_EDGES: [f64; 3] = [15.0, 30.0, 50.0];
pub const RANGE_BIN_LABELS: [&str; 4] = ["0-15m", "15-30m", "30-50m", ">50m"];

pub fn range_bin(range_m: f64) -> usize {
    RANGE_BIN_EDGES
        .iter()
        .position(|&edge| range_m < edge)
        .unwrap_or(RANGE_BIN_EDGES.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub instance_id: u32,
    /// Horizontal distance from the Lidar to the object center.
    pub range_m: f64,
    pub range_bin: String,
    pub real_points: usize,
    pub virtual_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBinStats {
    pub range_bin: String,
    pub objects: usize,
    pub mean_real_points: Option<f64>,
    pub mean_virtual_points: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub objects: Vec<DensityRow>,
    pub range_bins: Vec<RangeBinStats>,
}

/// Real and virtual point counts per ground-truth object, with per-range
/// averages.
pub fn density_report(
    cloud: &PointCloud,
    virtual_points: &VirtualPointSet,
    ground_truth: &GroundTruth,
) -> Result<DensityReport> {
    if ground_truth.point_object_ids.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} ground-truth ids for {} points",
            ground_truth.point_object_ids.len(),
            cloud.len()
        )));
    }
    let objects: Vec<DensityRow> = ground_truth
        .objects
        .iter()
        .map(|o| {
            let range_m = ground_truth.object_range(o);
            DensityRow {
                instance_id: o.instance_id,
                range_m,
                range_bin: RANGE_BIN_LABELS[range_bin(range_m)].to_string(),
                real_points: ground_truth
                    .point_object_ids
                    .iter()
                    .filter(|&&id| id == o.instance_id)
                    .count(),
                virtual_points: virtual_points
                    .group(o.instance_id)
                    .map_or(0, |g| g.points.len()),
            }
        })
        .collect();

    let range_bins = RANGE_BIN_LABELS
        .iter()
        .map(|label| {
            let rows: Vec<&DensityRow> = objects.iter().filter(|r| r.range_bin == *label).collect();
            let n = rows.len();
            let mean = |f: fn(&DensityRow) -> usize| {
                (n > 0).then(|| rows.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64)
            };
            RangeBinStats {
                range_bin: label.to_string(),
                objects: n,
                mean_real_points: mean(|r| r.real_points),
                mean_virtual_points: mean(|r| r.virtual_points),
            }
        })
        .collect();
    Ok(DensityReport { objects, range_bins })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

pub fn write_masked_csv(report: &MaskedReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "instance_id,status,eligible_points,removed,kept,a_to_b,b_to_a,bidirectional")?;
    for r in &report.objects {
        let status = serde_json::to_value(r.status).expect("enum serializes");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.instance_id,
            status.as_str().unwrap_or_default(),
            r.eligible_points,
            r.removed,
            r.kept,
            opt(r.chamfer.map(|c| c.a_to_b)),
            opt(r.chamfer.map(|c| c.b_to_a)),
            opt(r.chamfer.map(|c| c.bidirectional)),
        )?;
    }
    Ok(())
}

pub fn write_density_csv(report: &DensityReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "instance_id,range_m,range_bin,real_points,virtual_points")?;
    for r in &report.objects {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.instance_id,
            fmt_sig9(r.range_m),
            r.range_bin,
            r.real_points,
            r.virtual_points
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
        let total: f64 = a
            .iter()
            .map(|p| {
                b.iter()
                    .map(|q| squared_distance(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        total / a.len() as f64
    }

    #[test]
    fn hand_example() {
        let a = [Point3::origin()];
        let b = [Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let c = chamfer(&a, &b).unwrap();
        assert_eq!((c.a_to_b, c.b_to_a, c.bidirectional), (1.0, 2.0, 1.5));
    }

    #[test]
    fn self_distance_is_zero_and_empty_errors() {
        let a = [Point3::new(1.0, 2.0, 3.0), Point3::new(-1.0, 0.5, 2.0)];
        assert_eq!(chamfer(&a, &a).unwrap().bidirectional, 0.0);
        assert!(chamfer(&a, &[]).is_err());
        assert!(chamfer(&[], &a).is_err());
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cloud = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Point3<f64>> {
                (0..n)
                    .map(|_| {
                        // coarse lattice forces plenty of coordinate ties
                        Point3::new(
                            f64::from(rng.random_range(-20..20)) * 0.5,
                            rng.random_range(-10.0..10.0),
                            f64::from(rng.random_range(0..4)),
                        )
                    })
                    .collect()
            };
            let a = cloud(rng.random_range(1..300), &mut rng);
            let b = cloud(rng.random_range(1..300), &mut rng);
            let c = chamfer(&a, &b).unwrap();
            assert_eq!(c.a_to_b, brute_force(&a, &b));
            assert_eq!(c.b_to_a, brute_force(&b, &a));
        }
    }

    #[test]
    fn removal_counts() {
        let cfg = MaskedExperimentConfig::default();
        assert_eq!(cfg.removal_count(15), 12);
        assert_eq!(cfg.removal_count(16), 12);
        assert_eq!(cfg.removal_count(10), 8);
        let tenth = MaskedExperimentConfig {
            mask_fraction: 0.1,
            ..cfg
        };
        assert_eq!(tenth.removal_count(30), 3);
    }

    #[test]
    fn config_validation() {
        for f in [0.0, 1.0, -0.5, f64::NAN] {
            let c = MaskedExperimentConfig {
                mask_fraction: f,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        let c = MaskedExperimentConfig {
            min_points: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn range_bins() {
        assert_eq!(range_bin(0.0), 0);
        assert_eq!(range_bin(14.99), 0);
        assert_eq!(range_bin(15.0), 1);
        assert_eq!(range_bin(45.0), 2);
        assert_eq!(range_bin(50.0), 3);
    }
}
