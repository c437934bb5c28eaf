//! Synthetic frames with exact ground truth.
//!
//! Static boxes, spheres and rectangular planes are placed in the car frame at
//! Lidar time `t1`. A spinning Lidar ray-casts the scene at `t1`; a pinhole
//! camera renders instance masks at `t2` after the ego vehicle has moved under
//! constant velocity and yaw rate.

use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CalibrationChain, CameraIntrinsics, RigidTransform};
use crate::scene::{self, Detection, InstanceMaskSet, LidarPoint, PointCloud};
use crate::util::{stream_rng, Stream};

/// Rays shorter than this are treated as self-intersections.
const MIN_HIT_DISTANCE: f64 = 1e-9;

/// Reflectance assigned to every simulated return.
pub const SIM_REFLECTANCE: f64 = 0.5;

pub const CLOUD_FILE: &str = "cloud.mvpc";
pub const MASK_MAP_FILE: &str = "masks.pgm";
pub const MASK_META_FILE: &str = "masks.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// `dimensions = [lx, ly, lz]` full edge lengths, centered on the pose.
    Box,
    /// `dimensions = [radius]`.
    Sphere,
    /// Finite rectangle in the local xy-plane, normal along local z.
    /// `dimensions = [width, height]`.
    Plane,
}

impl Shape {
    fn arity(self) -> usize {
        match self {
            Shape::Box => 3,
            Shape::Sphere => 1,
            Shape::Plane => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Object pose in the car frame at Lidar time (`car_from_object`).
    pub pose: RigidTransform,
    pub dimensions: Vec<f64>,
    pub class_id: u32,
    pub score: f64,
}

impl SceneObject {
    pub fn sphere(center: Point3<f64>, radius: f64, class_id: u32, score: f64) -> Self {
        Self {
            shape: Shape::Sphere,
            pose: RigidTransform::from_translation(center.x, center.y, center.z),
            dimensions: vec![radius],
            class_id,
            score,
        }
    }

    pub fn cuboid(pose: RigidTransform, size: [f64; 3], class_id: u32, score: f64) -> Self {
        Self {
            shape: Shape::Box,
            pose,
            dimensions: size.to_vec(),
            class_id,
            score,
        }
    }

    pub fn plane(pose: RigidTransform, width: f64, height: f64, class_id: u32, score: f64) -> Self {
        Self {
            shape: Shape::Plane,
            pose,
            dimensions: vec![width, height],
            class_id,
            score,
        }
    }

    /// Ray parameter of the first hit with `t > MIN_HIT_DISTANCE`, ray given
    /// in the car frame.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.transform_vector(dir);
        match self.shape {
            Shape::Sphere => intersect_sphere(&o, &d, self.dimensions[0]),
            Shape::Box => intersect_box(
                &o,
                &d,
                [
                    self.dimensions[0] / 2.0,
                    self.dimensions[1] / 2.0,
                    self.dimensions[2] / 2.0,
                ],
            ),
            Shape::Plane => intersect_plane(&o, &d, self.dimensions[0] / 2.0, self.dimensions[1] / 2.0),
        }
    }

    /// Distance-like residual of `p` (car frame) from the object's surface:
    /// zero for points exactly on it.
    pub fn surface_residual(&self, p: &Point3<f64>) -> f64 {
        let q = self.pose.inverse().transform_point(p);
        match self.shape {
            Shape::Sphere => (q.coords.norm() - self.dimensions[0]).abs(),
            Shape::Box => {
                let excess = (0..3)
                    .map(|i| q[i].abs() - self.dimensions[i] / 2.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                excess.abs()
            }
            Shape::Plane => {
                let outside_x = (q.x.abs() - self.dimensions[0] / 2.0).max(0.0);
                let outside_y = (q.y.abs() - self.dimensions[1] / 2.0).max(0.0);
                q.z.abs() + outside_x + outside_y
            }
        }
    }
}

fn intersect_sphere(o: &Point3<f64>, d: &Vector3<f64>, radius: f64) -> Option<f64> {
    let a = d.norm_squared();
    let b = 2.0 * o.coords.dot(d);
    let c = o.coords.norm_squared() - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (mut t0, mut t1) = (q / a, c / q);
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    [t0, t1].into_iter().find(|&t| t > MIN_HIT_DISTANCE && t.is_finite())
}

fn intersect_box(o: &Point3<f64>, d: &Vector3<f64>, half: [f64; 3]) -> Option<f64> {
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((-half[i] - o[i]) / d[i], (half[i] - o[i]) / d[i]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        near = near.max(a);
        far = far.min(b);
    }
    if near > far {
        return None;
    }
    [near, far].into_iter().find(|&t| t > MIN_HIT_DISTANCE)
}

fn intersect_plane(o: &Point3<f64>, d: &Vector3<f64>, hx: f64, hy: f64) -> Option<f64> {
    if d.z == 0.0 {
        return None;
    }
    let t = -o.z / d.z;
    if !(t > MIN_HIT_DISTANCE) {
        return None;
    }
    let (x, y) = (o.x + t * d.x, o.y + t * d.y);
    (x.abs() <= hx && y.abs() <= hy).then_some(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub beams: u32,
    /// Lowest and highest beam elevation in degrees.
    pub vertical_fov: [f64; 2],
    pub azimuth_steps: u32,
    pub max_range: f64,
    /// `car_from_lidar`.
    #[serde(default)]
    pub pose: RigidTransform,
    /// Standard deviation of Gaussian range noise in meters; 0 disables it.
    #[serde(default)]
    pub range_noise_sigma: f64,
}

impl LidarSpec {
    /// Elevation of beam `i` in radians.
    fn elevation(&self, i: u32) -> f64 {
        let [lo, hi] = self.vertical_fov;
        let deg = if self.beams == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * f64::from(i) / f64::from(self.beams - 1)
        };
        deg.to_radians()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    /// `car_from_camera`, camera looking along its +z axis.
    pub pose: RigidTransform,
}

/// Rotation taking the camera axes (x right, y down, z forward) onto a car
/// frame with x forward, y left, z up.
pub fn forward_camera_pose(x: f64, y: f64, z: f64) -> RigidTransform {
    RigidTransform::from_parts(
        nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
        Vector3::new(x, y, z),
    )
    .expect("axis permutation is a proper rotation")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub lidar: LidarSpec,
    pub camera: CameraSpec,
    /// `(vx, vy, vz, yaw_rate)` in the car frame, m/s and rad/s.
    #[serde(default)]
    pub ego_velocity: [f64; 4],
    #[serde(default)]
    pub t_lidar: f64,
    #[serde(default)]
    pub t_camera: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// A 64-beam Lidar at 1.8 m and a forward-looking 1600x900 camera.
    pub fn with_default_rig(objects: Vec<SceneObject>) -> Self {
        Self {
            objects,
            lidar: LidarSpec {
                beams: 64,
                vertical_fov: [-15.0, 5.0],
                azimuth_steps: 2048,
                max_range: 80.0,
                pose: RigidTransform::from_translation(0.0, 0.0, 1.8),
                range_noise_sigma: 0.0,
            },
            camera: CameraSpec {
                intrinsics: CameraIntrinsics::new(1000.0, 1000.0, 800.0, 450.0, 1600, 900)
                    .expect("valid intrinsics"),
                pose: forward_camera_pose(1.0, 0.0, 1.6),
            },
            ego_velocity: [0.0; 4],
            t_lidar: 0.0,
            t_camera: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.lidar;
        if l.beams == 0 || l.azimuth_steps == 0 {
            return Err(Error::InvalidInput("lidar needs at least one beam and azimuth step".into()));
        }
        if !(l.max_range > 0.0) || !l.max_range.is_finite() {
            return Err(Error::InvalidInput("lidar max_range must be positive".into()));
        }
        if !(l.vertical_fov[0] <= l.vertical_fov[1]) {
            return Err(Error::InvalidInput("vertical_fov must be (low, high)".into()));
        }
        if !(l.range_noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("range_noise_sigma must be non-negative".into()));
        }
        if self.objects.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidInput("at most 65535 objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.dimensions.len() != o.shape.arity()
                || o.dimensions.iter().any(|&d| !(d > 0.0) || !d.is_finite())
            {
                return Err(Error::InvalidInput(format!(
                    "object {i}: {:?} needs {} positive dimensions",
                    o.shape,
                    o.shape.arity()
                )));
            }
            if !(0.0..=1.0).contains(&o.score) {
                return Err(Error::InvalidInput(format!("object {i}: score outside [0, 1]")));
            }
        }
        if !self.ego_velocity.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("ego_velocity must be finite".into()));
        }
        let dt = self.t_camera - self.t_lidar;
        if !(dt.abs() <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "|t_camera - t_lidar| = {} exceeds 1 s",
                dt.abs()
            )));
        }
        Ok(())
    }

    /// Nearest object hit along a car-frame ray: `(object index, t)`.
    pub fn first_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(t) = o.intersect(origin, dir) {
                if best.is_none_or(|(_, bt)| t < bt) {
                    best = Some((i, t));
                }
            }
        }
        best
    }

    /// Camera pose at `t_camera` in the car frame at `t_lidar`.
    pub fn world_from_camera(&self) -> RigidTransform {
        ego_transform(self).compose(&self.camera.pose)
    }
}

/// Object id used for instance masks and ground truth: index + 1.
pub fn instance_id(object_index: usize) -> u32 {
    object_index as u32 + 1
}

/// Ego motion `T_(t1<-t2)`: the car pose at camera time expressed in the car
/// frame at Lidar time, integrating constant body-frame velocity and yaw rate
/// over `t_camera - t_lidar`.
pub fn ego_transform(spec: &SceneSpec) -> RigidTransform {
    let dt = spec.t_camera - spec.t_lidar;
    let [vx, vy, vz, yaw_rate] = spec.ego_velocity;
    let theta = yaw_rate * dt;
    let (x, y) = if yaw_rate == 0.0 {
        (vx * dt, vy * dt)
    } else {
        let (s, c) = theta.sin_cos();
        (
            (vx * s + vy * (c - 1.0)) / yaw_rate,
            (vx * (1.0 - c) + vy * s) / yaw_rate,
        )
    };
    RigidTransform::from_axis_angle(Vector3::z(), theta, Vector3::new(x, y, vz * dt))
}

/// Simulated sweep with the object index hit by each return.
#[derive(Clone, Debug)]
pub struct LidarScan {
    pub cloud: PointCloud,
    /// Instance id (object index + 1) per point.
    pub object_ids: Vec<u32>,
}

/// One ray per (azimuth, beam); the closest hit within `max_range` becomes a
/// point in the Lidar frame. Returns are ordered azimuth-major.
pub fn raycast_lidar(spec: &SceneSpec) -> Result<LidarScan> {
    spec.validate()?;
    let l = &spec.lidar;
    let origin = Point3::from(l.pose.translation());
    let noise = (l.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, l.range_noise_sigma).expect("sigma validated"));

    let columns: Vec<Vec<(LidarPoint, u32)>> = (0..l.azimuth_steps)
        .into_par_iter()
        .map(|a| {
            let azimuth = std::f64::consts::TAU * f64::from(a) / f64::from(l.azimuth_steps);
            let mut rng = noise
                .map(|_| stream_rng(spec.seed, 0, u64::from(a), Stream::RangeNoise));
            let mut column = Vec::new();
            for b in 0..l.beams {
                let el = l.elevation(b);
                let dir_lidar = Vector3::new(el.cos() * azimuth.cos(), el.cos() * azimuth.sin(), el.sin());
                let dir = l.pose.transform_vector(&dir_lidar);
                let Some((obj, t)) = spec.first_hit(&origin, &dir) else {
                    continue;
                };
                if t > l.max_range {
                    continue;
                }
                let range = match (noise, rng.as_mut()) {
                    (Some(n), Some(r)) => t + n.sample(r),
                    _ => t,
                };
                if !(range > 0.0) {
                    continue;
                }
                let p = dir_lidar * range;
                column.push((LidarPoint::new(p.x, p.y, p.z, SIM_REFLECTANCE), instance_id(obj)));
            }
            column
        })
        .collect();

    let (points, object_ids) = columns.into_iter().flatten().unzip();
    Ok(LidarScan {
        cloud: PointCloud::new(points, spec.t_lidar),
        object_ids,
    })
}

/// Instance id map: one camera ray per pixel center, labeled with the nearest
/// object hit. Objects covering no pixel are absent from the mask set.
pub fn render_masks(spec: &SceneSpec) -> Result<InstanceMaskSet> {
    spec.validate()?;
    let k = spec.camera.intrinsics;
    let world_from_camera = spec.world_from_camera();
    let origin = Point3::from(world_from_camera.translation());
    let (w, h) = (k.width(), k.height());
    let rows: Vec<Vec<u16>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let u = f64::from(col) + 0.5;
                    let v = f64::from(row) + 0.5;
                    let dir_cam = Vector3::new((u - k.cx()) / k.fx(), (v - k.cy()) / k.fy(), 1.0);
                    let dir = world_from_camera.transform_vector(&dir_cam);
                    spec.first_hit(&origin, &dir)
                        .map_or(0, |(obj, _)| instance_id(obj) as u16)
                })
                .collect()
        })
        .collect();
    let map: Vec<u16> = rows.into_iter().flatten().collect();
    let mut present = vec![false; spec.objects.len()];
    for &id in &map {
        if id != 0 {
            present[usize::from(id) - 1] = true;
        }
    }
    let detections = spec
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| present[*i])
        .map(|(i, o)| Detection {
            instance_id: instance_id(i),
            class_id: o.class_id,
            score: o.score,
        });
    InstanceMaskSet::new(w, h, map, detections)
}

pub fn calibration(spec: &SceneSpec) -> CalibrationChain {
    CalibrationChain {
        car_from_lidar: spec.lidar.pose,
        rgb_from_car: spec.camera.pose.inverse(),
        t1_from_t2: ego_transform(spec),
        intrinsics: spec.camera.intrinsics,
        t_lidar: spec.t_lidar,
        t_camera: spec.t_camera,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub instance_id: u32,
    pub shape: Shape,
    /// `car_from_object` at Lidar time.
    pub pose: RigidTransform,
    pub dimensions: Vec<f64>,
    pub class_id: u32,
    pub score: f64,
}

/// Evaluation sidecar: which object produced each Lidar return, and every
/// object's exact surface parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub car_from_lidar: RigidTransform,
    pub point_object_ids: Vec<u32>,
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruth {
    pub fn object(&self, instance_id: u32) -> Option<&GroundTruthObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    /// Horizontal distance from the Lidar origin to the object's center.
    pub fn object_range(&self, o: &GroundTruthObject) -> f64 {
        let d = o.pose.translation() - self.car_from_lidar.translation();
        d.x.hypot(d.y)
    }
}

pub fn save_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(gt).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    spec.validate()?;
    Ok(spec)
}

/// Everything one simulated frame produces.
#[derive(Clone, Debug)]
pub struct Frame {
    pub cloud: PointCloud,
    pub masks: InstanceMaskSet,
    pub calibration: CalibrationChain,
    pub ground_truth: GroundTruth,
}

pub fn simulate(spec: &SceneSpec) -> Result<Frame> {
    let scan = raycast_lidar(spec)?;
    let masks = render_masks(spec)?;
    let ground_truth = GroundTruth {
        car_from_lidar: spec.lidar.pose,
        point_object_ids: scan.object_ids,
        objects: spec
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| GroundTruthObject {
                instance_id: instance_id(i),
                shape: o.shape,
                pose: o.pose,
                dimensions: o.dimensions.clone(),
                class_id: o.class_id,
                score: o.score,
            })
            .collect(),
    };
    Ok(Frame {
        cloud: scan.cloud,
        masks,
        calibration: calibration(spec),
        ground_truth,
    })
}

/// Writes the frame bundle into `dir` and returns the written file names.
pub fn write_frame(frame: &Frame, dir: impl AsRef<Path>) -> Result<Vec<&'static str>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene::save_cloud(&frame.cloud, dir.join(CLOUD_FILE))?;
    scene::save_masks(&frame.masks, dir.join(MASK_MAP_FILE), dir.join(MASK_META_FILE))?;
    scene::save_calibration(&frame.calibration, dir.join(CALIBRATION_FILE))?;
    save_ground_truth(&frame.ground_truth, dir.join(GROUND_TRUTH_FILE))?;
    Ok(vec![
        CLOUD_FILE,
        MASK_MAP_FILE,
        MASK_META_FILE,
        CALIBRATION_FILE,
        GROUND_TRUTH_FILE,
    ])
}

/// Ways of degrading 2D instance masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// Nearest-neighbor resample to `1/factor` of the resolution and back.
    Downscale(f64),
    /// `k` steps of 3x3 morphological erosion per instance.
    Erode(u32),
    /// Additive Gaussian noise on detection scores, clamped to `[0, 1]`.
    ScoreNoise(f64),
}

pub fn degrade_masks<R: Rng + ?Sized>(
    masks: &InstanceMaskSet,
    mode: Degradation,
    rng: &mut R,
) -> Result<InstanceMaskSet> {
    let (w, h) = (masks.width() as usize, masks.height() as usize);
    let map = match mode {
        Degradation::Downscale(factor) => {
            if !(factor >= 1.0) || !factor.is_finite() {
                return Err(Error::InvalidInput(format!("downscale factor {factor} must be >= 1")));
            }
            let lw = ((w as f64 / factor).round() as usize).max(1);
            let lh = ((h as f64 / factor).round() as usize).max(1);
            let resample = |i: usize, from: usize, to: usize| ((i as f64 + 0.5) * from as f64 / to as f64) as usize;
            let mut low = vec![0u16; lw * lh];
            for y in 0..lh {
                let sy = resample(y, h, lh).min(h - 1);
                for x in 0..lw {
                    let sx = resample(x, w, lw).min(w - 1);
                    low[y * lw + x] = masks.instance_map()[sy * w + sx];
                }
            }
            let mut high = vec![0u16; w * h];
            for y in 0..h {
                let ly = resample(y, lh, h).min(lh - 1);
                for x in 0..w {
                    let lx = resample(x, lw, w).min(lw - 1);
                    high[y * w + x] = low[ly * lw + lx];
                }
            }
            high
        }
        Degradation::Erode(k) => {
            let mut map = masks.instance_map().to_vec();
            for _ in 0..k {
                let prev = map.clone();
                for y in 0..h {
                    for x in 0..w {
                        let id = prev[y * w + x];
                        if id == 0 {
                            continue;
                        }
                        let interior = y > 0
                            && x > 0
                            && y + 1 < h
                            && x + 1 < w
                            && (y - 1..=y + 1)
                                .all(|ny| (x - 1..=x + 1).all(|nx| prev[ny * w + nx] == id));
                        if !interior {
                            map[y * w + x] = 0;
                        }
                    }
                }
            }
            map
        }
        Degradation::ScoreNoise(sigma) => {
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::InvalidInput(format!("score noise sigma {sigma}: {e}")))?;
            let detections: Vec<Detection> = masks
                .detections()
                .into_iter()
                .map(|d| Detection {
                    score: (d.score + normal.sample(rng)).clamp(0.0, 1.0),
                    ..d
                })
                .collect();
            return InstanceMaskSet::new(
                masks.width(),
                masks.height(),
                masks.instance_map().to_vec(),
                detections,
            );
        }
    };

    let mut present = std::collections::BTreeSet::new();
    present.extend(map.iter().filter(|&&id| id != 0).map(|&id| u32::from(id)));
    let detections: Vec<Detection> = masks
        .detections()
        .into_iter()
        .filter(|d| present.contains(&d.instance_id))
        .collect();
    InstanceMaskSet::new(masks.width(), masks.height(), map, detections)
}
