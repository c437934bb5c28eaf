//! Rigid transforms, pinhole projection and unprojection.
//!
//! Conventions used throughout the crate:
//!
//! * `RigidTransform` named `a_from_b` maps homogeneous column vectors expressed
//!   in frame `b` into frame `a`.
//! * Camera frame: +z forward (depth), +x right, +y down.
//! * Integer pixel `(i, j)` covers the continuous square `[i, i+1) x [j, j+1)`
//!   and has its center at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with camera-frame depth at or below this value are rejected by
/// [`project`] before the perspective division.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const RIGID_TOLERANCE: f64 = 1e-9;

/// A proper rigid motion stored as a 4x4 homogeneous matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 16]", into = "[f64; 16]")]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    /// Validates `matrix` and wraps it. The bottom row must be exactly
    /// `(0, 0, 0, 1)` and the rotation block must be proper and orthonormal.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("transform has non-finite entries".into()));
        }
        let bottom = matrix.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Calibration(format!(
                "bottom row must be exactly (0, 0, 0, 1), got ({}, {}, {}, {})",
                bottom[0], bottom[1], bottom[2], bottom[3]
            )));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = r.transpose() * r;
        let ortho_err = (gram - Matrix3::identity()).amax();
        if ortho_err >= RIGID_TOLERANCE {
            return Err(Error::Calibration(format!(
                "rotation block is not orthonormal (max |R^T R - I| = {ortho_err:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() >= RIGID_TOLERANCE {
            return Err(Error::Calibration(format!(
                "rotation block is not a proper rotation (det = {det})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_row_slice(values))
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        let mut matrix = Matrix4::identity();
        matrix[(0, 3)] = x;
        matrix[(1, 3)] = y;
        matrix[(2, 3)] = z;
        Self { matrix }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let mut matrix = Matrix4::identity();
        matrix
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(rotation.matrix());
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { matrix }
    }

    pub fn rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    /// `self ∘ other`: the result maps `x` to `self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Closed-form inverse `(Rᵀ, -Rᵀ t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        RigidTransform { matrix }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        let m = &self.matrix;
        Point3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.matrix - other.matrix).amax()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 16]> for RigidTransform {
    type Error = Error;

    fn try_from(values: [f64; 16]) -> Result<Self> {
        Self::from_row_major(&values)
    }
}

impl From<RigidTransform> for [f64; 16] {
    fn from(t: RigidTransform) -> Self {
        t.to_row_major()
    }
}

/// Pinhole intrinsics in pixels. Lens distortion is not modelled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Calibration(format!(
                "focal lengths must be finite and positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Calibration("image size must be non-zero".into()));
        }
        if !(0.0..f64::from(width)).contains(&cx) || !(0.0..f64::from(height)).contains(&cy) {
            return Err(Error::Calibration(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Homogeneous 4x4 embedding of the intrinsic matrix.
    pub fn projection_matrix(&self) -> Matrix4<f64> {
        Matrix4::new(
            self.fx, 0.0, self.cx, 0.0, //
            0.0, self.fy, self.cy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y >= 0.0
            && pixel.y < f64::from(self.height)
    }
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        Self::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        RawIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

/// A projected point: continuous pixel coordinates and camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDepth {
    pub pixel: Point2<f64>,
    pub depth: f64,
}

/// Perspective projection of a camera-frame point. Returns `None` for points
/// at or behind the near plane and for points landing outside the image.
pub fn project(point: &Point3<f64>, k: &CameraIntrinsics) -> Option<PixelDepth> {
    if !(point.z > DEPTH_EPSILON) {
        return None;
    }
    let pixel = Point2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    );
    k.contains(&pixel).then_some(PixelDepth {
        pixel,
        depth: point.z,
    })
}

/// Inverse of [`project`] given the depth along the camera z-axis.
pub fn unproject(pixel: &Point2<f64>, depth: f64, k: &CameraIntrinsics) -> Result<Point3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidInput(format!(
            "unprojection depth must be positive and finite, got {depth}"
        )));
    }
    Ok(Point3::new(
        depth * (pixel.x - k.cx) / k.fx,
        depth * (pixel.y - k.cy) / k.fy,
        depth,
    ))
}

/// Continuous coordinates of the center of integer pixel `(col, row)`.
pub fn pixel_center(col: u32, row: u32) -> Point2<f64> {
    Point2::new(f64::from(col) + 0.5, f64::from(row) + 0.5)
}

/// Integer pixel containing the continuous coordinate, if inside the image.
pub fn containing_pixel(pixel: &Point2<f64>, k: &CameraIntrinsics) -> Option<(u32, u32)> {
    k.contains(pixel)
        .then(|| (pixel.x.floor() as u32, pixel.y.floor() as u32))
}

/// Binds one Lidar sweep to one camera image.
///
/// `t1_from_t2` is the ego pose at camera time `t_camera` expressed in the
/// car frame at Lidar time `t_lidar`, i.e. it maps car coordinates at `t2`
/// into car coordinates at `t1`. A Lidar point captured at `t1` therefore
/// reaches the camera through the inverse of this motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationChain {
    #[serde(rename = "T_car_from_lidar")]
    pub car_from_lidar: RigidTransform,
    #[serde(rename = "T_rgb_from_car")]
    pub rgb_from_car: RigidTransform,
    #[serde(rename = "T_t1_from_t2")]
    pub t1_from_t2: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub t_lidar: f64,
    pub t_camera: f64,
}

impl CalibrationChain {
    /// Composed extrinsic chain from the Lidar frame at `t1` to the camera
    /// frame at `t2`.
    pub fn rgb_from_lidar(&self) -> RigidTransform {
        self.rgb_from_car
            .compose(&self.t1_from_t2.inverse())
            .compose(&self.car_from_lidar)
    }

    pub fn projector(&self) -> Projector {
        let rgb_from_lidar = self.rgb_from_lidar();
        Projector {
            lidar_from_rgb: rgb_from_lidar.inverse(),
            rgb_from_lidar,
            intrinsics: self.intrinsics,
        }
    }
}

/// Precomputed forward and inverse chains for one calibration.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub rgb_from_lidar: RigidTransform,
    pub lidar_from_rgb: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl Projector {
    pub fn project_lidar(&self, p: &Point3<f64>) -> Option<PixelDepth> {
        project(&self.rgb_from_lidar.transform_point(p), &self.intrinsics)
    }

    pub fn unproject_to_lidar(&self, pixel: &Point2<f64>, depth: f64) -> Result<Point3<f64>> {
        let camera = unproject(pixel, depth, &self.intrinsics)?;
        Ok(self.lidar_from_rgb.transform_point(&camera))
    }
}
