//! Voxel feature encoding for detector input.
//!
//! The split encoder averages real-point features `(x, y, z, r, t)` and
//! virtual-point features `(x, y, z, t, e...)` separately inside each voxel
//! and concatenates the two means. The padded encoder is the baseline that
//! pools both kinds jointly over one zero-padded feature
//! `(x, y, z, t, r, e..., is_virtual)`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::io::{f32_bytes, ByteReader};
use crate::scene::{PointCloud, VirtualPointSet};
use crate::util::fmt_sig9;

pub const VOXEL_MAGIC: &[u8; 5] = b"MVVX1";

/// Width of the real-point feature block.
pub const REAL_WIDTH: usize = 5;

/// Detection range `[-54, 54] x [-54, 54] x [-5, 3]` meters.
pub const DEFAULT_RANGE: [f64; 6] = [-54.0, 54.0, -54.0, 54.0, -5.0, 3.0];
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [0.075, 0.075, 0.2];

const EXTENT_TOLERANCE: f64 = 1e-9;

/// Axis-aligned grid of half-open voxels `[lo, lo + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct VoxelGridSpec {
    range: [f64; 6],
    voxel_size: [f64; 3],
    dims: [i64; 3],
}

#[derive(Serialize, Deserialize)]
struct RawGridSpec {
    range: [f64; 6],
    voxel_size: [f64; 3],
}

impl VoxelGridSpec {
    /// `range` is `(x_min, x_max, y_min, y_max, z_min, z_max)`.
    pub fn new(range: [f64; 6], voxel_size: [f64; 3]) -> Result<Self> {
        let mut dims = [0i64; 3];
        for axis in 0..3 {
            let (lo, hi, size) = (range[2 * axis], range[2 * axis + 1], voxel_size[axis]);
            if !(lo.is_finite() && hi.is_finite() && size.is_finite()) || size <= 0.0 || hi <= lo {
                return Err(Error::InvalidInput(format!(
                    "axis {axis}: need finite lo < hi and positive size (lo={lo}, hi={hi}, size={size})"
                )));
            }
            let n = (hi - lo) / size;
            if (n - n.round()).abs() >= EXTENT_TOLERANCE || n.round() < 1.0 {
                return Err(Error::InvalidInput(format!(
                    "axis {axis}: extent {} is not a positive multiple of voxel size {size}",
                    hi - lo
                )));
            }
            dims[axis] = n.round() as i64;
        }
        if dims.iter().any(|&d| d > i64::from(i32::MAX)) {
            return Err(Error::InvalidInput("grid too large for i32 voxel coordinates".into()));
        }
        Ok(Self {
            range,
            voxel_size,
            dims,
        })
    }

    pub fn range(&self) -> [f64; 6] {
        self.range
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn dims(&self) -> [i64; 3] {
        self.dims
    }

    /// Integer voxel of `p`, or `None` outside the half-open range.
    pub fn assign(&self, p: &Point3<f64>) -> Option<[i32; 3]> {
        let mut out = [0i32; 3];
        for axis in 0..3 {
            let (lo, hi) = (self.range[2 * axis], self.range[2 * axis + 1]);
            let v = p[axis];
            if !(v >= lo && v < hi) {
                return None;
            }
            let i = ((v - lo) / self.voxel_size[axis]).floor() as i64;
            // (v - lo) / size can round up to dims for v just below hi
            out[axis] = i.min(self.dims[axis] - 1) as i32;
        }
        Some(out)
    }
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self::new(DEFAULT_RANGE, DEFAULT_VOXEL_SIZE).expect("default grid is valid")
    }
}

impl TryFrom<RawGridSpec> for VoxelGridSpec {
    type Error = Error;

    fn try_from(r: RawGridSpec) -> Result<Self> {
        Self::new(r.range, r.voxel_size)
    }
}

impl From<VoxelGridSpec> for RawGridSpec {
    fn from(s: VoxelGridSpec) -> Self {
        RawGridSpec {
            range: s.range,
            voxel_size: s.voxel_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    Split,
    Padded,
}

impl EncodingMode {
    /// Widths of the two feature blocks for feature dimension `d`. The padded
    /// encoding has a single block.
    pub fn block_widths(self, d: usize) -> [usize; 2] {
        match self {
            EncodingMode::Split => [REAL_WIDTH, 4 + d],
            EncodingMode::Padded => [6 + d, 0],
        }
    }
}

/// One occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVoxel {
    pub coord: [i32; 3],
    pub real_count: u32,
    pub virtual_count: u32,
    pub features: Vec<f64>,
}

impl EncodedVoxel {
    pub fn real_mean(&self) -> &[f64] {
        &self.features[..REAL_WIDTH]
    }

    pub fn virtual_mean(&self) -> &[f64] {
        &self.features[REAL_WIDTH..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelEncoding {
    pub spec: VoxelGridSpec,
    pub mode: EncodingMode,
    pub feature_dim: usize,
    /// Sorted by coordinate, lexicographically.
    pub voxels: Vec<EncodedVoxel>,
    pub real_dropped: usize,
    pub virtual_dropped: usize,
}

impl VoxelEncoding {
    pub fn width(&self) -> usize {
        self.mode.block_widths(self.feature_dim).iter().sum()
    }
}

struct Accumulator {
    real_count: u32,
    virtual_count: u32,
    real_sum: Vec<f64>,
    virtual_sum: Vec<f64>,
}

fn encode(
    real: &PointCloud,
    virt: &VirtualPointSet,
    spec: &VoxelGridSpec,
    mode: EncodingMode,
) -> Result<VoxelEncoding> {
    virt.validate()?;
    let d = virt.feature_dim;
    let [wa, wb] = mode.block_widths(d);
    let mut slots: HashMap<[i32; 3], usize> = HashMap::new();
    let mut accs: Vec<Accumulator> = Vec::new();
    let mut slot_for = |coord: [i32; 3], accs: &mut Vec<Accumulator>| -> usize {
        *slots.entry(coord).or_insert_with(|| {
            accs.push(Accumulator {
                real_count: 0,
                virtual_count: 0,
                real_sum: vec![0.0; wa],
                virtual_sum: vec![0.0; wb],
            });
            accs.len() - 1
        })
    };
    let mut coords: Vec<[i32; 3]> = Vec::new();

    let mut real_dropped = 0;
    for p in &real.points {
        let Some(coord) = spec.assign(&p.position()) else {
            real_dropped += 1;
            continue;
        };
        let s = slot_for(coord, &mut accs);
        if s == coords.len() {
            coords.push(coord);
        }
        let acc = &mut accs[s];
        acc.real_count += 1;
        let feature: [f64; 5] = match mode {
            EncodingMode::Split => [p.x, p.y, p.z, p.r, p.t],
            EncodingMode::Padded => [p.x, p.y, p.z, p.t, p.r],
        };
        for (sum, v) in acc.real_sum.iter_mut().zip(feature) {
            *sum += v;
        }
    }

    let mut virtual_dropped = 0;
    for v in virt.iter() {
        let Some(coord) = spec.assign(&v.position) else {
            virtual_dropped += 1;
            continue;
        };
        let s = slot_for(coord, &mut accs);
        if s == coords.len() {
            coords.push(coord);
        }
        let acc = &mut accs[s];
        acc.virtual_count += 1;
        match mode {
            EncodingMode::Split => {
                let head = [v.position.x, v.position.y, v.position.z, v.t];
                for (sum, x) in acc.virtual_sum.iter_mut().zip(head.iter().chain(&v.feature)) {
                    *sum += x;
                }
            }
            EncodingMode::Padded => {
                // (x, y, z, t, r = 0, e..., is_virtual = 1)
                let sum = &mut acc.real_sum;
                sum[0] += v.position.x;
                sum[1] += v.position.y;
                sum[2] += v.position.z;
                sum[3] += v.t;
                sum[4] += 0.0;
                for (s, e) in sum[5..5 + d].iter_mut().zip(&v.feature) {
                    *s += e;
                }
                sum[5 + d] += 1.0;
            }
        }
    }

    let mut voxels: Vec<EncodedVoxel> = coords
        .into_iter()
        .zip(accs)
        .map(|(coord, acc)| {
            let features = match mode {
                EncodingMode::Split => mean(&acc.real_sum, acc.real_count)
                    .chain(mean(&acc.virtual_sum, acc.virtual_count))
                    .collect(),
                EncodingMode::Padded => {
                    mean(&acc.real_sum, acc.real_count + acc.virtual_count).collect()
                }
            };
            EncodedVoxel {
                coord,
                real_count: acc.real_count,
                virtual_count: acc.virtual_count,
                features,
            }
        })
        .collect();
    voxels.sort_unstable_by_key(|v| v.coord);

    Ok(VoxelEncoding {
        spec: *spec,
        mode,
        feature_dim: d,
        voxels,
        real_dropped,
        virtual_dropped,
    })
}

fn mean(sum: &[f64], count: u32) -> impl Iterator<Item = f64> + '_ {
    sum.iter().map(move |&s| {
        if count == 0 {
            0.0
        } else {
            s / f64::from(count)
        }
    })
}

/// Split voxelization: separate real and virtual means per voxel, concatenated.
pub fn encode_split(
    real: &PointCloud,
    virt: &VirtualPointSet,
    spec: &VoxelGridSpec,
) -> Result<VoxelEncoding> {
    encode(real, virt, spec, EncodingMode::Split)
}

/// Zero-padded joint pooling baseline.
pub fn encode_padded(
    real: &PointCloud,
    virt: &VirtualPointSet,
    spec: &VoxelGridSpec,
) -> Result<VoxelEncoding> {
    encode(real, virt, spec, EncodingMode::Padded)
}

pub fn encode_voxels(enc: &VoxelEncoding) -> Result<Vec<u8>> {
    let [wa, wb] = enc.mode.block_widths(enc.feature_dim);
    let mut out = Vec::new();
    out.extend_from_slice(VOXEL_MAGIC);
    for v in enc.spec.range.iter().chain(&enc.spec.voxel_size) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match enc.mode {
        EncodingMode::Split => 0,
        EncodingMode::Padded => 1,
    });
    for w in [enc.feature_dim, wa, wb] {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(enc.voxels.len() as u64).to_le_bytes());
    for v in &enc.voxels {
        for c in v.coord {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&v.real_count.to_le_bytes());
        out.extend_from_slice(&v.virtual_count.to_le_bytes());
        for &f in &v.features {
            out.extend_from_slice(&f32_bytes(f, "voxel feature")?);
        }
    }
    Ok(out)
}

/// Decodes an `MVVX1` payload. Dropped-point counters are not stored and
/// come back as zero.
pub fn decode_voxels(bytes: &[u8]) -> Result<VoxelEncoding> {
    let mut r = ByteReader::new(bytes, "MVVX1 voxels");
    r.expect_magic(VOXEL_MAGIC)?;
    let mut vals = [0.0; 9];
    for v in &mut vals {
        *v = r.f64()?;
    }
    let spec = VoxelGridSpec::new(vals[..6].try_into().unwrap(), vals[6..].try_into().unwrap())
        .map_err(|e| Error::Format(format!("MVVX1 grid header: {e}")))?;
    let mode_offset = r.offset();
    let mode = match r.u8()? {
        0 => EncodingMode::Split,
        1 => EncodingMode::Padded,
        m => return Err(r.parse_error(mode_offset, format!("unknown encoding mode {m}"))),
    };
    let widths_offset = r.offset();
    let d = r.u32()? as usize;
    let (wa, wb) = (r.u32()? as usize, r.u32()? as usize);
    if [wa, wb] != mode.block_widths(d) {
        return Err(r.parse_error(
            widths_offset,
            format!("feature widths ({wa}, {wb}) inconsistent with D = {d}"),
        ));
    }
    let count = r.u64()?;
    let width = wa + wb;
    r.require_records(count, 20 + 4 * width as u64)?;
    let mut voxels = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let coord = [r.i32()?, r.i32()?, r.i32()?];
        let real_count = r.u32()?;
        let virtual_count = r.u32()?;
        let features = (0..width).map(|_| r.finite_f32()).collect::<Result<_>>()?;
        voxels.push(EncodedVoxel {
            coord,
            real_count,
            virtual_count,
            features,
        });
    }
    r.finish()?;
    Ok(VoxelEncoding {
        spec,
        mode,
        feature_dim: d,
        voxels,
        real_dropped: 0,
        virtual_dropped: 0,
    })
}

pub fn save_voxels(enc: &VoxelEncoding, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_voxels(enc)?).map_err(|e| Error::io(path, e))
}

pub fn load_voxels(path: impl AsRef<Path>) -> Result<VoxelEncoding> {
    let path = path.as_ref();
    decode_voxels(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_voxels_csv(enc: &VoxelEncoding, mut w: impl Write) -> std::io::Result<()> {
    let mut header: Vec<String> = ["ix", "iy", "iz", "real_count", "virtual_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..enc.width()).map(|i| format!("f{i}")));
    writeln!(w, "{}", header.join(","))?;
    for v in &enc.voxels {
        let mut row: Vec<String> = v.coord.iter().map(i32::to_string).collect();
        row.push(v.real_count.to_string());
        row.push(v.virtual_count.to_string());
        row.extend(v.features.iter().map(|&f| fmt_sig9(f)));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LidarPoint, VirtualGroup, VirtualPoint};

    fn cloud(points: &[(f64, f64, f64, f64)]) -> PointCloud {
        PointCloud::new(
            points
                .iter()
                .map(|&(x, y, z, r)| LidarPoint::new(x, y, z, r))
                .collect(),
            0.0,
        )
    }

    fn one_virtual(x: f64, y: f64, z: f64, feature: Vec<f64>) -> VirtualPointSet {
        VirtualPointSet {
            feature_dim: feature.len(),
            groups: vec![VirtualGroup {
                instance_id: 1,
                points: vec![VirtualPoint {
                    position: Point3::new(x, y, z),
                    t: 0.0,
                    feature,
                }],
            }],
        }
    }

    #[test]
    fn assign_edges() {
        let spec = VoxelGridSpec::default();
        assert_eq!(spec.dims(), [1440, 1440, 40]);
        assert_eq!(spec.assign(&Point3::new(-54.0, -54.0, -5.0)), Some([0, 0, 0]));
        assert_eq!(spec.assign(&Point3::new(54.0, 0.0, 0.0)), None);
        assert_eq!(spec.assign(&Point3::new(0.0, 0.0, 0.0)).unwrap()[0], 720);
        assert_eq!(spec.assign(&Point3::new(f64::NAN, 0.0, 0.0)), None);
        let just_below = 54.0f64.next_down();
        assert_eq!(spec.assign(&Point3::new(just_below, 0.0, 0.0)).unwrap()[0], 1439);
    }

    #[test]
    fn rejects_incompatible_grids() {
        assert!(VoxelGridSpec::new([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], [0.3, 0.5, 0.5]).is_err());
        assert!(VoxelGridSpec::new([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], [0.0, 0.5, 0.5]).is_err());
        assert!(VoxelGridSpec::new([1.0, 0.0, 0.0, 1.0, 0.0, 1.0], [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn real_only_voxel_averages_reflectance() {
        let spec = VoxelGridSpec::default();
        let real = cloud(&[(1.0, 1.0, 0.01, 0.2), (1.01, 1.01, 0.02, 0.4)]);
        let enc = encode_split(&real, &VirtualPointSet::new(3), &spec).unwrap();
        assert_eq!(enc.voxels.len(), 1);
        let v = &enc.voxels[0];
        assert!((v.real_mean()[3] - 0.3).abs() < 1e-15);
        assert_eq!(v.virtual_count, 0);
        assert!(v.virtual_mean().iter().all(|&x| x == 0.0));
        assert_eq!(v.features.len(), 5 + 4 + 3);
    }

    #[test]
    fn split_keeps_modalities_apart() {
        let spec = VoxelGridSpec::default();
        let real = cloud(&[(1.0, 1.0, 0.0, 0.6)]);
        let virt = one_virtual(1.01, 1.01, 0.01, vec![0.0, 1.0, 0.9]);
        let enc = encode_split(&real, &virt, &spec).unwrap();
        let v = &enc.voxels[0];
        assert_eq!(v.real_mean(), &[1.0, 1.0, 0.0, 0.6, 0.0]);
        assert_eq!(v.virtual_mean(), &[1.01, 1.01, 0.01, 0.0, 0.0, 1.0, 0.9]);
    }

    #[test]
    fn padded_blurs_reflectance() {
        let spec = VoxelGridSpec::default();
        let real = cloud(&[(1.0, 1.0, 0.0, 0.6)]);
        let virt = one_virtual(1.01, 1.01, 0.01, vec![0.0, 1.0, 0.9]);
        let enc = encode_padded(&real, &virt, &spec).unwrap();
        let f = &enc.voxels[0].features;
        assert_eq!(f.len(), 6 + 3);
        assert_eq!(f[4], 0.3);
        assert_eq!(f[8], 0.5);

        let only_real = encode_padded(&real, &VirtualPointSet::new(3), &spec).unwrap();
        assert!(only_real.voxels[0].features[5..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_points_are_counted() {
        let spec = VoxelGridSpec::default();
        let real = cloud(&[(60.0, 0.0, 0.0, 0.5), (0.0, 0.0, 0.0, 0.5)]);
        let virt = one_virtual(0.0, 0.0, 10.0, vec![1.0, 0.5]);
        let enc = encode_split(&real, &virt, &spec).unwrap();
        assert_eq!((enc.real_dropped, enc.virtual_dropped), (1, 1));
        assert_eq!(enc.voxels.len(), 1);
    }

    #[test]
    fn mvvx_round_trip() {
        let spec = VoxelGridSpec::default();
        let real = cloud(&[(1.0, 1.0, 0.0, 0.5), (-3.0, 2.0, 1.0, 0.25)]);
        let virt = one_virtual(1.0, 1.0, 0.0, vec![1.0, 0.0, 0.75]);
        for enc in [
            encode_split(&real, &virt, &spec).unwrap(),
            encode_padded(&real, &virt, &spec).unwrap(),
        ] {
            let bytes = encode_voxels(&enc).unwrap();
            let back = decode_voxels(&bytes).unwrap();
            assert_eq!(back.voxels, enc.voxels);
            assert_eq!(back.mode, enc.mode);
            assert_eq!(encode_voxels(&back).unwrap(), bytes);
            assert!(matches!(
                decode_voxels(&bytes[..bytes.len() - 2]),
                Err(Error::Truncated { .. })
            ));
        }
    }
}
