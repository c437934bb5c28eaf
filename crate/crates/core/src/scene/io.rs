//! File formats.
//!
//! * `MVPC1` point cloud: magic, u64 count, `count` records of five f32
//!   `(x, y, z, r, t)`.
//! * `MVVP1` virtual points: magic, u64 group count, u32 feature dimension
//!   `D`, then per group u32 instance id, u64 count and `count` records of
//!   `3 + 1 + D` f32 `(x, y, z, t, e...)`.
//! * Instance masks: 16-bit binary PGM (`P5`) plus a JSON sidecar.
//!
//! All integers and floats are little-endian except the PGM samples, which
//! are big-endian as the PGM format requires. Values are computed in f64 and
//! stored as f32; round trips are bit-exact over the stored values.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::{
    Detection, InstanceMaskSet, LidarPoint, PointCloud, VirtualGroup, VirtualPoint,
    VirtualPointSet,
};
use crate::error::{Error, Result};
use crate::geometry::CalibrationChain;
use crate::util::fmt_sig9;

pub const CLOUD_MAGIC: &[u8; 5] = b"MVPC1";
pub const VIRTUAL_MAGIC: &[u8; 5] = b"MVVP1";

const CLOUD_RECORD_BYTES: u64 = 5 * 4;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], context: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            context,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn parse_error(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            context: self.context,
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                context: self.context,
                message: format!(
                    "needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let found = self.bytes.get(..magic.len());
        if found != Some(magic) {
            return Err(self.parse_error(
                0,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        self.pos = magic.len();
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads an f32, rejecting NaN and infinities.
    pub(crate) fn finite_f32(&mut self) -> Result<f64> {
        let offset = self.offset();
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(self.parse_error(offset, format!("non-finite value {v}")));
        }
        Ok(f64::from(v))
    }

    /// Fails unless `count` records of `record_bytes` fit in the remaining
    /// payload.
    pub(crate) fn require_records(&self, count: u64, record_bytes: u64) -> Result<()> {
        let needed = count.checked_mul(record_bytes);
        if needed.is_none_or(|n| n > self.remaining() as u64) {
            return Err(Error::Truncated {
                context: self.context,
                message: format!(
                    "declared {count} records of {record_bytes} bytes at offset {}, payload holds {} bytes",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.parse_error(
                self.offset(),
                format!("{} trailing bytes after payload", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn f32_bytes(v: f64, what: &str) -> Result<[u8; 4]> {
    let s = v as f32;
    if !s.is_finite() {
        return Err(Error::InvalidInput(format!(
            "{what} value {v} is not representable as a finite f32"
        )));
    }
    Ok(s.to_le_bytes())
}

pub fn encode_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(13 + cloud.len() * CLOUD_RECORD_BYTES as usize);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r, p.t] {
            out.extend_from_slice(&f32_bytes(v, "point")?);
        }
    }
    Ok(out)
}

/// Decodes an `MVPC1` payload. The format carries no sweep timestamp, so the
/// returned cloud has `timestamp = 0`; callers take it from the calibration.
pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = ByteReader::new(bytes, "MVPC1 cloud");
    r.expect_magic(CLOUD_MAGIC)?;
    let count = r.u64()?;
    r.require_records(count, CLOUD_RECORD_BYTES)?;
    let mut points = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = r.offset();
        let p = LidarPoint {
            x: r.finite_f32()?,
            y: r.finite_f32()?,
            z: r.finite_f32()?,
            r: r.finite_f32()?,
            t: r.finite_f32()?,
        };
        if !(0.0..=1.0).contains(&p.r) {
            return Err(r.parse_error(start + 12, format!("reflectance {} outside [0, 1]", p.r)));
        }
        points.push(p);
    }
    r.finish()?;
    Ok(PointCloud::new(points, 0.0))
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cloud(cloud)?).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    decode_cloud(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_virtual(set: &VirtualPointSet) -> Result<Vec<u8>> {
    set.validate()?;
    let dim = u32::try_from(set.feature_dim)
        .map_err(|_| Error::Format("feature dimension exceeds u32".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(VIRTUAL_MAGIC);
    out.extend_from_slice(&(set.groups.len() as u64).to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for g in &set.groups {
        out.extend_from_slice(&g.instance_id.to_le_bytes());
        out.extend_from_slice(&(g.points.len() as u64).to_le_bytes());
        for p in &g.points {
            for v in [p.position.x, p.position.y, p.position.z, p.t] {
                out.extend_from_slice(&f32_bytes(v, "virtual point")?);
            }
            for &e in &p.feature {
                out.extend_from_slice(&f32_bytes(e, "feature")?);
            }
        }
    }
    Ok(out)
}

pub fn decode_virtual(bytes: &[u8]) -> Result<VirtualPointSet> {
    let mut r = ByteReader::new(bytes, "MVVP1 virtual points");
    r.expect_magic(VIRTUAL_MAGIC)?;
    let group_count = r.u64()?;
    let dim = r.u32()? as usize;
    let record_bytes = 4 * (4 + dim as u64);
    // each group needs at least its 12-byte header
    r.require_records(group_count, 12)?;
    let mut groups = Vec::with_capacity(group_count as usize);
    for _ in 0..group_count {
        let instance_id = r.u32()?;
        let count = r.u64()?;
        r.require_records(count, record_bytes)?;
        let mut points = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let position = Point3::new(r.finite_f32()?, r.finite_f32()?, r.finite_f32()?);
            let t = r.finite_f32()?;
            let feature = (0..dim).map(|_| r.finite_f32()).collect::<Result<_>>()?;
            points.push(VirtualPoint {
                position,
                t,
                feature,
            });
        }
        groups.push(VirtualGroup {
            instance_id,
            points,
        });
    }
    r.finish()?;
    Ok(VirtualPointSet {
        feature_dim: dim,
        groups,
    })
}

pub fn save_virtual(set: &VirtualPointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_virtual(set)?).map_err(|e| Error::io(path, e))
}

pub fn load_virtual(path: impl AsRef<Path>) -> Result<VirtualPointSet> {
    let path = path.as_ref();
    decode_virtual(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// JSON sidecar describing the instances of a PGM instance map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetaFile {
    pub width: u32,
    pub height: u32,
    pub instances: Vec<MaskMetaEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetaEntry {
    pub instance_id: u32,
    pub class_id: u32,
    pub score: f64,
    /// Informational; verified against the map when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_count: Option<usize>,
}

fn encode_pgm16(width: u32, height: u32, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

fn decode_pgm16(bytes: &[u8]) -> Result<(u32, u32, Vec<u16>)> {
    let err = |offset: usize, message: String| Error::Parse {
        context: "PGM instance map",
        offset: offset as u64,
        message,
    };
    if bytes.get(..2) != Some(b"P5") {
        return Err(err(0, "expected binary PGM magic 'P5'".into()));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, "expected decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| err(start, format!("header field: {e}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected single whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if !(256..=65535).contains(&maxval) {
        return Err(err(pos, format!("expected 16-bit PGM, maxval is {maxval}")));
    }
    if width == 0 || height == 0 || width > u64::from(u32::MAX) || height > u64::from(u32::MAX) {
        return Err(err(pos, format!("invalid image size {width}x{height}")));
    }
    let n = (width * height) as usize;
    let payload = &bytes[pos..];
    if payload.len() < n * 2 {
        return Err(Error::Truncated {
            context: "PGM instance map",
            message: format!(
                "{width}x{height} image needs {} sample bytes, {} present",
                n * 2,
                payload.len()
            ),
        });
    }
    if payload.len() > n * 2 {
        return Err(err(pos + n * 2, "trailing bytes after samples".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(2).enumerate() {
        let s = u16::from_be_bytes([chunk[0], chunk[1]]);
        if u64::from(s) > maxval {
            return Err(err(pos + 2 * i, format!("sample {s} exceeds maxval {maxval}")));
        }
        samples.push(s);
    }
    Ok((width as u32, height as u32, samples))
}

/// Writes the instance map as a 16-bit PGM and its metadata as JSON.
pub fn save_masks(
    masks: &InstanceMaskSet,
    map_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
) -> Result<()> {
    let (map_path, meta_path) = (map_path.as_ref(), meta_path.as_ref());
    let pgm = encode_pgm16(masks.width(), masks.height(), masks.instance_map());
    fs::write(map_path, pgm).map_err(|e| Error::io(map_path, e))?;
    let meta = MaskMetaFile {
        width: masks.width(),
        height: masks.height(),
        instances: masks
            .instances()
            .iter()
            .map(|m| MaskMetaEntry {
                instance_id: m.instance_id,
                class_id: m.class_id,
                score: m.score,
                pixel_count: Some(m.pixel_count),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(meta_path, e))?;
    fs::write(meta_path, text + "\n").map_err(|e| Error::io(meta_path, e))
}

/// Loads a PGM instance map with its JSON metadata and drops detections
/// scoring below `score_threshold`.
pub fn load_masks(
    map_path: impl AsRef<Path>,
    meta_path: impl AsRef<Path>,
    score_threshold: f64,
) -> Result<InstanceMaskSet> {
    let (map_path, meta_path) = (map_path.as_ref(), meta_path.as_ref());
    let bytes = fs::read(map_path).map_err(|e| Error::io(map_path, e))?;
    let (width, height, samples) = decode_pgm16(&bytes)?;
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: MaskMetaFile =
        serde_json::from_str(&text).map_err(|e| Error::json(meta_path, e))?;
    if (meta.width, meta.height) != (width, height) {
        return Err(Error::Load(format!(
            "metadata declares {}x{} but instance map is {width}x{height}",
            meta.width, meta.height
        )));
    }
    let masks = InstanceMaskSet::new(
        width,
        height,
        samples,
        meta.instances.iter().map(|m| Detection {
            instance_id: m.instance_id,
            class_id: m.class_id,
            score: m.score,
        }),
    )
    .map_err(|e| match e {
        Error::InvalidInput(m) => Error::Load(m),
        other => other,
    })?;
    for entry in &meta.instances {
        if let Some(declared) = entry.pixel_count {
            let actual = masks.pixel_count(entry.instance_id);
            if declared != actual {
                return Err(Error::Load(format!(
                    "instance {} declares {declared} pixels, map has {actual}",
                    entry.instance_id
                )));
            }
        }
    }
    Ok(masks.with_score_threshold(score_threshold))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationChain> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_calibration(chain: &CalibrationChain, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(chain).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Debug export, one row per point.
pub fn write_cloud_csv(cloud: &PointCloud, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "x,y,z,r,t")?;
    for p in &cloud.points {
        let row: Vec<String> = [p.x, p.y, p.z, p.r, p.t].iter().map(|&v| fmt_sig9(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_virtual_csv(set: &VirtualPointSet, mut w: impl Write) -> std::io::Result<()> {
    let mut header = vec!["instance_id".to_string(), "x".into(), "y".into(), "z".into(), "t".into()];
    header.extend((0..set.feature_dim).map(|i| format!("e{i}")));
    writeln!(w, "{}", header.join(","))?;
    for g in &set.groups {
        for p in &g.points {
            let mut row = vec![g.instance_id.to_string()];
            row.extend(
                [p.position.x, p.position.y, p.position.z, p.t]
                    .iter()
                    .chain(p.feature.iter())
                    .map(|&v| fmt_sig9(v)),
            );
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::InstanceMaskSet;

    fn one_point() -> PointCloud {
        PointCloud::new(
            vec![LidarPoint {
                x: 1.0,
                y: 2.0,
                z: 3.0,
                r: 0.5,
                t: 0.0,
            }],
            0.0,
        )
    }

    #[test]
    fn empty_cloud_round_trips() {
        let bytes = encode_cloud(&PointCloud::default()).unwrap();
        assert_eq!(bytes.len(), 13);
        assert!(decode_cloud(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_point_round_trips_bit_exactly() {
        let c = one_point();
        let bytes = encode_cloud(&c).unwrap();
        assert_eq!(&bytes[..5], b"MVPC1");
        assert_eq!(&bytes[5..13], &1u64.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.0f32.to_le_bytes());
        assert_eq!(decode_cloud(&bytes).unwrap(), c);
    }

    #[test]
    fn cloud_errors() {
        let good = encode_cloud(&one_point()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_cloud(&bad_magic), Err(Error::Parse { offset: 0, .. })));

        assert!(matches!(
            decode_cloud(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));

        let mut nan = good.clone();
        nan[17..21].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_cloud(&nan), Err(Error::Parse { offset: 17, .. })));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(decode_cloud(&trailing), Err(Error::Parse { .. })));
    }

    #[test]
    fn huge_declared_count_is_truncation() {
        let mut bytes = CLOUD_MAGIC.to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_cloud(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn empty_virtual_set_is_header_only() {
        let bytes = encode_virtual(&VirtualPointSet::new(11)).unwrap();
        assert_eq!(bytes.len(), 5 + 8 + 4);
        let back = decode_virtual(&bytes).unwrap();
        assert_eq!(back.feature_dim, 11);
        assert!(back.groups.is_empty());
    }

    #[test]
    fn virtual_feature_dim_mismatch_is_rejected() {
        let mut set = VirtualPointSet::new(3);
        set.groups.push(VirtualGroup {
            instance_id: 1,
            points: vec![VirtualPoint {
                position: Point3::origin(),
                t: 0.0,
                feature: vec![1.0, 0.0],
            }],
        });
        assert!(matches!(encode_virtual(&set), Err(Error::Format(_))));
    }

    #[test]
    fn virtual_truncation() {
        let mut set = VirtualPointSet::new(2);
        set.groups.push(VirtualGroup {
            instance_id: 4,
            points: vec![
                VirtualPoint {
                    position: Point3::new(1.0, 2.0, 3.0),
                    t: 0.0,
                    feature: vec![1.0, 0.5],
                };
                3
            ],
        });
        let mut bytes = encode_virtual(&set).unwrap();
        // bump the declared count of the only group from 3 to 4
        bytes[21..29].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(decode_virtual(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# instance map\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x01, 0x02, 0x00, 0x00]);
        let (w, h, s) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(s, vec![0x0102, 0]);
        assert!(decode_pgm16(b"P5\n2 1\n255\n\x00\x00").is_err());
        assert!(matches!(
            decode_pgm16(b"P5\n2 1\n65535\n\x00\x00"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn masks_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let (map, meta) = (dir.path().join("m.pgm"), dir.path().join("m.json"));
        let masks = InstanceMaskSet::new(
            3,
            2,
            vec![0, 2, 2, 9, 0, 0],
            [
                Detection {
                    instance_id: 2,
                    class_id: 1,
                    score: 0.9,
                },
                Detection {
                    instance_id: 9,
                    class_id: 0,
                    score: 0.04,
                },
            ],
        )
        .unwrap();
        save_masks(&masks, &map, &meta).unwrap();
        assert_eq!(load_masks(&map, &meta, 0.0).unwrap(), masks);
        let filtered = load_masks(&map, &meta, 0.05).unwrap();
        assert_eq!(filtered.instances().len(), 1);
        assert_eq!(filtered.instance_map(), &[0, 2, 2, 0, 0, 0]);
    }

    #[test]
    fn all_background_map_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (map, meta) = (dir.path().join("m.pgm"), dir.path().join("m.json"));
        save_masks(&InstanceMaskSet::empty(4, 3), &map, &meta).unwrap();
        let loaded = load_masks(&map, &meta, 0.05).unwrap();
        assert!(loaded.instances().is_empty());
        assert_eq!(loaded.width(), 4);
    }

    #[test]
    fn missing_metadata_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let (map, meta) = (dir.path().join("m.pgm"), dir.path().join("m.json"));
        fs::write(&map, encode_pgm16(2, 1, &[3, 0])).unwrap();
        fs::write(&meta, r#"{"width":2,"height":1,"instances":[]}"#).unwrap();
        assert!(matches!(load_masks(&map, &meta, 0.05), Err(Error::Load(_))));
    }

    #[test]
    fn csv_uses_nine_significant_digits() {
        let mut buf = Vec::new();
        write_cloud_csv(&one_point(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x,y,z,r,t\n1,2,3,0.5,0\n");
    }
}
