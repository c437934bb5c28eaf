//! Data model for one frame: the Lidar sweep, the 2D instance masks with
//! their detection metadata, and the generated virtual points.

pub(crate) mod io;

use std::collections::BTreeMap;

use nalgebra::Point3;

use crate::error::{Error, Result};

pub use io::{
    decode_cloud, decode_virtual, encode_cloud, encode_virtual, load_calibration, load_cloud,
    load_masks, load_virtual, save_calibration, save_cloud, save_masks, save_virtual,
    write_cloud_csv, write_virtual_csv, MaskMetaFile, CLOUD_MAGIC, VIRTUAL_MAGIC,
};

/// Output threshold applied to 2D detections before virtual point generation.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;

/// Size of the nuScenes label space.
pub const DEFAULT_NUM_CLASSES: usize = 10;

/// One Lidar return in the sensor frame.
///
/// `t` is the per-point time offset relative to the sweep timestamp; single
/// sweeps always carry `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub t: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r, t: 0.0 }
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }

    fn validate(&self) -> std::result::Result<(), &'static str> {
        if ![self.x, self.y, self.z, self.r, self.t].iter().all(|v| v.is_finite()) {
            return Err("non-finite value");
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err("reflectance outside [0, 1]");
        }
        Ok(())
    }
}

/// A single Lidar sweep. `timestamp` is the capture time in seconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>, timestamp: f64) -> Self {
        Self { points, timestamp }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            p.validate()
                .map_err(|m| Error::InvalidInput(format!("point {i}: {m}")))?;
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(LidarPoint::position).collect()
    }
}

/// Detection metadata for one instance of the mask set.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMeta {
    pub instance_id: u32,
    pub class_id: u32,
    pub score: f64,
    pub pixel_count: usize,
}

/// A 2D detection before its mask is attached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub instance_id: u32,
    pub class_id: u32,
    pub score: f64,
}

/// Flat instance-ID image (0 = background) plus per-instance metadata.
///
/// Pixel ownership is exclusive: an ID map cannot represent overlapping masks.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    width: u32,
    height: u32,
    instance_map: Vec<u16>,
    instances: Vec<InstanceMeta>,
}

impl InstanceMaskSet {
    /// Builds a mask set, computing pixel counts from `instance_map`.
    ///
    /// Every non-zero ID in the map needs a detection, and every detection
    /// must own at least one pixel.
    pub fn new(
        width: u32,
        height: u32,
        instance_map: Vec<u16>,
        detections: impl IntoIterator<Item = Detection>,
    ) -> Result<Self> {
        if instance_map.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "instance map holds {} pixels, expected {width}x{height}",
                instance_map.len()
            )));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in &instance_map {
            if id != 0 {
                *counts.entry(u32::from(id)).or_default() += 1;
            }
        }
        let mut instances = Vec::new();
        for d in detections {
            if d.instance_id == 0 || d.instance_id > u32::from(u16::MAX) {
                return Err(Error::InvalidInput(format!(
                    "instance id {} outside 1..=65535",
                    d.instance_id
                )));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::InvalidInput(format!(
                    "instance {} score {} outside [0, 1]",
                    d.instance_id, d.score
                )));
            }
            let pixel_count = counts.get(&d.instance_id).copied().unwrap_or(0);
            if pixel_count == 0 {
                return Err(Error::InvalidInput(format!(
                    "instance {} has no pixels",
                    d.instance_id
                )));
            }
            instances.push(InstanceMeta {
                instance_id: d.instance_id,
                class_id: d.class_id,
                score: d.score,
                pixel_count,
            });
        }
        instances.sort_by_key(|m| m.instance_id);
        if let Some(w) = instances.windows(2).find(|w| w[0].instance_id == w[1].instance_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate instance id {}",
                w[0].instance_id
            )));
        }
        if let Some(id) = counts
            .keys()
            .find(|id| instances.binary_search_by_key(id, |m| &m.instance_id).is_err())
        {
            return Err(Error::Load(format!(
                "instance id {id} present in map but missing from metadata"
            )));
        }
        Ok(Self {
            width,
            height,
            instance_map,
            instances,
        })
    }

    /// A mask set with no instances.
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            instance_map: vec![0; width as usize * height as usize],
            instances: Vec::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn instance_map(&self) -> &[u16] {
        &self.instance_map
    }

    /// Instances sorted by ascending ID.
    pub fn instances(&self) -> &[InstanceMeta] {
        &self.instances
    }

    pub fn meta(&self, instance_id: u32) -> Option<&InstanceMeta> {
        self.instances
            .binary_search_by_key(&instance_id, |m| m.instance_id)
            .ok()
            .map(|i| &self.instances[i])
    }

    pub fn pixel_count(&self, instance_id: u32) -> usize {
        self.meta(instance_id).map_or(0, |m| m.pixel_count)
    }

    /// Instance ID at integer pixel `(col, row)`; 0 for background.
    pub fn id_at(&self, col: u32, row: u32) -> u16 {
        self.instance_map[row as usize * self.width as usize + col as usize]
    }

    /// Pixel lists for every instance, each in row-major order.
    pub fn instance_pixels(&self) -> BTreeMap<u32, Vec<(u32, u32)>> {
        let mut out: BTreeMap<u32, Vec<(u32, u32)>> = self
            .instances
            .iter()
            .map(|m| (m.instance_id, Vec::with_capacity(m.pixel_count)))
            .collect();
        for (idx, &id) in self.instance_map.iter().enumerate() {
            if id != 0 {
                let col = (idx % self.width as usize) as u32;
                let row = (idx / self.width as usize) as u32;
                if let Some(list) = out.get_mut(&u32::from(id)) {
                    list.push((col, row));
                }
            }
        }
        out
    }

    /// Keeps instances for which `keep` returns true and clears the pixels of
    /// the others. Surviving IDs are not renumbered.
    pub fn retain(&self, mut keep: impl FnMut(&InstanceMeta) -> bool) -> Self {
        let instances: Vec<InstanceMeta> =
            self.instances.iter().filter(|m| keep(m)).cloned().collect();
        let instance_map = self
            .instance_map
            .iter()
            .map(|&id| {
                if id != 0
                    && instances
                        .binary_search_by_key(&u32::from(id), |m| m.instance_id)
                        .is_ok()
                {
                    id
                } else {
                    0
                }
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            instance_map,
            instances,
        }
    }

    /// Drops detections scoring below `threshold`.
    pub fn with_score_threshold(&self, threshold: f64) -> Self {
        self.retain(|m| m.score >= threshold)
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.instances
            .iter()
            .map(|m| Detection {
                instance_id: m.instance_id,
                class_id: m.class_id,
                score: m.score,
            })
            .collect()
    }
}

/// Class one-hot encoding followed by the detection score.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeature(pub Vec<f64>);

impl SemanticFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn semantic_feature(meta: &InstanceMeta, num_classes: usize) -> Result<SemanticFeature> {
    let class = meta.class_id as usize;
    if class >= num_classes {
        return Err(Error::InvalidInput(format!(
            "class id {} outside label space of {num_classes} classes",
            meta.class_id
        )));
    }
    let mut e = vec![0.0; num_classes + 1];
    e[class] = 1.0;
    e[num_classes] = meta.score;
    Ok(SemanticFeature(e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualPoint {
    /// Position in the Lidar frame.
    pub position: Point3<f64>,
    /// Time offset relative to the sweep timestamp, shared with real points.
    pub t: f64,
    pub feature: Vec<f64>,
}

/// All virtual points generated from one instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualGroup {
    pub instance_id: u32,
    pub points: Vec<VirtualPoint>,
}

/// Virtual points grouped by source instance. Every feature has length
/// `feature_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualPointSet {
    pub feature_dim: usize,
    pub groups: Vec<VirtualGroup>,
}

impl VirtualPointSet {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            groups: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, instance_id: u32) -> Option<&VirtualGroup> {
        self.groups.iter().find(|g| g.instance_id == instance_id)
    }

    /// Points in canonical (group, sample) order.
    pub fn iter(&self) -> impl Iterator<Item = &VirtualPoint> {
        self.groups.iter().flat_map(|g| g.points.iter())
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.iter().map(|v| v.position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.groups {
            for (i, p) in g.points.iter().enumerate() {
                if p.feature.len() != self.feature_dim {
                    return Err(Error::Format(format!(
                        "instance {} point {i} has feature dimension {}, expected {}",
                        g.instance_id,
                        p.feature.len(),
                        self.feature_dim
                    )));
                }
            }
        }
        Ok(())
    }
}
