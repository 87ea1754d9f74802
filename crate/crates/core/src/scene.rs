//! Scene model: ellipse nodes, frames, sequences and the class palette.
//!
//! Geometry is stored in normalized image coordinates. Centroids live in
//! `[0, 1]²`; `semi_a` is a fraction of the image width and `semi_b` a
//! fraction of the image height, so a node maps to a pixel-space ellipse
//! with semi-axes `(semi_a * W, semi_b * H)` rotated by `theta`. Depth is
//! relative with `1.0` nearest to the camera.
//!
//! Relations between nodes (proximity, layering) are not stored; they are
//! derived on demand by [`pairwise_distance`] and [`depth_order`].

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 36;

/// Image size in pixels. Serialized as `[width, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::input(format!(
                "resolution must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self::new(1024, 768)
    }
}

impl From<[u32; 2]> for Resolution {
    fn from(v: [u32; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Resolution> for [u32; 2] {
    fn from(r: Resolution) -> Self {
        [r.width, r.height]
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// One entity in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidNode {
    #[serde(rename = "id")]
    pub entity_id: String,
    #[serde(rename = "class")]
    pub class_id: u8,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "a")]
    pub semi_a: f64,
    #[serde(rename = "b")]
    pub semi_b: f64,
    pub theta: f64,
    pub depth: f64,
}

impl EllipsoidNode {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::input(format!(
                "node `{}`: {what}",
                self.entity_id
            )))
        };
        if usize::from(self.class_id) >= NUM_CLASSES {
            return bad(&format!("class {} outside [0, {}]", self.class_id, NUM_CLASSES - 1));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return bad(&format!("centroid ({}, {}) outside [0,1]", self.cx, self.cy));
        }
        if !(0.0..=1.0).contains(&self.depth) {
            return bad(&format!("depth {} outside [0,1]", self.depth));
        }
        if !(self.semi_a > 0.0 && self.semi_b > 0.0 && self.semi_a.is_finite() && self.semi_b.is_finite()) {
            return bad(&format!("semi-axes ({}, {}) must be positive", self.semi_a, self.semi_b));
        }
        if !(0.0..PI).contains(&self.theta) {
            return bad(&format!("theta {} outside [0, pi)", self.theta));
        }
        Ok(())
    }

    /// Semi-axes in pixels for the given image size.
    pub fn semi_axes_px(&self, res: Resolution) -> (f64, f64) {
        (self.semi_a * f64::from(res.width), self.semi_b * f64::from(res.height))
    }

    /// Centroid in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub fn center_px(&self, res: Resolution) -> (f64, f64) {
        (self.cx * f64::from(res.width), self.cy * f64::from(res.height))
    }

    /// Tight axis-aligned half extents of the rotated ellipse in pixels.
    pub fn half_extents_px(&self, res: Resolution) -> (f64, f64) {
        let (a, b) = self.semi_axes_px(res);
        let (s, c) = libm::sincos(self.theta);
        let ex = (a * a * c * c + b * b * s * s).sqrt();
        let ey = (a * a * s * s + b * b * c * c).sqrt();
        (ex, ey)
    }
}

/// Folds an angle into `[0, pi)`.
pub fn fold_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs
    if t >= PI {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    #[serde(rename = "index")]
    pub frame_index: usize,
    pub nodes: Vec<EllipsoidNode>,
    /// Entities present in the previous frame that left the scene here.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exited: Vec<String>,
}

impl SceneFrame {
    pub fn new(frame_index: usize, nodes: Vec<EllipsoidNode>) -> Self {
        Self { frame_index, nodes, exited: Vec::new() }
    }

    pub fn node(&self, entity: &str) -> Option<&EllipsoidNode> {
        self.nodes.iter().find(|n| n.entity_id == entity)
    }

    pub fn node_mut(&mut self, entity: &str) -> Option<&mut EllipsoidNode> {
        self.nodes.iter_mut().find(|n| n.entity_id == entity)
    }

    fn require(&self, entity: &str) -> Result<&EllipsoidNode> {
        self.node(entity).ok_or_else(|| Error::MissingEntity {
            entity: entity.to_owned(),
            frame: Some(self.frame_index),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for n in &self.nodes {
            n.validate().map_err(|e| Error::FrameInput {
                frame: self.frame_index,
                message: e.to_string(),
            })?;
            if !seen.insert(n.entity_id.as_str()) {
                return Err(Error::FrameInput {
                    frame: self.frame_index,
                    message: format!("duplicate entity `{}`", n.entity_id),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub resolution: Resolution,
    pub fps: f64,
    pub frames: Vec<SceneFrame>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.frame_index != t {
                return Err(Error::FrameInput {
                    frame: t,
                    message: format!("frame index {} out of order", frame.frame_index),
                });
            }
            frame.validate()?;
        }
        // An entity seen at t and t+2 must be at t+1 or be marked exited there.
        for w in self.frames.windows(3) {
            let (prev, mid, next) = (&w[0], &w[1], &w[2]);
            for n in &prev.nodes {
                let id = n.entity_id.as_str();
                if next.node(id).is_some()
                    && mid.node(id).is_none()
                    && !mid.exited.iter().any(|e| e == id)
                {
                    return Err(Error::FrameInput {
                        frame: mid.frame_index,
                        message: format!("entity `{id}` silently missing"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let seq: SceneSequence = serde_json::from_str(text)?;
        seq.validate()?;
        Ok(seq)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scene sequences always serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Every entity id with the class it was first seen with.
    pub fn entities(&self) -> BTreeMap<String, u8> {
        let mut out = BTreeMap::new();
        for f in &self.frames {
            for n in &f.nodes {
                out.entry(n.entity_id.clone()).or_insert(n.class_id);
            }
        }
        out
    }
}

/// Euclidean distance between two centroids in normalized coordinates.
pub fn pairwise_distance(frame: &SceneFrame, a: &str, b: &str) -> Result<f64> {
    let na = frame.require(a)?;
    let nb = frame.require(b)?;
    Ok((na.cx - nb.cx).hypot(na.cy - nb.cy))
}

/// Entity ids sorted farthest first; ties broken by entity id.
pub fn depth_order(frame: &SceneFrame) -> Vec<String> {
    depth_order_indices(frame)
        .into_iter()
        .map(|i| frame.nodes[i].entity_id.clone())
        .collect()
}

/// Like [`depth_order`] but yields indices into `frame.nodes`.
pub fn depth_order_indices(frame: &SceneFrame) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frame.nodes.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&frame.nodes[i], &frame.nodes[j]);
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    idx
}

const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "patient",
    "operating_table",
    "instrument_table",
    "secondary_table",
    "anesthesia_machine",
    "head_surgeon",
    "assistant_surgeon",
    "circulating_nurse",
    "scrub_nurse",
    "anesthetist",
    "robot",
    "c_arm",
    "monitor",
    "tracking_camera",
    "microscope",
    "drape",
    "instrument",
    "drill",
    "saw",
    "hammer",
    "cementer",
    "suction",
    "surgical_light",
    "iv_pole",
    "trolley",
    "chair",
    "waste_bin",
    "cabinet",
    "door",
    "cable",
    "student",
    "technician",
    "visitor",
    "other_person",
    "other_equipment",
    "unknown",
];

/// Class ids commonly used by the near-miss tooling.
pub mod classes {
    pub const PATIENT: u8 = 0;
    pub const OPERATING_TABLE: u8 = 1;
    pub const INSTRUMENT_TABLE: u8 = 2;
    pub const HEAD_SURGEON: u8 = 5;
    pub const ASSISTANT_SURGEON: u8 = 6;
    pub const CIRCULATING_NURSE: u8 = 7;
    pub const SCRUB_NURSE: u8 = 8;
    pub const ANESTHETIST: u8 = 9;
    pub const STUDENT: u8 = 30;
    pub const TECHNICIAN: u8 = 31;
    pub const VISITOR: u8 = 32;
    pub const OTHER_PERSON: u8 = 33;

    /// Personnel who are not scrubbed in.
    pub const NON_STERILE_PERSONNEL: [u8; 6] =
        [CIRCULATING_NURSE, ANESTHETIST, STUDENT, TECHNICIAN, VISITOR, OTHER_PERSON];
}

/// Maps class ids to the (R, G) pair painted into conditioning images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    colors: Vec<[u8; 2]>,
    names: Vec<String>,
}

impl ClassPalette {
    /// Builds a palette after checking the decodability invariants.
    pub fn new(colors: Vec<[u8; 2]>, names: Vec<String>) -> Result<Self> {
        if colors.len() != NUM_CLASSES || names.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "palette needs {NUM_CLASSES} entries, got {} colors / {} names",
                colors.len(),
                names.len()
            )));
        }
        for (i, c) in colors.iter().enumerate() {
            if *c == [0, 0] {
                return Err(Error::Config(format!("class {i} uses reserved background (0,0)")));
            }
            for (j, d) in colors.iter().enumerate().skip(i + 1) {
                if linf(*c, *d) < 36 {
                    return Err(Error::Config(format!(
                        "classes {i} and {j} closer than 36 in (R,G)"
                    )));
                }
            }
        }
        Ok(Self { colors, names })
    }

    pub fn color(&self, class_id: u8) -> [u8; 2] {
        self.colors[usize::from(class_id)]
    }

    pub fn name(&self, class_id: u8) -> &str {
        &self.names[usize::from(class_id)]
    }

    pub fn class_by_name(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn colors(&self) -> &[[u8; 2]] {
        &self.colors
    }

    /// Nearest class by L∞ distance, with that distance.
    pub fn nearest(&self, rg: [u8; 2]) -> (u8, u8) {
        self.colors
            .iter()
            .enumerate()
            .map(|(k, c)| (k as u8, linf(*c, rg)))
            .min_by_key(|&(k, d)| (d, k))
            .expect("palette is never empty")
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        default_palette()
    }
}

fn linf(a: [u8; 2], b: [u8; 2]) -> u8 {
    a[0].abs_diff(b[0]).max(a[1].abs_diff(b[1]))
}

/// 6×6 grid in (R, G): class `k` maps to `(36·(1 + k/6), 36·(1 + k%6))`.
pub fn default_palette() -> ClassPalette {
    let colors = (0..NUM_CLASSES)
        .map(|k| [(36 * (1 + k / 6)) as u8, (36 * (1 + k % 6)) as u8])
        .collect();
    let names = CLASS_NAMES.iter().map(|s| (*s).to_owned()).collect();
    ClassPalette { colors, names }
}
