//! Turns per-frame instance label images and depth maps into a
//! [`SceneSequence`] of ellipse nodes.
//!
//! Each instance is summarized by the first and second moments of its pixel
//! coordinates. The covariance eigenvectors give the orientation and the
//! semi-axes are `scale_k · sqrt(eigenvalue)`; for a uniformly filled ellipse
//! the variance along a principal axis is `(semi_axis / 2)²`, so `scale_k = 2`
//! recovers the true axes. Depth is the mean of the raw depth map over the
//! instance, min-max normalized over the whole sequence.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{fold_angle, EllipsoidNode, Resolution, SceneFrame, SceneSequence};

/// Pixel coordinates `(x, y)` of one instance at a known image size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    pub resolution: Resolution,
    pub pixels: Vec<(u32, u32)>,
}

impl PixelSet {
    pub fn new(resolution: Resolution, pixels: Vec<(u32, u32)>) -> Self {
        Self { resolution, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub min_pixels: usize,
    pub scale_k: f64,
    /// Relative eigenvalue gap below which the shape counts as circular and
    /// `theta` is pinned to zero.
    pub circular_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { min_pixels: 16, scale_k: 2.0, circular_tolerance: 0.01 }
    }
}

/// Ellipse parameters in the same normalized units as [`EllipsoidNode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub theta: f64,
}

/// Fits an ellipse to a pixel set from its image moments.
///
/// Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. `semi_a` is
/// the major semi-axis (oriented along `theta`) as a fraction of the image
/// width and `semi_b` the minor one as a fraction of the height. Axes shorter
/// than one pixel, as happens for single-row or single-column masks, are
/// clamped to one pixel.
pub fn fit_ellipse(mask: &PixelSet, opts: &FitOptions) -> Result<EllipseFit> {
    let n = mask.pixels.len();
    if n < opts.min_pixels || n == 0 {
        return Err(Error::DegenerateMask { pixels: n, min: opts.min_pixels });
    }
    let inv_n = 1.0 / n as f64;
    let (sx, sy) = mask
        .pixels
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + f64::from(x), sy + f64::from(y)));
    let (mx, my) = (sx * inv_n, sy * inv_n);

    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &mask.pixels {
        let dx = f64::from(x) - mx;
        let dy = f64::from(y) - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx *= inv_n;
    syy *= inv_n;
    sxy *= inv_n;

    let half_trace = 0.5 * (sxx + syy);
    let disc = (0.5 * (sxx - syy)).hypot(sxy);
    let l_major = half_trace + disc;
    let l_minor = (half_trace - disc).max(0.0);

    let circular = l_major <= 0.0 || (l_major - l_minor) < opts.circular_tolerance * l_major;
    let theta = if circular { 0.0 } else { fold_angle(0.5 * (2.0 * sxy).atan2(sxx - syy)) };

    let major_px = (opts.scale_k * l_major.sqrt()).max(1.0);
    let minor_px = (opts.scale_k * l_minor.sqrt()).max(1.0);
    let res = mask.resolution;
    Ok(EllipseFit {
        cx: (mx + 0.5) / f64::from(res.width),
        cy: (my + 0.5) / f64::from(res.height),
        semi_a: major_px / f64::from(res.width),
        semi_b: minor_px / f64::from(res.height),
        theta,
    })
}

/// Raw per-pixel relative depth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub resolution: Resolution,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(resolution: Resolution, values: Vec<f64>) -> Result<Self> {
        if values.len() != resolution.pixel_count() {
            return Err(Error::input(format!(
                "depth map has {} values, {} expected for {resolution}",
                values.len(),
                resolution.pixel_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite depth at pixel {i}")));
        }
        Ok(Self { resolution, values })
    }

    pub fn constant(resolution: Resolution, value: f64) -> Self {
        Self { resolution, values: vec![value; resolution.pixel_count()] }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.resolution.width as usize + x as usize]
    }
}

/// Mean raw depth over the instance pixels.
pub fn instance_depth(mask: &PixelSet, depth: &DepthMap) -> Result<f64> {
    if mask.resolution != depth.resolution {
        return Err(Error::input(format!(
            "mask resolution {} does not match depth resolution {}",
            mask.resolution, depth.resolution
        )));
    }
    if mask.is_empty() {
        return Err(Error::input("empty mask"));
    }
    let sum: f64 = mask.pixels.iter().map(|&(x, y)| depth.get(x, y)).sum();
    Ok(sum / mask.len() as f64)
}

/// Min-max normalization to `[0, 1]`; a constant input maps to `0.5`.
pub fn normalize_depths(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if raw.is_empty() {
        return Vec::new();
    }
    if hi <= lo {
        return vec![0.5; raw.len()];
    }
    let span = hi - lo;
    raw.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Entity identity and class for one label value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub entity: String,
    pub class: u8,
}

/// Per-pixel instance labels for one frame; `0` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub resolution: Resolution,
    pub labels: Vec<u16>,
}

impl LabelImage {
    pub fn new(resolution: Resolution, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != resolution.pixel_count() {
            return Err(Error::input(format!(
                "label image has {} pixels, {} expected for {resolution}",
                labels.len(),
                resolution.pixel_count()
            )));
        }
        Ok(Self { resolution, labels })
    }

    pub fn empty(resolution: Resolution) -> Self {
        Self { resolution, labels: vec![0; resolution.pixel_count()] }
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.labels[y as usize * self.resolution.width as usize + x as usize]
    }

    /// Pixel sets for every nonzero label, in label order.
    pub fn instances(&self) -> BTreeMap<u16, PixelSet> {
        let mut out: BTreeMap<u16, PixelSet> = BTreeMap::new();
        let w = self.resolution.width as usize;
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out.entry(l)
                    .or_insert_with(|| PixelSet::new(self.resolution, Vec::new()))
                    .pixels
                    .push(((i % w) as u32, (i / w) as u32));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskBundle {
    pub resolution: Resolution,
    pub frames: Vec<LabelImage>,
    pub mapping: BTreeMap<u16, InstanceInfo>,
}

impl MaskBundle {
    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        for info in self.mapping.values() {
            if usize::from(info.class) >= crate::scene::NUM_CLASSES {
                return Err(Error::input(format!(
                    "entity `{}` has class {} outside [0, 35]",
                    info.entity, info.class
                )));
            }
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.resolution != self.resolution {
                return Err(Error::FrameInput {
                    frame: t,
                    message: format!("mask resolution {} != {}", f.resolution, self.resolution),
                });
            }
            if let Some(l) = f.labels.iter().find(|l| **l != 0 && !self.mapping.contains_key(l)) {
                return Err(Error::FrameInput {
                    frame: t,
                    message: format!("label {l} has no mapping entry"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBundle {
    pub frames: Vec<DepthMap>,
}

#[derive(Debug, Clone)]
pub struct AbstractOptions {
    pub fit: FitOptions,
    pub fps: f64,
}

impl Default for AbstractOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), fps: 24.0 }
    }
}

/// An instance dropped during abstraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedInstance {
    pub frame: usize,
    pub entity: String,
    pub pixels: usize,
}

#[derive(Debug, Clone)]
pub struct Abstraction {
    pub sequence: SceneSequence,
    pub skipped: Vec<SkippedInstance>,
}

struct RawNode {
    info: InstanceInfo,
    fit: EllipseFit,
    raw_depth: f64,
}

/// Fits every instance of every frame and assembles the sequence.
///
/// Masks smaller than `min_pixels` are skipped and reported in
/// [`Abstraction::skipped`]. Entities that disappear from one frame to the
/// next are recorded in that frame's `exited` list.
pub fn abstract_sequence(
    masks: &MaskBundle,
    depths: &DepthBundle,
    opts: &AbstractOptions,
) -> Result<Abstraction> {
    masks.validate()?;
    if masks.frames.len() != depths.frames.len() {
        return Err(Error::input(format!(
            "mask bundle has {} frames, depth bundle {}",
            masks.frames.len(),
            depths.frames.len()
        )));
    }
    for (t, d) in depths.frames.iter().enumerate() {
        if d.resolution != masks.resolution {
            return Err(Error::FrameInput {
                frame: t,
                message: format!("depth resolution {} != {}", d.resolution, masks.resolution),
            });
        }
    }

    type FrameResult = (Vec<RawNode>, Vec<SkippedInstance>);
    let per_frame: Vec<FrameResult> = masks
        .frames
        .par_iter()
        .zip(depths.frames.par_iter())
        .enumerate()
        .map(|(t, (labels, depth))| -> Result<FrameResult> {
            let mut nodes = Vec::new();
            let mut skipped = Vec::new();
            for (label, pixels) in labels.instances() {
                let info = masks.mapping[&label].clone();
                match fit_ellipse(&pixels, &opts.fit) {
                    Ok(fit) => {
                        let raw_depth = instance_depth(&pixels, depth)?;
                        nodes.push(RawNode { info, fit, raw_depth });
                    }
                    Err(Error::DegenerateMask { pixels, .. }) => {
                        log::warn!("frame {t}: skipping `{}` ({pixels} px)", info.entity);
                        skipped.push(SkippedInstance { frame: t, entity: info.entity, pixels });
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((nodes, skipped))
        })
        .collect::<Result<_>>()?;

    let raw: Vec<f64> = per_frame.iter().flat_map(|(n, _)| n.iter().map(|r| r.raw_depth)).collect();
    let mut norm = normalize_depths(&raw).into_iter();

    let mut frames: Vec<SceneFrame> = Vec::with_capacity(per_frame.len());
    let mut skipped_all = Vec::new();
    for (t, (raw_nodes, skipped)) in per_frame.into_iter().enumerate() {
        skipped_all.extend(skipped);
        let nodes: Vec<EllipsoidNode> = raw_nodes
            .into_iter()
            .map(|r| EllipsoidNode {
                entity_id: r.info.entity,
                class_id: r.info.class,
                cx: r.fit.cx,
                cy: r.fit.cy,
                semi_a: r.fit.semi_a,
                semi_b: r.fit.semi_b,
                theta: r.fit.theta,
                depth: norm.next().expect("one normalized depth per node"),
            })
            .collect();
        let mut frame = SceneFrame::new(t, nodes);
        if let Some(prev) = frames.last() {
            frame.exited = prev
                .nodes
                .iter()
                .filter(|n| frame.node(&n.entity_id).is_none())
                .map(|n| n.entity_id.clone())
                .collect();
        }
        frames.push(frame);
    }

    let sequence = SceneSequence { resolution: masks.resolution, fps: opts.fps, frames };
    sequence.validate()?;
    Ok(Abstraction { sequence, skipped: skipped_all })
}
