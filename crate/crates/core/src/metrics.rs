//! Alignment and reference-quality metrics between conditioning and
//! generated frames: box IoU, mask IoU, SSIM and PSNR.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::io;
use crate::render::{depth_to_blue, rasterize_owners, PixelEllipse, RenderMode};
use crate::scene::{ClassPalette, EllipsoidNode, Resolution, SceneSequence};

/// Axis-aligned box in continuous pixel coordinates, `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::input(format!("malformed box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Tight axis-aligned bounds of a node's full ellipse, clipped to the
    /// image; `None` when nothing of it lies inside.
    pub fn around_ellipse(node: &EllipsoidNode, res: Resolution) -> Option<Self> {
        let (cx, cy) = node.center_px(res);
        let (ex, ey) = node.half_extents_px(res);
        let b = Self {
            x0: (cx - ex).max(0.0),
            y0: (cy - ey).max(0.0),
            x1: (cx + ex).min(f64::from(res.width)),
            y1: (cy + ey).min(f64::from(res.height)),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// Tight box around whole pixels; `None` for an empty set.
    pub fn around_pixels(pixels: impl IntoIterator<Item = (u32, u32)>) -> Option<Self> {
        let mut it = pixels.into_iter();
        let (x, y) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
        for (x, y) in it {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Some(Self {
            x0: f64::from(x0),
            y0: f64::from(y0),
            x1: f64::from(x1) + 1.0,
            y1: f64::from(y1) + 1.0,
        })
    }
}

/// Intersection over union; two zero-area boxes count as identical.
pub fn bb_iou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(1.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// [`bb_iou`] for boxes that may be absent (entity not visible).
pub fn bb_iou_opt(a: Option<&PixelBox>, b: Option<&PixelBox>) -> Result<f64> {
    match (a, b) {
        (None, None) => Ok(1.0),
        (Some(a), Some(b)) => bb_iou(a, b),
        _ => Ok(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub resolution: Resolution,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(resolution: Resolution) -> Self {
        Self { resolution, bits: vec![false; resolution.pixel_count()] }
    }

    pub fn from_bits(resolution: Resolution, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != resolution.pixel_count() {
            return Err(Error::input(format!("mask has {} bits for {resolution}", bits.len())));
        }
        Ok(Self { resolution, bits })
    }

    pub fn from_pixels(resolution: Resolution, pixels: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut m = Self::empty(resolution);
        for (x, y) in pixels {
            m.set(x, y, true);
        }
        m
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.resolution.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.resolution.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.resolution.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    pub fn bounding_box(&self) -> Option<PixelBox> {
        PixelBox::around_pixels(self.pixels())
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks give 1.
pub fn seg_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::input(format!(
            "mask resolutions differ: {} vs {}",
            a.resolution, b.resolution
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Single-channel image with real-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::input(format!("plane has {} samples for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_channel(img: &RgbImage, channel: usize) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| f64::from(p.0[channel])).collect(),
        }
    }
}

/// SSIM settings. The defaults are the canonical Gaussian-window values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 255.0 }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable filtering over every fully contained window position.
fn filter_valid(data: &[f64], width: usize, height: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = width - n + 1;
    let oh = height - n + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, w)| w * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim_with(a: &Plane, b: &Plane, p: &SsimParams) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::input(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < p.window || a.height < p.window {
        return Err(Error::input(format!(
            "image {}x{} smaller than the {}x{} window",
            a.width, a.height, p.window, p.window
        )));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let (w, h) = (a.width, a.height);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let e_aa = filter_valid(&sq(&a.data), w, h, &k);
    let e_bb = filter_valid(&sq(&b.data), w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);

    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM over all window positions with the default parameters.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// SSIM per RGB channel, averaged.
pub fn ssim_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim(&Plane::from_channel(a, c), &Plane::from_channel(b, c))?;
    }
    Ok(sum / 3.0)
}

/// PSNR in dB, or infinite for identical inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (255.0f64 * 255.0 / mse).log10())
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Psnr::Finite(v) => *v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid psnr `{t}`"))),
        }
    }
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::input(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let sum: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.as_raw().len() as f64)
}

/// PSNR over all channels with peak 255.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// Recovers per-entity masks from generated frames by color.
///
/// Each non-black pixel is assigned to the conditioning entity whose render
/// color it carries. When several entities share a color, the nearest one
/// whose ellipse covers the pixel wins, falling back to the closest
/// centroid. This stands in for a video tracker prompted with the
/// conditioning entities and reproduces the visible masks exactly on echoed
/// conditioning frames.
pub fn extract_entity_masks(
    frames: &[RgbImage],
    seq: &SceneSequence,
    palette: &ClassPalette,
    mode: RenderMode,
) -> Result<Vec<BTreeMap<String, BinaryMask>>> {
    if frames.len() != seq.len() {
        return Err(Error::input(format!(
            "{} generated frames for {} scene frames",
            frames.len(),
            seq.len()
        )));
    }
    frames
        .par_iter()
        .zip(seq.frames.par_iter())
        .map(|(img, frame)| {
            let res = Resolution::new(img.width(), img.height());
            let order = crate::scene::depth_order_indices(frame);
            let mut by_color: BTreeMap<[u8; 3], Vec<usize>> = BTreeMap::new();
            // nearest first so the first covering candidate is the visible one
            for &i in order.iter().rev() {
                let n = &frame.nodes[i];
                let [r, g] = palette.color(n.class_id);
                let b = if mode == RenderMode::EllipseDepth { depth_to_blue(n.depth) } else { 0 };
                by_color.entry([r, g, b]).or_default().push(i);
            }
            let shapes: Vec<PixelEllipse> = frame.nodes.iter().map(|n| PixelEllipse::new(n, res)).collect();
            let mut masks: Vec<BinaryMask> = frame.nodes.iter().map(|_| BinaryMask::empty(res)).collect();
            for (x, y, p) in img.enumerate_pixels() {
                let Some(cands) = by_color.get(&p.0) else { continue };
                let owner = if cands.len() == 1 {
                    cands[0]
                } else if let Some(&i) = cands.iter().find(|&&i| shapes[i].contains(x, y)) {
                    i
                } else {
                    *cands
                        .iter()
                        .min_by(|&&i, &&j| {
                            let d = |k: usize| {
                                let (cx, cy) = frame.nodes[k].center_px(res);
                                (f64::from(x) + 0.5 - cx).hypot(f64::from(y) + 0.5 - cy)
                            };
                            d(i).total_cmp(&d(j))
                        })
                        .expect("candidate lists are never empty")
                };
                masks[owner].set(x, y, true);
            }
            Ok(frame
                .nodes
                .iter()
                .zip(masks)
                .map(|(n, m)| (n.entity_id.clone(), m))
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    /// Box IoU between the visible conditioning mask and the generated mask.
    pub bb_iou: f64,
    /// Box IoU between the full ellipse's analytic bounds and the generated mask.
    pub bb_iou_ellipse: f64,
    pub seg_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameComparison {
    pub frame_index: usize,
    pub entities: BTreeMap<String, EntityScores>,
    pub ssim: f64,
    pub psnr: Psnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySummary {
    pub frames: usize,
    pub bb_iou: f64,
    pub bb_iou_ellipse: f64,
    pub seg_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    /// Mean of per-entity means; `None` without entities.
    pub bb_iou_macro: Option<f64>,
    pub seg_iou_macro: Option<f64>,
    /// Mean over every (frame, entity) pair.
    pub bb_iou_micro: Option<f64>,
    pub seg_iou_micro: Option<f64>,
    pub bb_iou_ellipse_macro: Option<f64>,
    pub bb_iou_ellipse_micro: Option<f64>,
    pub ssim: f64,
    /// Mean over frames with finite PSNR; infinite when every frame is.
    pub psnr: Psnr,
    pub psnr_infinite_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub frame_count: usize,
    pub resolution: Resolution,
    pub ssim_params: SsimParams,
    pub frames: Vec<FrameComparison>,
    pub entities: BTreeMap<String, EntitySummary>,
    pub summary: SequenceSummary,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Compares conditioning geometry against generated entity masks, and
/// generated frames against reference frames.
///
/// Conditioning-side masks are the visible pixels of each ellipse after
/// occlusion, at the generated frames' resolution; boxes on both sides are
/// the tight pixel boxes of those masks. The ellipse-bounds score uses the
/// analytic box of the whole ellipse instead, which can never equal a pixel
/// box exactly. Entities missing from the generated masks are scored against
/// an empty mask.
pub fn compare_sequences(
    cond: &SceneSequence,
    generated_masks: &[BTreeMap<String, BinaryMask>],
    generated_frames: &[RgbImage],
    reference_frames: &[RgbImage],
) -> Result<ComparisonReport> {
    let n = cond.len();
    if generated_masks.len() != n || generated_frames.len() != n || reference_frames.len() != n {
        return Err(Error::input(format!(
            "misaligned inputs: {n} scene frames, {} mask frames, {} generated, {} reference",
            generated_masks.len(),
            generated_frames.len(),
            reference_frames.len()
        )));
    }
    let res = generated_frames
        .first()
        .map(|f| Resolution::new(f.width(), f.height()))
        .unwrap_or(cond.resolution);

    let frames: Vec<FrameComparison> = (0..n)
        .into_par_iter()
        .map(|t| -> Result<FrameComparison> {
            let frame = &cond.frames[t];
            let owners = rasterize_owners(frame, res);
            let mut entities = BTreeMap::new();
            for (i, node) in frame.nodes.iter().enumerate() {
                let cond_mask = BinaryMask::from_pixels(res, owners.pixels_of(i));
                let empty;
                let gen_mask = match generated_masks[t].get(&node.entity_id) {
                    Some(m) => m,
                    None => {
                        empty = BinaryMask::empty(res);
                        &empty
                    }
                };
                let bb = bb_iou_opt(cond_mask.bounding_box().as_ref(), gen_mask.bounding_box().as_ref())?;
                let gen_box = gen_mask.bounding_box();
                let bb_ellipse = bb_iou_opt(PixelBox::around_ellipse(node, res).as_ref(), gen_box.as_ref())?;
                let seg = seg_iou(&cond_mask, gen_mask)?;
                entities.insert(
                    node.entity_id.clone(),
                    EntityScores { bb_iou: bb, bb_iou_ellipse: bb_ellipse, seg_iou: seg },
                );
            }
            Ok(FrameComparison {
                frame_index: t,
                entities,
                ssim: ssim_rgb(&generated_frames[t], &reference_frames[t])?,
                psnr: psnr(&generated_frames[t], &reference_frames[t])?,
            })
        })
        .collect::<Result<_>>()?;

    let mut per_entity: BTreeMap<String, Vec<EntityScores>> = BTreeMap::new();
    for f in &frames {
        for (id, s) in &f.entities {
            per_entity.entry(id.clone()).or_default().push(*s);
        }
    }
    let entities: BTreeMap<String, EntitySummary> = per_entity
        .iter()
        .map(|(id, v)| {
            (
                id.clone(),
                EntitySummary {
                    frames: v.len(),
                    bb_iou: mean(v.iter().map(|s| s.bb_iou)).unwrap_or(0.0),
                    bb_iou_ellipse: mean(v.iter().map(|s| s.bb_iou_ellipse)).unwrap_or(0.0),
                    seg_iou: mean(v.iter().map(|s| s.seg_iou)).unwrap_or(0.0),
                },
            )
        })
        .collect();

    let all = || frames.iter().flat_map(|f| f.entities.values());
    let finite: Vec<f64> = frames
        .iter()
        .filter_map(|f| match f.psnr {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        })
        .collect();
    let psnr_infinite_frames = frames.len() - finite.len();
    let summary = SequenceSummary {
        bb_iou_macro: mean(entities.values().map(|e| e.bb_iou)),
        seg_iou_macro: mean(entities.values().map(|e| e.seg_iou)),
        bb_iou_micro: mean(all().map(|s| s.bb_iou)),
        seg_iou_micro: mean(all().map(|s| s.seg_iou)),
        bb_iou_ellipse_macro: mean(entities.values().map(|e| e.bb_iou_ellipse)),
        bb_iou_ellipse_micro: mean(all().map(|s| s.bb_iou_ellipse)),
        ssim: mean(frames.iter().map(|f| f.ssim)).unwrap_or(1.0),
        psnr: mean(finite).map(Psnr::Finite).unwrap_or(Psnr::Infinite),
        psnr_infinite_frames,
    };

    Ok(ComparisonReport {
        frame_count: n,
        resolution: res,
        ssim_params: SsimParams::default(),
        frames,
        entities,
        summary,
    })
}

/// Compares a generated frame directory against a conditioning bundle.
///
/// Generated entity masks come from [`extract_entity_masks`]; reference
/// frames default to the bundle's own conditioning frames.
pub fn compare_bundle(
    bundle: &ConditioningBundle,
    generated_dir: &Path,
    reference_dir: Option<&Path>,
    palette: &ClassPalette,
) -> Result<ComparisonReport> {
    let scene = bundle.scene()?;
    let generated = io::read_frames(generated_dir)?;
    let reference = match reference_dir {
        Some(d) => io::read_frames(d)?,
        None => bundle.read_frames()?,
    };
    let masks = extract_entity_masks(&generated, &scene, palette, bundle.manifest.render_mode)?;
    compare_sequences(&scene, &masks, &generated, &reference)
}

/// One row per (frame, entity): `frame,entity,bb_iou,bb_iou_ellipse,seg_iou,ssim,psnr`.
pub fn write_report_csv(path: &Path, report: &ComparisonReport) -> Result<()> {
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["frame", "entity", "bb_iou", "bb_iou_ellipse", "seg_iou", "ssim", "psnr"])
        .map_err(wrap)?;
    for f in &report.frames {
        let psnr = match f.psnr {
            Psnr::Finite(v) => v.to_string(),
            Psnr::Infinite => "inf".into(),
        };
        for (id, s) in &f.entities {
            w.write_record([
                f.frame_index.to_string(),
                id.clone(),
                s.bb_iou.to_string(),
                s.bb_iou_ellipse.to_string(),
                s.seg_iou.to_string(),
                f.ssim.to_string(),
                psnr.clone(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
