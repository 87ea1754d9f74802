//! Rasterizes scene frames into conditioning images.
//!
//! Ellipses are filled without anti-aliasing by testing each pixel center
//! against the implicit ellipse equation, and painted farthest first so that
//! nearer entities overwrite farther ones. Red and green carry the class
//! color, blue carries `round(255 · depth)` (ties to even) in
//! [`RenderMode::EllipseDepth`] and zero otherwise.

use std::collections::VecDeque;
use std::str::FromStr;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{fit_ellipse, FitOptions, MaskBundle, PixelSet};
use crate::error::{Error, Result};
use crate::scene::{
    depth_order_indices, ClassPalette, EllipsoidNode, Resolution, SceneFrame, SceneSequence,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Class color plus depth-shaded blue channel.
    #[default]
    EllipseDepth,
    /// Class color only.
    EllipseFlat,
    /// Original segmentation masks colored by class.
    SegmaskPassthrough,
}

impl RenderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RenderMode::EllipseDepth => "ellipse_depth",
            RenderMode::EllipseFlat => "ellipse_flat",
            RenderMode::SegmaskPassthrough => "segmask_passthrough",
        }
    }
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse_depth" => Ok(RenderMode::EllipseDepth),
            "ellipse_flat" => Ok(RenderMode::EllipseFlat),
            "segmask_passthrough" => Ok(RenderMode::SegmaskPassthrough),
            other => Err(Error::Config(format!("unknown render mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub resolution: Resolution,
    pub mode: RenderMode,
    pub palette: ClassPalette,
    /// Source masks, required by [`RenderMode::SegmaskPassthrough`].
    pub masks: Option<Arc<MaskBundle>>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: Resolution::default(),
            mode: RenderMode::EllipseDepth,
            palette: ClassPalette::default(),
            masks: None,
        }
    }
}

impl RenderConfig {
    pub fn with_mode(mode: RenderMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.mode == RenderMode::SegmaskPassthrough && self.masks.is_none() {
            return Err(Error::Config(
                "segmask_passthrough mode needs an attached mask bundle".into(),
            ));
        }
        Ok(())
    }
}

/// Blue-channel code for a normalized depth.
pub fn depth_to_blue(depth: f64) -> u8 {
    (255.0 * depth.clamp(0.0, 1.0)).round_ties_even() as u8
}

/// Precomputed implicit test for one node at one resolution.
#[derive(Debug, Clone, Copy)]
pub struct PixelEllipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    sin: f64,
    cos: f64,
    ex: f64,
    ey: f64,
}

impl PixelEllipse {
    pub fn new(node: &EllipsoidNode, res: Resolution) -> Self {
        let (cx, cy) = node.center_px(res);
        let (a, b) = node.semi_axes_px(res);
        let (sin, cos) = libm::sincos(node.theta);
        let (ex, ey) = node.half_extents_px(res);
        Self { cx, cy, a, b, sin, cos, ex, ey }
    }

    /// Implicit test at the center of pixel `(x, y)`.
    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = f64::from(x) + 0.5 - self.cx;
        let dy = f64::from(y) + 0.5 - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    /// Inclusive pixel range that can contain covered pixel centers, clipped
    /// to the image. `None` when the ellipse lies entirely outside.
    pub fn pixel_bounds(&self, res: Resolution) -> Option<(u32, u32, u32, u32)> {
        // one pixel of slack on each side; the implicit test decides
        let lo = |c: f64, e: f64| (c - e - 0.5).floor() - 1.0;
        let hi = |c: f64, e: f64| (c + e - 0.5).ceil() + 1.0;
        let (x0, x1) = (lo(self.cx, self.ex), hi(self.cx, self.ex));
        let (y0, y1) = (lo(self.cy, self.ey), hi(self.cy, self.ey));
        let (w, h) = (f64::from(res.width), f64::from(res.height));
        if x1 < 0.0 || y1 < 0.0 || x0 >= w || y0 >= h {
            return None;
        }
        Some((
            x0.max(0.0) as u32,
            y0.max(0.0) as u32,
            x1.min(w - 1.0) as u32,
            y1.min(h - 1.0) as u32,
        ))
    }

    /// Calls `f(x, y)` for every covered pixel.
    pub fn for_each_pixel(&self, res: Resolution, mut f: impl FnMut(u32, u32)) {
        if let Some((x0, y0, x1, y1)) = self.pixel_bounds(res) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains(x, y) {
                        f(x, y);
                    }
                }
            }
        }
    }
}

/// Which node (index into `frame.nodes`) is visible at each pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerMap {
    pub resolution: Resolution,
    owners: Vec<u32>,
}

impl OwnerMap {
    const NONE: u32 = u32::MAX;

    pub fn get(&self, x: u32, y: u32) -> Option<usize> {
        match self.owners[y as usize * self.resolution.width as usize + x as usize] {
            Self::NONE => None,
            i => Some(i as usize),
        }
    }

    /// Visible pixels of one node.
    pub fn pixels_of(&self, node: usize) -> Vec<(u32, u32)> {
        let w = self.resolution.width as usize;
        self.owners
            .iter()
            .enumerate()
            .filter(|(_, &o)| o as usize == node && o != Self::NONE)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }
}

/// Painter's algorithm over an index buffer.
pub fn rasterize_owners(frame: &SceneFrame, res: Resolution) -> OwnerMap {
    let w = res.width as usize;
    let mut owners = vec![OwnerMap::NONE; res.pixel_count()];
    for idx in depth_order_indices(frame) {
        let e = PixelEllipse::new(&frame.nodes[idx], res);
        e.for_each_pixel(res, |x, y| owners[y as usize * w + x as usize] = idx as u32);
    }
    OwnerMap { resolution: res, owners }
}

pub fn render_frame(frame: &SceneFrame, cfg: &RenderConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let res = cfg.resolution;
    match cfg.mode {
        RenderMode::EllipseDepth | RenderMode::EllipseFlat => {
            let owners = rasterize_owners(frame, res);
            let colors: Vec<Rgb<u8>> = frame
                .nodes
                .iter()
                .map(|n| {
                    let [r, g] = cfg.palette.color(n.class_id);
                    let b = if cfg.mode == RenderMode::EllipseDepth { depth_to_blue(n.depth) } else { 0 };
                    Rgb([r, g, b])
                })
                .collect();
            Ok(RgbImage::from_fn(res.width, res.height, |x, y| match owners.get(x, y) {
                Some(i) => colors[i],
                None => Rgb([0, 0, 0]),
            }))
        }
        RenderMode::SegmaskPassthrough => {
            let masks = cfg.masks.as_ref().expect("validated above");
            let labels = masks.frames.get(frame.frame_index).ok_or_else(|| {
                Error::Config(format!(
                    "mask bundle has no frame {} ({} frames)",
                    frame.frame_index,
                    masks.frames.len()
                ))
            })?;
            let (mw, mh) = (u64::from(masks.resolution.width), u64::from(masks.resolution.height));
            let (w, h) = (u64::from(res.width), u64::from(res.height));
            Ok(RgbImage::from_fn(res.width, res.height, |x, y| {
                // nearest-neighbour resampling when resolutions differ
                let sx = (u64::from(x) * mw / w) as u32;
                let sy = (u64::from(y) * mh / h) as u32;
                match labels.get(sx, sy) {
                    0 => Rgb([0, 0, 0]),
                    l => {
                        let [r, g] = cfg.palette.color(masks.mapping[&l].class);
                        Rgb([r, g, 0])
                    }
                }
            }))
        }
    }
}

/// Renders every frame, in order.
pub fn render_sequence(seq: &SceneSequence, cfg: &RenderConfig) -> Result<Vec<RgbImage>> {
    cfg.validate()?;
    seq.frames.par_iter().map(|f| render_frame(f, cfg)).collect()
}

/// Maximum L∞ distance between an observed (R, G) pair and its palette entry.
pub const DECODE_TOLERANCE: u8 = 18;

/// Recovers approximate nodes from an ellipse-mode render.
///
/// Pixels are grouped into 4-connected components of identical (R, G); each
/// component is matched to the nearest palette class, refit from its moments
/// and given the mean blue value as depth. Components smaller than the
/// fitter's minimum size are dropped. Decoded entities are named `d000`,
/// `d001`, ... in raster order of their first pixel.
pub fn decode_frame(image: &RgbImage, palette: &ClassPalette) -> Result<SceneFrame> {
    let res = Resolution::new(image.width(), image.height());
    let (w, h) = (res.width as usize, res.height as usize);
    let rg = |i: usize| {
        let p = image.as_raw();
        [p[3 * i], p[3 * i + 1]]
    };
    let opts = FitOptions::default();
    let mut seen = vec![false; w * h];
    let mut nodes = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if seen[start] || rg(start) == [0, 0] {
            continue;
        }
        let color = rg(start);
        let (class, dist) = palette.nearest(color);
        if dist > DECODE_TOLERANCE {
            return Err(Error::Decode(format!(
                "color ({}, {}) at pixel ({}, {}) is {dist} from the nearest class",
                color[0],
                color[1],
                start % w,
                start / w
            )));
        }
        let mut pixels = Vec::new();
        let mut blue_sum = 0u64;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            pixels.push((x as u32, y as u32));
            blue_sum += u64::from(image.as_raw()[3 * i + 2]);
            let mut visit = |j: usize| {
                if !seen[j] && rg(j) == color {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        let count = pixels.len();
        let fit = match fit_ellipse(&PixelSet::new(res, pixels), &opts) {
            Ok(fit) => fit,
            Err(Error::DegenerateMask { .. }) => continue,
            Err(e) => return Err(e),
        };
        nodes.push(EllipsoidNode {
            entity_id: format!("d{:03}", nodes.len()),
            class_id: class,
            cx: fit.cx,
            cy: fit.cy,
            semi_a: fit.semi_a,
            semi_b: fit.semi_b,
            theta: fit.theta,
            depth: blue_sum as f64 / count as f64 / 255.0,
        });
    }
    Ok(SceneFrame::new(0, nodes))
}
