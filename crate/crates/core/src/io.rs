//! On-disk formats.
//!
//! * Mask bundle: `frame_%05d.png` 16-bit (or 8-bit) grayscale label images
//!   plus `mapping.json` of the form `{"<label>": {"entity": "...", "class": n}}`.
//! * Depth bundle: per-frame `frame_%05d.png` grayscale (raw value =
//!   intensity) or `frame_%05d.f32`, a little-endian float map with a
//!   12-byte header: magic `ORDP`, width `u32`, height `u32`.
//! * Frame directories: `frame_%05d.png` 8-bit RGB.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};

use crate::abstraction::{DepthBundle, DepthMap, InstanceInfo, LabelImage, MaskBundle};
use crate::error::{Error, Result};
use crate::scene::{Resolution, SceneSequence};

pub const DEPTH_MAGIC: &[u8; 4] = b"ORDP";

pub fn frame_name(t: usize, ext: &str) -> String {
    format!("frame_{t:05}.{ext}")
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_owned(), source }
}

/// Sorted `frame_*` files in a directory with the given extensions.
pub fn list_frames(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if name.starts_with("frame_") && exts.contains(&ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SceneSequence::from_json(&text)
}

pub fn write_scene(path: &Path, seq: &SceneSequence) -> Result<()> {
    write_atomic(path, seq.to_json()?.as_bytes())
}

pub fn load_label_image(path: &Path) -> Result<LabelImage> {
    let img = image::open(path).map_err(image_err(path))?.into_luma16();
    let res = Resolution::new(img.width(), img.height());
    LabelImage::new(res, img.into_raw())
}

pub fn save_label_image(path: &Path, labels: &LabelImage) -> Result<()> {
    let r = labels.resolution;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(r.width, r.height, labels.labels.clone())
            .expect("label buffer length checked at construction");
    img.save(path).map_err(image_err(path))
}

pub fn load_mask_bundle(dir: &Path) -> Result<MaskBundle> {
    let raw: BTreeMap<String, InstanceInfo> = read_json(&dir.join("mapping.json"))?;
    let mut mapping = BTreeMap::new();
    for (k, v) in raw {
        let label: u16 = k
            .parse()
            .map_err(|_| Error::input(format!("mapping.json: label `{k}` is not a 16-bit integer")))?;
        if label == 0 {
            return Err(Error::input("mapping.json: label 0 is reserved for background"));
        }
        mapping.insert(label, v);
    }
    let files = list_frames(dir, &["png"])?;
    let mut frames = Vec::with_capacity(files.len());
    for (t, path) in files.iter().enumerate() {
        let img = load_label_image(path).map_err(|e| Error::FrameInput { frame: t, message: e.to_string() })?;
        frames.push(img);
    }
    let resolution = frames.first().map(|f| f.resolution).unwrap_or_default();
    let bundle = MaskBundle { resolution, frames, mapping };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_mask_bundle(dir: &Path, bundle: &MaskBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mapping: BTreeMap<String, &InstanceInfo> =
        bundle.mapping.iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_json(&dir.join("mapping.json"), &mapping)?;
    for (t, f) in bundle.frames.iter().enumerate() {
        save_label_image(&dir.join(frame_name(t, "png")), f)?;
    }
    Ok(())
}

pub fn load_depth_map(path: &Path) -> Result<DepthMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_f32_depth(&bytes).map_err(|e| Error::input(format!("{}: {e}", path.display())))
        }
        _ => {
            let img = image::open(path).map_err(image_err(path))?.into_luma16();
            let res = Resolution::new(img.width(), img.height());
            DepthMap::new(res, img.into_raw().into_iter().map(f64::from).collect())
        }
    }
}

pub fn encode_f32_depth(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&map.resolution.width.to_le_bytes());
    out.extend_from_slice(&map.resolution.height.to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32_depth(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::input("not an ORDP depth file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let res = Resolution::new(word(4), word(8));
    let body = &bytes[12..];
    if body.len() != 4 * res.pixel_count() {
        return Err(Error::input(format!(
            "depth payload is {} bytes, {} expected for {res}",
            body.len(),
            4 * res.pixel_count()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    DepthMap::new(res, values)
}

pub fn load_depth_bundle(dir: &Path) -> Result<DepthBundle> {
    let files = list_frames(dir, &["png", "f32"])?;
    let mut frames = Vec::with_capacity(files.len());
    for (t, path) in files.iter().enumerate() {
        frames.push(load_depth_map(path).map_err(|e| Error::FrameInput { frame: t, message: e.to_string() })?);
    }
    Ok(DepthBundle { frames })
}

pub fn save_depth_bundle_f32(dir: &Path, bundle: &DepthBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in bundle.frames.iter().enumerate() {
        let path = dir.join(frame_name(t, "f32"));
        fs::write(&path, encode_f32_depth(f)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(image_err(path))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(image_err(path))?.into_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(image_err(Path::new("<memory>")))?;
    Ok(buf.into_inner())
}

/// Writes `frame_%05d.png` for every image, creating the directory.
pub fn write_frames(dir: &Path, frames: &[RgbImage]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(t, img)| {
            let path = dir.join(frame_name(t, "png"));
            write_png(&path, img)?;
            Ok(path)
        })
        .collect()
}

pub fn read_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    list_frames(dir, &["png"])?.iter().map(|p| read_png(p)).collect()
}
