//! Conditioning sequences: trajectory edits, rendering into a bundle, and the
//! hand-off to a diffusion backend.
//!
//! Without edits a sequence passes through unchanged (the template pathway).
//! Each edit moves one entity's centroid along a sketched path that is
//! resampled by arc length onto the frames of its span, either as an offset
//! on top of the original motion or as an absolute replacement.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::render::{render_sequence, RenderConfig, RenderMode};
use crate::scene::{Resolution, SceneSequence};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Centroid moves by `path(t) - path(t_start)` on top of its own motion.
    #[default]
    Offset,
    /// Centroid is set to `path(t)`.
    Replace,
}

/// A sketched centroid path for one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "entity")]
    pub target: String,
    #[serde(default)]
    pub mode: ApplyMode,
    /// Inclusive frame range; the whole sequence when absent.
    #[serde(rename = "span", default, skip_serializing_if = "Option::is_none")]
    pub frame_span: Option<(usize, usize)>,
    pub waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(target: impl Into<String>, mode: ApplyMode, waypoints: Vec<[f64; 2]>) -> Self {
        Self { target: target.into(), mode, frame_span: None, waypoints }
    }

    pub fn with_span(mut self, start: usize, end: usize) -> Self {
        self.frame_span = Some((start, end));
        self
    }

    /// Checks the trajectory against a sequence of `n_frames` and returns the
    /// resolved inclusive span.
    pub fn validate(&self, n_frames: usize) -> Result<(usize, usize)> {
        if self.target.is_empty() {
            return Err(Error::field("entity", "must not be empty"));
        }
        if self.waypoints.is_empty() {
            return Err(Error::field("waypoints", "at least one waypoint is required"));
        }
        if let Some(i) = self
            .waypoints
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            let p = self.waypoints[i];
            return Err(Error::field(
                format!("waypoints[{i}]"),
                format!("({}, {}) outside [0,1]²", p[0], p[1]),
            ));
        }
        if n_frames == 0 {
            return Err(Error::field("span", "sequence has no frames"));
        }
        let (t0, t1) = self.frame_span.unwrap_or((0, n_frames - 1));
        if t0 > t1 || t1 >= n_frames {
            return Err(Error::field(
                "span",
                format!("[{t0}, {t1}] is not a valid range for {n_frames} frames"),
            ));
        }
        Ok((t0, t1))
    }
}

/// Resamples the waypoint polyline onto `n_frames` points evenly spaced in
/// arc length. The first and last outputs are the first and last waypoints.
pub fn resample_trajectory(traj: &Trajectory, n_frames: usize) -> Result<Vec<[f64; 2]>> {
    let w = &traj.waypoints;
    if w.is_empty() {
        return Err(Error::field("waypoints", "at least one waypoint is required"));
    }
    if n_frames == 0 {
        return Err(Error::input("cannot resample onto zero frames"));
    }
    let first = w[0];
    let last = w[w.len() - 1];

    let mut cum = Vec::with_capacity(w.len());
    cum.push(0.0);
    for pair in w.windows(2) {
        let seg = (pair[1][0] - pair[0][0]).hypot(pair[1][1] - pair[0][1]);
        cum.push(cum.last().copied().unwrap_or(0.0) + seg);
    }
    let total = cum[cum.len() - 1];
    if n_frames == 1 || total == 0.0 {
        return Ok(vec![first; n_frames]);
    }

    let mut out = Vec::with_capacity(n_frames);
    let mut seg = 0;
    for k in 0..n_frames {
        let s = total * k as f64 / (n_frames - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (p, q) = (w[seg], w[seg + 1]);
        out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
    }
    out[0] = first;
    out[n_frames - 1] = last;
    Ok(out)
}

/// Applies one trajectory to a copy of `seq`. Only the target's centroid in
/// frames of the span changes; results are clamped to `[0, 1]`.
pub fn apply_trajectory(seq: &SceneSequence, traj: &Trajectory) -> Result<SceneSequence> {
    let (t0, t1) = traj.validate(seq.len())?;
    for frame in &seq.frames[t0..=t1] {
        if frame.node(&traj.target).is_none() {
            return Err(Error::MissingEntity { entity: traj.target.clone(), frame: Some(frame.frame_index) });
        }
    }
    let path = resample_trajectory(traj, t1 - t0 + 1)?;
    let origin = path[0];
    let mut out = seq.clone();
    for (frame, p) in out.frames[t0..=t1].iter_mut().zip(&path) {
        let node = frame.node_mut(&traj.target).expect("checked above");
        let (x, y) = match traj.mode {
            ApplyMode::Offset => (node.cx + (p[0] - origin[0]), node.cy + (p[1] - origin[1])),
            ApplyMode::Replace => (p[0], p[1]),
        };
        node.cx = x.clamp(0.0, 1.0);
        node.cy = y.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Template,
    UserEdit,
}

/// An edited and rendered sequence, before it is written anywhere.
#[derive(Debug, Clone)]
pub struct ConditionedSequence {
    pub sequence: SceneSequence,
    pub frames: Vec<RgbImage>,
    pub provenance: BTreeMap<String, Provenance>,
}

/// Applies `edits` in order and renders the result.
pub fn render_conditioning(
    seq: &SceneSequence,
    edits: &[Trajectory],
    cfg: &RenderConfig,
) -> Result<ConditionedSequence> {
    let mut sequence = seq.clone();
    let mut provenance: BTreeMap<String, Provenance> =
        seq.entities().into_keys().map(|id| (id, Provenance::Template)).collect();
    for edit in edits {
        sequence = apply_trajectory(&sequence, edit)?;
        provenance.insert(edit.target.clone(), Provenance::UserEdit);
    }
    let frames = render_sequence(&sequence, cfg)?;
    Ok(ConditionedSequence { sequence, frames, provenance })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_DIR: &str = "frames";
pub const SCENE_FILE: &str = "scene.json";
pub const INITIAL_SCENE_FILE: &str = "initial_scene.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningManifest {
    pub resolution: Resolution,
    pub frame_count: usize,
    pub render_mode: RenderMode,
    /// Frame directory relative to the bundle.
    pub frames: String,
    /// Edited scene sequence relative to the bundle.
    pub scene: String,
    /// Initial scene image relative to the bundle, if one was supplied.
    pub initial_scene: Option<String>,
    pub provenance: BTreeMap<String, Provenance>,
    pub edits: Vec<Trajectory>,
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub dir: PathBuf,
    pub manifest: ConditioningManifest,
}

/// Hash over everything the backend receives: frame pixels, mode,
/// resolution, provenance and the initial scene bytes.
pub fn bundle_hash(
    frames: &[RgbImage],
    mode: RenderMode,
    provenance: &BTreeMap<String, Provenance>,
    initial_scene: Option<&[u8]>,
) -> String {
    let mut h = Sha256::new();
    h.update(b"orscene-bundle-v1\0");
    h.update(mode.as_str().as_bytes());
    h.update((frames.len() as u64).to_le_bytes());
    for f in frames {
        h.update(f.width().to_le_bytes());
        h.update(f.height().to_le_bytes());
        h.update(f.as_raw());
    }
    h.update(serde_json::to_vec(provenance).expect("provenance serializes"));
    match initial_scene {
        Some(bytes) => {
            h.update([1u8]);
            h.update(bytes);
        }
        None => h.update([0u8]),
    }
    hex::encode(h.finalize())
}

/// Applies edits, renders, and writes a bundle directory:
/// `manifest.json`, `scene.json`, `frames/frame_%05d.png` and optionally
/// `initial_scene.png`.
pub fn build_conditioning(
    seq: &SceneSequence,
    edits: &[Trajectory],
    cfg: &RenderConfig,
    initial_scene: Option<&Path>,
    out_dir: &Path,
) -> Result<ConditioningBundle> {
    let cond = render_conditioning(seq, edits, cfg)?;
    write_bundle(&cond, edits, cfg.mode, initial_scene, out_dir)
}

/// Writes an already rendered conditioning sequence as a bundle.
pub fn write_bundle(
    cond: &ConditionedSequence,
    edits: &[Trajectory],
    mode: RenderMode,
    initial_scene: Option<&Path>,
    out_dir: &Path,
) -> Result<ConditioningBundle> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let initial_bytes = match initial_scene {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            fs::write(out_dir.join(INITIAL_SCENE_FILE), &bytes)
                .map_err(|e| Error::io(out_dir.join(INITIAL_SCENE_FILE), e))?;
            Some(bytes)
        }
        None => None,
    };
    io::write_frames(&out_dir.join(FRAMES_DIR), &cond.frames)?;
    io::write_scene(&out_dir.join(SCENE_FILE), &cond.sequence)?;

    let resolution = cond
        .frames
        .first()
        .map(|f| Resolution::new(f.width(), f.height()))
        .unwrap_or(cond.sequence.resolution);
    let manifest = ConditioningManifest {
        resolution,
        frame_count: cond.frames.len(),
        render_mode: mode,
        frames: FRAMES_DIR.into(),
        scene: SCENE_FILE.into(),
        initial_scene: initial_bytes.as_ref().map(|_| INITIAL_SCENE_FILE.to_owned()),
        provenance: cond.provenance.clone(),
        edits: edits.to_vec(),
        content_hash: bundle_hash(&cond.frames, mode, &cond.provenance, initial_bytes.as_deref()),
    };
    io::write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(ConditioningBundle { dir: out_dir.to_owned(), manifest })
}

impl ConditioningBundle {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        Ok(Self { dir: dir.to_owned(), manifest })
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.dir.join(&self.manifest.frames)
    }

    pub fn frame_paths(&self) -> Result<Vec<PathBuf>> {
        io::list_frames(&self.frames_dir(), &["png"])
    }

    pub fn read_frames(&self) -> Result<Vec<RgbImage>> {
        io::read_frames(&self.frames_dir())
    }

    pub fn scene(&self) -> Result<SceneSequence> {
        io::read_scene(&self.dir.join(&self.manifest.scene))
    }

    /// Checks the on-disk frame count and recomputes the content hash.
    pub fn verify(&self) -> Result<()> {
        let frames = self.read_frames()?;
        if frames.len() != self.manifest.frame_count {
            return Err(Error::input(format!(
                "bundle {} lists {} frames, {} on disk",
                self.dir.display(),
                self.manifest.frame_count,
                frames.len()
            )));
        }
        let initial = match &self.manifest.initial_scene {
            Some(rel) => {
                let p = self.dir.join(rel);
                Some(fs::read(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        let hash = bundle_hash(&frames, self.manifest.render_mode, &self.manifest.provenance, initial.as_deref());
        if hash != self.manifest.content_hash {
            return Err(Error::input(format!("bundle {} content hash mismatch", self.dir.display())));
        }
        Ok(())
    }
}

/// What a backend receives: the manifest plus absolute frame paths, and the
/// directory it must fill with `frame_%05d.png` outputs.
#[derive(Debug, Clone, Serialize)]
pub struct BackendRequest {
    pub manifest: ConditioningManifest,
    pub bundle_dir: PathBuf,
    pub frames: Vec<PathBuf>,
    pub initial_scene: Option<PathBuf>,
    pub output_dir: PathBuf,
}

pub trait DiffusionBackend {
    fn name(&self) -> &str;

    /// Produces one RGB frame per conditioning frame in `req.output_dir`.
    fn generate(&self, req: &BackendRequest) -> Result<()>;
}

/// Echoes the conditioning frames verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl DiffusionBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate(&self, req: &BackendRequest) -> Result<()> {
        for (t, src) in req.frames.iter().enumerate() {
            let dst = req.output_dir.join(io::frame_name(t, "png"));
            fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(())
    }
}

/// Runs an external program as `program [args..] request.json`; the program
/// reads the request and writes frames into `output_dir`.
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl DiffusionBackend for CommandBackend {
    fn name(&self) -> &str {
        "command"
    }

    fn generate(&self, req: &BackendRequest) -> Result<()> {
        let request_path = req.output_dir.join("request.json");
        io::write_json(&request_path, req)?;
        let status = std::process::Command::new(&self.program)
            .args(&self.args)
            .arg(&request_path)
            .status()
            .map_err(|e| Error::Backend(format!("cannot start {}: {e}", self.program.display())))?;
        // the request file is not part of the output
        let _ = fs::remove_file(&request_path);
        if !status.success() {
            return Err(Error::Backend(format!("{} exited with {status}", self.program.display())));
        }
        Ok(())
    }
}

/// Sends a bundle to a backend and returns the generated frame directory.
///
/// The backend writes into a staging directory; `out_dir` only appears once
/// the response has the same frame count as the bundle.
pub fn submit_to_backend(
    bundle: &ConditioningBundle,
    backend: &dyn DiffusionBackend,
    out_dir: &Path,
) -> Result<PathBuf> {
    bundle.verify()?;
    let name = out_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::input(format!("invalid output directory {}", out_dir.display())))?;
    let staging = out_dir.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let req = BackendRequest {
        manifest: bundle.manifest.clone(),
        bundle_dir: bundle.dir.clone(),
        frames: bundle.frame_paths()?,
        initial_scene: bundle.manifest.initial_scene.as_ref().map(|p| bundle.dir.join(p)),
        output_dir: staging.clone(),
    };
    let outcome = backend.generate(&req).and_then(|()| {
        let produced = io::list_frames(&staging, &["png"])?.len();
        if produced != bundle.manifest.frame_count {
            return Err(Error::Backend(format!(
                "backend `{}` returned {produced} frames, expected {}",
                backend.name(),
                bundle.manifest.frame_count
            )));
        }
        Ok(())
    });
    if let Err(e) = outcome {
        let _ = fs::remove_dir_all(&staging);
        return Err(match e {
            Error::Backend(_) => e,
            other => Error::Backend(format!("backend `{}` failed: {other}", backend.name())),
        });
    }
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(out_dir.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{EllipsoidNode, SceneFrame};

    fn seq_with(n: usize, path: impl Fn(usize) -> (f64, f64)) -> SceneSequence {
        let frames = (0..n)
            .map(|t| {
                let (x, y) = path(t);
                SceneFrame::new(
                    t,
                    vec![
                        EllipsoidNode {
                            entity_id: "walker".into(),
                            class_id: 7,
                            cx: x,
                            cy: y,
                            semi_a: 0.03,
                            semi_b: 0.05,
                            theta: 0.3,
                            depth: 0.6,
                        },
                        EllipsoidNode {
                            entity_id: "table".into(),
                            class_id: 2,
                            cx: 0.7,
                            cy: 0.4,
                            semi_a: 0.08,
                            semi_b: 0.06,
                            theta: 0.0,
                            depth: 0.4,
                        },
                    ],
                )
            })
            .collect();
        SceneSequence { resolution: Resolution::new(64, 48), fps: 24.0, frames }
    }

    #[test]
    fn resample_linear_midpoint() {
        let t = Trajectory::new("x", ApplyMode::Offset, vec![[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(resample_trajectory(&t, 3).unwrap(), vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn resample_single_waypoint_is_constant() {
        let t = Trajectory::new("x", ApplyMode::Offset, vec![[0.3, 0.7]]);
        let out = resample_trajectory(&t, 97).unwrap();
        assert_eq!(out.len(), 97);
        assert!(out.iter().all(|p| *p == [0.3, 0.7]));
    }

    #[test]
    fn resample_rejects_empty() {
        let t = Trajectory::new("x", ApplyMode::Offset, vec![]);
        assert!(resample_trajectory(&t, 5).is_err());
        let t = Trajectory::new("x", ApplyMode::Offset, vec![[0.1, 0.1]]);
        assert!(resample_trajectory(&t, 0).is_err());
    }

    #[test]
    fn resample_endpoints_exact_with_duplicates() {
        let w = vec![[0.1, 0.2], [0.1, 0.2], [0.4, 0.9], [0.4, 0.9], [0.77, 0.31]];
        let t = Trajectory::new("x", ApplyMode::Offset, w.clone());
        for n in [2, 3, 10, 97] {
            let out = resample_trajectory(&t, n).unwrap();
            assert_eq!(out[0], w[0]);
            assert_eq!(out[n - 1], w[4]);
        }
    }

    #[test]
    fn validate_reports_fields() {
        let t = Trajectory::new("walker", ApplyMode::Offset, vec![[0.1, 1.2]]);
        match t.validate(10).unwrap_err() {
            Error::InvalidField { field, .. } => assert_eq!(field, "waypoints[0]"),
            e => panic!("{e}"),
        }
        let t = Trajectory::new("walker", ApplyMode::Offset, vec![[0.1, 0.2]]).with_span(5, 10);
        assert!(matches!(t.validate(10), Err(Error::InvalidField { .. })));
        let t = Trajectory::new("walker", ApplyMode::Offset, vec![[0.1, 0.2]]).with_span(6, 5);
        assert!(t.validate(10).is_err());
    }

    #[test]
    fn offset_with_constant_waypoint_is_identity() {
        let seq = seq_with(12, |t| (0.1 + 0.05 * t as f64, 0.5));
        let t = Trajectory::new("walker", ApplyMode::Offset, vec![[0.9, 0.1]]);
        assert_eq!(apply_trajectory(&seq, &t).unwrap(), seq);
    }

    #[test]
    fn replace_follows_straight_line() {
        let seq = seq_with(5, |_| (0.5, 0.5));
        let t = Trajectory::new("walker", ApplyMode::Replace, vec![[0.0, 0.25], [1.0, 0.75]]);
        let out = apply_trajectory(&seq, &t).unwrap();
        for (k, f) in out.frames.iter().enumerate() {
            let n = f.node("walker").unwrap();
            let s = k as f64 / 4.0;
            assert_eq!((n.cx, n.cy), (s, 0.25 + 0.5 * s));
            assert_eq!(f.node("table"), seq.frames[k].node("table"));
        }
    }

    #[test]
    fn offset_adds_resampled_displacement() {
        let seq = seq_with(20, |t| (0.2 + 0.01 * t as f64, 0.3 + 0.005 * t as f64));
        let traj = Trajectory::new("walker", ApplyMode::Offset, vec![[0.5, 0.5], [0.6, 0.55], [0.55, 0.7]]);
        let path = resample_trajectory(&traj, 20).unwrap();
        let out = apply_trajectory(&seq, &traj).unwrap();
        for t in 0..20 {
            let a = seq.frames[t].node("walker").unwrap();
            let b = out.frames[t].node("walker").unwrap();
            assert!((b.cx - a.cx - (path[t][0] - path[0][0])).abs() < 1e-12);
            assert!((b.cy - a.cy - (path[t][1] - path[0][1])).abs() < 1e-12);
            assert_eq!((a.semi_a, a.semi_b, a.theta, a.depth, a.class_id), (b.semi_a, b.semi_b, b.theta, b.depth, b.class_id));
        }
    }

    #[test]
    fn span_limits_the_edit_and_clamps() {
        let seq = seq_with(10, |_| (0.9, 0.5));
        let traj = Trajectory::new("walker", ApplyMode::Offset, vec![[0.0, 0.5], [0.5, 0.5]]).with_span(3, 6);
        let out = apply_trajectory(&seq, &traj).unwrap();
        for t in (0..3).chain(7..10) {
            assert_eq!(out.frames[t], seq.frames[t]);
        }
        assert_eq!(out.frames[6].node("walker").unwrap().cx, 1.0);
    }

    #[test]
    fn missing_target_in_span_is_an_error() {
        let mut seq = seq_with(6, |_| (0.5, 0.5));
        seq.frames[4].nodes.retain(|n| n.entity_id != "walker");
        seq.frames[4].exited.push("walker".into());
        let traj = Trajectory::new("walker", ApplyMode::Offset, vec![[0.1, 0.1]]);
        assert!(matches!(apply_trajectory(&seq, &traj), Err(Error::MissingEntity { frame: Some(4), .. })));
        // a span avoiding the gap is fine
        apply_trajectory(&seq, &traj.clone().with_span(0, 3)).unwrap();
    }

    #[test]
    fn closed_loop_offset_returns_to_start() {
        let seq = seq_with(31, |t| (0.3 + 0.002 * t as f64, 0.4));
        let traj = Trajectory::new(
            "walker",
            ApplyMode::Offset,
            vec![[0.5, 0.5], [0.6, 0.5], [0.6, 0.6], [0.5, 0.6], [0.5, 0.5]],
        );
        let out = apply_trajectory(&seq, &traj).unwrap();
        assert_eq!(out.frames[30].node("walker"), seq.frames[30].node("walker"));
    }

    struct ShortBackend;
    impl DiffusionBackend for ShortBackend {
        fn name(&self) -> &str {
            "short"
        }
        fn generate(&self, req: &BackendRequest) -> Result<()> {
            MockBackend.generate(req)?;
            let last = req.output_dir.join(io::frame_name(req.frames.len() - 1, "png"));
            fs::remove_file(&last).map_err(|e| Error::io(&last, e))
        }
    }

    #[test]
    fn bundle_echo_and_fault_injection() {
        let dir = tempfile::tempdir().unwrap();
        let seq = seq_with(4, |t| (0.2 + 0.1 * t as f64, 0.5));
        let cfg = RenderConfig::default().with_resolution(Resolution::new(64, 48));
        let bundle = build_conditioning(&seq, &[], &cfg, None, &dir.path().join("bundle")).unwrap();
        bundle.verify().unwrap();
        assert_eq!(bundle.manifest.frame_count, 4);
        assert!(bundle.manifest.provenance.values().all(|p| *p == Provenance::Template));

        let out = submit_to_backend(&bundle, &MockBackend, &dir.path().join("gen")).unwrap();
        for (a, b) in bundle.frame_paths().unwrap().iter().zip(io::list_frames(&out, &["png"]).unwrap()) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }

        let bad = dir.path().join("bad");
        let err = submit_to_backend(&bundle, &ShortBackend, &bad).unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
        assert!(!bad.exists());
        assert!(!dir.path().join(".bad.partial").exists());
    }

    #[test]
    fn tampered_bundle_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let seq = seq_with(3, |_| (0.5, 0.5));
        let cfg = RenderConfig::default().with_resolution(Resolution::new(64, 48));
        let bundle = build_conditioning(&seq, &[], &cfg, None, dir.path()).unwrap();
        let first = bundle.frame_paths().unwrap()[0].clone();
        io::write_png(&first, &RgbImage::new(64, 48)).unwrap();
        assert!(bundle.verify().is_err());
        fs::remove_file(&first).unwrap();
        assert!(bundle.verify().is_err());
    }
}
