//! On-disk project store.
//!
//! Each project is a directory under the store root:
//!
//! ```text
//! <root>/<project_id>/project.json        metadata and revision counter
//! <root>/<project_id>/base_sequence.json  abstraction output, never modified
//! <root>/<project_id>/edits.json          edit log
//! <root>/<project_id>/masks/              copy of the source masks, if any
//! <root>/<project_id>/exports/<eid>/      conditioning bundles
//! ```
//!
//! The canonical sequence is never stored; it is the base sequence with the
//! edit log replayed in order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use orscene::abstraction::{abstract_sequence, AbstractOptions, MaskBundle};
use orscene::conditioning::{apply_trajectory, build_conditioning, ConditioningManifest, Trajectory, MANIFEST_FILE};
use orscene::io;
use orscene::nearmiss::{label_sequence, Label, LabeledFrame, NearMissRule};
use orscene::render::{render_frame, RenderConfig, RenderMode};
use orscene::{Error, Resolution, Result, SceneFrame, SceneSequence};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const META_FILE: &str = "project.json";
const BASE_FILE: &str = "base_sequence.json";
const EDITS_FILE: &str = "edits.json";
const MASKS_DIR: &str = "masks";
const EXPORTS_DIR: &str = "exports";

/// Where a new project's sequence comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProjectSource {
    Bundles {
        masks: PathBuf,
        depth: PathBuf,
        #[serde(default)]
        fps: Option<f64>,
    },
    Scene { scene: SceneSequence },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRefs {
    pub masks: PathBuf,
    pub depth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub project_id: String,
    pub created_ms: u64,
    pub sources: Option<SourceRefs>,
    pub has_masks: bool,
    /// Last revision handed out; bumped by every edit and every truncation.
    pub revision: u64,
    pub base_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub revision: u64,
    pub timestamp_ms: u64,
    #[serde(default)]
    pub author: Option<String>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectView {
    pub project_id: String,
    pub revision: u64,
    pub frame_count: usize,
    pub resolution: Resolution,
    pub fps: f64,
    pub entities: BTreeMap<String, u8>,
    pub content_hash: String,
    pub has_masks: bool,
    pub sources: Option<SourceRefs>,
    pub edits: Vec<EditRecord>,
    pub exports: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RevisionInfo {
    pub revision: u64,
    pub content_hash: String,
    pub edit_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportInfo {
    pub export_id: String,
    pub revision: u64,
    pub content_hash: String,
    /// False when an identical export already existed.
    pub created: bool,
    pub manifest: ConditioningManifest,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub contact: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct NearMissResult {
    pub revision: u64,
    pub rule: NearMissRule,
    pub counts: LabelCounts,
    pub labels: Vec<LabeledFrame>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ExportRequest {
    #[serde(default)]
    pub mode: Option<RenderMode>,
    #[serde(default)]
    pub resolution: Option<Resolution>,
}

pub struct Project {
    dir: PathBuf,
    meta: ProjectMeta,
    base: SceneSequence,
    edits: Vec<EditRecord>,
    canonical: SceneSequence,
    masks: OnceLock<Arc<MaskBundle>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn replay(base: &SceneSequence, edits: &[EditRecord]) -> Result<SceneSequence> {
    let mut seq = base.clone();
    for e in edits {
        seq = apply_trajectory(&seq, &e.trajectory)?;
    }
    Ok(seq)
}

impl Project {
    fn load(dir: &Path) -> Result<Self> {
        let mut meta: ProjectMeta = io::read_json(&dir.join(META_FILE))?;
        let base = io::read_scene(&dir.join(BASE_FILE))?;
        let edits: Vec<EditRecord> = io::read_json(&dir.join(EDITS_FILE))?;
        // project.json may lag edits.json if a write was interrupted
        if let Some(last) = edits.last() {
            meta.revision = meta.revision.max(last.revision);
        }
        let canonical = replay(&base, &edits)?;
        Ok(Self { dir: dir.to_owned(), meta, base, edits, canonical, masks: OnceLock::new() })
    }

    pub fn meta(&self) -> &ProjectMeta {
        &self.meta
    }

    pub fn edits(&self) -> &[EditRecord] {
        &self.edits
    }

    pub fn canonical(&self) -> &SceneSequence {
        &self.canonical
    }

    pub fn content_hash(&self) -> String {
        self.canonical.content_hash()
    }

    fn revision_info(&self) -> RevisionInfo {
        RevisionInfo {
            revision: self.meta.revision,
            content_hash: self.content_hash(),
            edit_count: self.edits.len(),
        }
    }

    fn persist(&self) -> Result<()> {
        io::write_json(&self.dir.join(EDITS_FILE), &self.edits)?;
        io::write_json(&self.dir.join(META_FILE), &self.meta)
    }

    pub fn view(&self) -> Result<ProjectView> {
        let exports_dir = self.dir.join(EXPORTS_DIR);
        let mut exports = Vec::new();
        if exports_dir.is_dir() {
            for entry in fs::read_dir(&exports_dir).map_err(|e| Error::io(&exports_dir, e))? {
                let entry = entry.map_err(|e| Error::io(&exports_dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if !name.starts_with('.') {
                    exports.push(name);
                }
            }
        }
        exports.sort();
        Ok(ProjectView {
            project_id: self.meta.project_id.clone(),
            revision: self.meta.revision,
            frame_count: self.canonical.len(),
            resolution: self.canonical.resolution,
            fps: self.canonical.fps,
            entities: self.canonical.entities(),
            content_hash: self.content_hash(),
            has_masks: self.meta.has_masks,
            sources: self.meta.sources.clone(),
            edits: self.edits.clone(),
            exports,
        })
    }

    pub fn frame(&self, t: usize) -> Result<&SceneFrame> {
        self.canonical
            .frames
            .get(t)
            .ok_or_else(|| Error::NotFound(format!("frame {t} of {}", self.canonical.len())))
    }

    fn load_masks(&self) -> Result<Option<Arc<MaskBundle>>> {
        if !self.meta.has_masks {
            return Ok(None);
        }
        if self.masks.get().is_none() {
            let bundle = io::load_mask_bundle(&self.dir.join(MASKS_DIR))?;
            let _ = self.masks.set(Arc::new(bundle));
        }
        Ok(self.masks.get().cloned())
    }

    fn render_config(&self, mode: RenderMode, resolution: Option<Resolution>) -> Result<RenderConfig> {
        let masks = if mode == RenderMode::SegmaskPassthrough { self.load_masks()? } else { None };
        let cfg = RenderConfig {
            resolution: resolution.unwrap_or(self.canonical.resolution),
            mode,
            masks,
            ..RenderConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render_preview(&self, t: usize, mode: RenderMode) -> Result<Vec<u8>> {
        let cfg = self.render_config(mode, None)?;
        let img = render_frame(self.frame(t)?, &cfg)?;
        io::encode_png(&img)
    }

    pub fn post_edit(&mut self, trajectory: Trajectory, author: Option<String>) -> Result<RevisionInfo> {
        let canonical = apply_trajectory(&self.canonical, &trajectory)?;
        let revision = self.meta.revision + 1;
        self.edits.push(EditRecord { revision, timestamp_ms: now_ms(), author, trajectory });
        self.meta.revision = revision;
        if let Err(e) = self.persist() {
            self.edits.pop();
            self.meta.revision -= 1;
            return Err(e);
        }
        self.canonical = canonical;
        Ok(self.revision_info())
    }

    /// Drops the edit with revision `rev` and every later edit.
    pub fn truncate(&mut self, rev: u64) -> Result<RevisionInfo> {
        let idx = self
            .edits
            .iter()
            .position(|e| e.revision == rev)
            .ok_or_else(|| Error::NotFound(format!("edit revision {rev}")))?;
        let removed = self.edits.split_off(idx);
        self.meta.revision += 1;
        if let Err(e) = self.persist() {
            self.edits.extend(removed);
            self.meta.revision -= 1;
            return Err(e);
        }
        self.canonical = replay(&self.base, &self.edits)?;
        Ok(self.revision_info())
    }

    fn export_id(&self, cfg: &RenderConfig) -> String {
        let mut h = Sha256::new();
        h.update(self.meta.base_hash.as_bytes());
        for e in &self.edits {
            h.update(serde_json::to_vec(&e.trajectory).expect("trajectory serializes"));
        }
        h.update(cfg.mode.as_str().as_bytes());
        h.update(cfg.resolution.width.to_le_bytes());
        h.update(cfg.resolution.height.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    /// Writes a conditioning bundle for the current revision. Repeating an
    /// export with the same edits and settings returns the existing bundle.
    pub fn export(&mut self, req: &ExportRequest) -> Result<ExportInfo> {
        let cfg = self.render_config(req.mode.unwrap_or_default(), req.resolution)?;
        let export_id = self.export_id(&cfg);
        let dir = self.dir.join(EXPORTS_DIR).join(&export_id);
        if dir.join(MANIFEST_FILE).is_file() {
            let manifest: ConditioningManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
            return Ok(ExportInfo {
                export_id,
                revision: self.meta.revision,
                content_hash: manifest.content_hash.clone(),
                created: false,
                manifest,
            });
        }
        let staging = self.dir.join(EXPORTS_DIR).join(format!(".{export_id}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let trajectories: Vec<Trajectory> = self.edits.iter().map(|e| e.trajectory.clone()).collect();
        let bundle = match build_conditioning(&self.base, &trajectories, &cfg, None, &staging) {
            Ok(b) => b,
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(e);
            }
        };
        fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))?;
        tracing::info!(project = %self.meta.project_id, export = %export_id, "exported conditioning bundle");
        Ok(ExportInfo {
            export_id,
            revision: self.meta.revision,
            content_hash: bundle.manifest.content_hash.clone(),
            created: true,
            manifest: bundle.manifest,
        })
    }

    pub fn export_manifest_path(&self, export_id: &str) -> Result<PathBuf> {
        let valid = !export_id.is_empty() && export_id.chars().all(|c| c.is_ascii_hexdigit());
        let path = self.dir.join(EXPORTS_DIR).join(export_id).join(MANIFEST_FILE);
        if !valid || !path.is_file() {
            return Err(Error::NotFound(format!("export {export_id}")));
        }
        Ok(path)
    }

    pub fn nearmiss(&self, rule: NearMissRule) -> Result<NearMissResult> {
        rule.validate()?;
        let labels = label_sequence(&self.canonical, &rule);
        let mut counts = LabelCounts::default();
        for l in &labels {
            match l.label {
                Label::Positive => counts.positive += 1,
                Label::Negative => counts.negative += 1,
                Label::Contact => counts.contact += 1,
            }
        }
        Ok(NearMissResult { revision: self.meta.revision, rule, counts, labels })
    }
}

pub type ProjectHandle = Arc<RwLock<Project>>;

/// Projects under one root directory. Each project has its own lock, so
/// reads run concurrently and writes to one project are serialized.
pub struct ProjectStore {
    root: PathBuf,
    open: Mutex<HashMap<String, ProjectHandle>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, open: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Ingests a source and persists a new project. Nothing is left on disk
    /// if any step fails.
    pub fn create(&self, source: ProjectSource) -> Result<(String, ProjectHandle)> {
        let project_id = uuid::Uuid::new_v4().simple().to_string();
        let (base, masks, sources) = match source {
            ProjectSource::Bundles { masks, depth, fps } => {
                let mask_bundle = io::load_mask_bundle(&masks)?;
                let depth_bundle = io::load_depth_bundle(&depth)?;
                let mut opts = AbstractOptions::default();
                if let Some(fps) = fps {
                    opts.fps = fps;
                }
                let abs = abstract_sequence(&mask_bundle, &depth_bundle, &opts)?;
                (abs.sequence, Some(mask_bundle), Some(SourceRefs { masks, depth }))
            }
            ProjectSource::Scene { scene } => {
                scene.validate()?;
                (scene, None, None)
            }
        };
        if base.is_empty() {
            return Err(Error::input("source has no frames"));
        }
        let meta = ProjectMeta {
            project_id: project_id.clone(),
            created_ms: now_ms(),
            sources,
            has_masks: masks.is_some(),
            revision: 0,
            base_hash: base.content_hash(),
        };
        let staging = self.root.join(format!(".{project_id}.partial"));
        let write = || -> Result<()> {
            fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            io::write_scene(&staging.join(BASE_FILE), &base)?;
            io::write_json(&staging.join(EDITS_FILE), &Vec::<EditRecord>::new())?;
            if let Some(m) = &masks {
                io::save_mask_bundle(&staging.join(MASKS_DIR), m)?;
            }
            io::write_json(&staging.join(META_FILE), &meta)
        };
        if let Err(e) = write() {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        let dir = self.root.join(&project_id);
        fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))?;
        tracing::info!(project = %project_id, frames = base.len(), "created project");

        let project = Project {
            dir,
            meta,
            canonical: base.clone(),
            base,
            edits: Vec::new(),
            masks: OnceLock::new(),
        };
        if let Some(m) = masks {
            let _ = project.masks.set(Arc::new(m));
        }
        let handle = Arc::new(RwLock::new(project));
        self.lock_map().insert(project_id.clone(), handle.clone());
        Ok((project_id, handle))
    }

    fn lock_map(&self) -> std::sync::MutexGuard<'_, HashMap<String, ProjectHandle>> {
        self.open.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns the project, replaying it from disk on first access.
    pub fn get(&self, id: &str) -> Result<ProjectHandle> {
        let not_found = || Error::NotFound(format!("project {id}"));
        if !valid_id(id) {
            return Err(not_found());
        }
        let mut map = self.lock_map();
        if let Some(h) = map.get(id) {
            return Ok(h.clone());
        }
        let dir = self.root.join(id);
        if !dir.join(META_FILE).is_file() {
            return Err(not_found());
        }
        let handle = Arc::new(RwLock::new(Project::load(&dir)?));
        map.insert(id.to_owned(), handle.clone());
        Ok(handle)
    }
}
