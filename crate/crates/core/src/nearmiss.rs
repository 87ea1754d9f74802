//! Geometric near-miss labeling for sterile-field violations and scripted
//! scenario generation for labeled datasets.
//!
//! A frame is positive when some non-sterile subject comes within `threshold`
//! of a protected entity's boundary. Boundary distance is approximated along
//! the line joining the two centroids: centroid distance minus each
//! ellipse's radius in that direction, all in normalized image space. The
//! approximation is exact for circles and negative when the ellipses overlap
//! along the center line.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{apply_trajectory, ApplyMode, Trajectory};
use crate::error::{Error, Result};
use crate::io;
use crate::render::{render_frame, RenderConfig};
use crate::scene::{classes, EllipsoidNode, Resolution, SceneFrame, SceneSequence};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactHandling {
    /// Overlap counts as positive.
    #[default]
    Include,
    /// Overlap gets its own `contact` label.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NearMissRule {
    pub subject_classes: Vec<u8>,
    pub protected_class: u8,
    pub threshold: f64,
    #[serde(default)]
    pub contact: ContactHandling,
}

impl Default for NearMissRule {
    fn default() -> Self {
        Self {
            subject_classes: classes::NON_STERILE_PERSONNEL.to_vec(),
            protected_class: classes::INSTRUMENT_TABLE,
            threshold: 0.05,
            contact: ContactHandling::Include,
        }
    }
}

impl NearMissRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::field("threshold", format!("must be positive, got {}", self.threshold)));
        }
        if self.subject_classes.is_empty() {
            return Err(Error::field("subject_classes", "at least one subject class is required"));
        }
        if self.subject_classes.contains(&self.protected_class) {
            return Err(Error::field(
                "protected_class",
                format!("class {} is also a subject class", self.protected_class),
            ));
        }
        Ok(())
    }

    fn is_subject(&self, n: &EllipsoidNode) -> bool {
        self.subject_classes.contains(&n.class_id)
    }

    fn is_protected(&self, n: &EllipsoidNode) -> bool {
        n.class_id == self.protected_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Contact,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Contact => "contact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub min_distance: f64,
    pub subject_id: String,
    pub protected_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame_index: usize,
    pub label: Label,
    pub evidence: Option<Evidence>,
}

/// Distance from a node's centroid to its boundary along the unit direction
/// `(ux, uy)` of normalized image space.
pub fn directional_radius(n: &EllipsoidNode, res: Resolution, ux: f64, uy: f64) -> f64 {
    let (a, b) = n.semi_axes_px(res);
    let (s, c) = libm::sincos(n.theta);
    // one normalized unit along u, expressed in pixels
    let dx = ux * f64::from(res.width);
    let dy = uy * f64::from(res.height);
    let p = (dx * c + dy * s) / a;
    let q = (-dx * s + dy * c) / b;
    1.0 / p.hypot(q)
}

/// Signed boundary gap between two nodes along their center line.
pub fn ellipse_boundary_distance(a: &EllipsoidNode, b: &EllipsoidNode, res: Resolution) -> f64 {
    let (dx, dy) = (b.cx - a.cx, b.cy - a.cy);
    let d = dx.hypot(dy);
    let (ux, uy) = if d > 0.0 { (dx / d, dy / d) } else { (1.0, 0.0) };
    d - directional_radius(a, res, ux, uy) - directional_radius(b, res, ux, uy)
}

/// Labels one frame from its closest subject/protected pair.
pub fn label_frame(frame: &SceneFrame, rule: &NearMissRule, res: Resolution) -> LabeledFrame {
    let mut best: Option<Evidence> = None;
    for p in frame.nodes.iter().filter(|n| rule.is_protected(n)) {
        for s in frame.nodes.iter().filter(|n| rule.is_subject(n)) {
            let d = ellipse_boundary_distance(s, p, res);
            if best.as_ref().is_none_or(|b| d < b.min_distance) {
                best = Some(Evidence {
                    min_distance: d,
                    subject_id: s.entity_id.clone(),
                    protected_id: p.entity_id.clone(),
                });
            }
        }
    }
    let label = match &best {
        None => Label::Negative,
        Some(e) => label_for_distance(e.min_distance, rule),
    };
    LabeledFrame { frame_index: frame.frame_index, label, evidence: best }
}

/// The label a given minimal boundary distance receives under `rule`.
pub fn label_for_distance(d: f64, rule: &NearMissRule) -> Label {
    if d < 0.0 && rule.contact == ContactHandling::Separate {
        Label::Contact
    } else if d < rule.threshold {
        Label::Positive
    } else {
        Label::Negative
    }
}

pub fn label_sequence(seq: &SceneSequence, rule: &NearMissRule) -> Vec<LabeledFrame> {
    seq.frames.iter().map(|f| label_frame(f, rule, seq.resolution)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Walk straight toward the protected entity and back out.
    ApproachRetreat,
    /// Walk past the protected entity on a straight line.
    PassBy,
    /// Walk along an arc around the protected entity.
    Circulate,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approach_retreat" => Ok(Self::ApproachRetreat),
            "pass_by" => Ok(Self::PassBy),
            "circulate" => Ok(Self::Circulate),
            other => Err(Error::input(format!("unknown scenario kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub frames: usize,
    /// Boundary gap at the point of closest approach, normalized units.
    pub closest_approach: f64,
    /// Subject speed in normalized units per frame.
    pub speed: f64,
    /// Entity to move; the first subject-class node when absent.
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioParams {
    fn validate(&self, kind: ScenarioKind) -> Result<()> {
        let min_frames = if kind == ScenarioKind::ApproachRetreat { 3 } else { 2 };
        if self.frames < min_frames {
            return Err(Error::field("frames", format!("at least {min_frames} frames required")));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::field("speed", format!("must be positive, got {}", self.speed)));
        }
        if !self.closest_approach.is_finite() {
            return Err(Error::field("closest_approach", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub subject: String,
    pub protected: String,
    pub sequence: SceneSequence,
    pub labels: Vec<LabeledFrame>,
}

const MAX_BEARING_TRIES: usize = 64;

/// Scripts the subject's centroid for one scenario and labels every frame.
///
/// The path direction is drawn from `params.seed`; directions whose path
/// would leave the image are redrawn. The moving subject is applied as a
/// replace-mode trajectory on copies of `base`.
pub fn generate_scenario(
    kind: ScenarioKind,
    params: &ScenarioParams,
    base: &SceneFrame,
    resolution: Resolution,
    rule: &NearMissRule,
) -> Result<Scenario> {
    rule.validate()?;
    params.validate(kind)?;
    let protected = base
        .nodes
        .iter()
        .find(|n| rule.is_protected(n))
        .ok_or_else(|| Error::input(format!("base frame has no protected entity (class {})", rule.protected_class)))?;
    let subject = match &params.subject {
        Some(id) => base
            .node(id)
            .ok_or_else(|| Error::MissingEntity { entity: id.clone(), frame: Some(base.frame_index) })?,
        None => base
            .nodes
            .iter()
            .find(|n| rule.is_subject(n))
            .ok_or_else(|| Error::input("base frame has no subject entity"))?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let travel = params.speed * (params.frames - 1) as f64;
    let (pcx, pcy) = (protected.cx, protected.cy);
    let inside = |p: &[f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);

    let mut waypoints = None;
    for _ in 0..MAX_BEARING_TRIES {
        let phi: f64 = rng.random_range(0.0..TAU);
        let (ux, uy) = (phi.cos(), phi.sin());
        let reach = params.closest_approach
            + directional_radius(protected, resolution, ux, uy)
            + directional_radius(subject, resolution, ux, uy);
        let at = |dist: f64, along: f64| [pcx + dist * ux - along * uy, pcy + dist * uy + along * ux];
        let candidate: Vec<[f64; 2]> = match kind {
            ScenarioKind::ApproachRetreat => {
                let far = at(reach + travel / 2.0, 0.0);
                vec![far, at(reach, 0.0), far]
            }
            ScenarioKind::PassBy => vec![at(reach, -travel / 2.0), at(reach, travel / 2.0)],
            ScenarioKind::Circulate => {
                if reach <= 0.0 {
                    return Err(Error::field("closest_approach", "orbit radius must be positive"));
                }
                let sweep = travel / reach;
                const STEPS: usize = 64;
                (0..=STEPS)
                    .map(|i| {
                        let a = phi + sweep * i as f64 / STEPS as f64;
                        [pcx + reach * a.cos(), pcy + reach * a.sin()]
                    })
                    .collect()
            }
        };
        if candidate.iter().all(inside) {
            waypoints = Some(candidate);
            break;
        }
    }
    let waypoints = waypoints.ok_or_else(|| {
        Error::input(format!("{kind:?} path does not fit inside the image for any sampled direction"))
    })?;

    let frames = (0..params.frames)
        .map(|t| SceneFrame::new(t, base.nodes.clone()))
        .collect();
    let template = SceneSequence { resolution, fps: 24.0, frames };
    let traj = Trajectory::new(subject.entity_id.clone(), ApplyMode::Replace, waypoints);
    let sequence = apply_trajectory(&template, &traj)?;
    let labels = label_sequence(&sequence, rule);
    Ok(Scenario {
        kind,
        params: params.clone(),
        subject: subject.entity_id.clone(),
        protected: protected.entity_id.clone(),
        sequence,
        labels,
    })
}

/// A stock operating-room layout: operating table with patient, instrument
/// table, sterile staff, an anesthetist and a circulating nurse.
pub fn default_base_frame() -> SceneFrame {
    let n = |id: &str, class: u8, cx: f64, cy: f64, a: f64, b: f64, theta: f64, depth: f64| EllipsoidNode {
        entity_id: id.into(),
        class_id: class,
        cx,
        cy,
        semi_a: a,
        semi_b: b,
        theta,
        depth,
    };
    SceneFrame::new(
        0,
        vec![
            n("circulator", classes::CIRCULATING_NURSE, 0.15, 0.8, 0.035, 0.07, 0.0, 0.7),
            n("operating_table", classes::OPERATING_TABLE, 0.42, 0.5, 0.09, 0.22, 0.0, 0.3),
            n("patient", classes::PATIENT, 0.42, 0.52, 0.05, 0.17, 0.0, 0.35),
            n("instrument_table", classes::INSTRUMENT_TABLE, 0.72, 0.62, 0.07, 0.06, 0.0, 0.45),
            n("head_surgeon", classes::HEAD_SURGEON, 0.3, 0.45, 0.035, 0.07, 0.0, 0.5),
            n("scrub_nurse", classes::SCRUB_NURSE, 0.6, 0.42, 0.035, 0.07, 0.0, 0.55),
            n("anesthetist", classes::ANESTHETIST, 0.42, 0.12, 0.035, 0.07, 1.2, 0.2),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub name: String,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub splits: Vec<SplitRequest>,
    pub frames_per_scenario: usize,
    pub seed: u64,
}

impl DatasetPlan {
    /// Train/val split with the given positive and negative frame counts.
    pub fn train_val(train: (usize, usize), val: (usize, usize), seed: u64) -> Self {
        Self {
            splits: vec![
                SplitRequest { name: "train".into(), positives: train.0, negatives: train.1 },
                SplitRequest { name: "val".into(), positives: val.0, negatives: val.1 },
            ],
            frames_per_scenario: 25,
            seed,
        }
    }
}

/// One scripted sequence with labels for the frames selected for export.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub name: String,
    pub sequence: SceneSequence,
    pub labels: Vec<LabeledFrame>,
    pub split: Option<String>,
}

const MAX_SCENARIOS_PER_SPLIT: usize = 100_000;

/// Composes scenarios until every split holds exactly the requested number
/// of positive and negative frames. Scenarios never span two splits.
pub fn generate_dataset(
    plan: &DatasetPlan,
    base: &SceneFrame,
    resolution: Resolution,
    rule: &NearMissRule,
) -> Result<Vec<LabeledSequence>> {
    rule.validate()?;
    if plan.frames_per_scenario < 3 {
        return Err(Error::field("frames_per_scenario", "at least 3 frames required"));
    }
    if !base.nodes.iter().any(|n| rule.is_protected(n)) || !base.nodes.iter().any(|n| rule.is_subject(n)) {
        return Err(Error::input("base frame needs a protected entity and a subject"));
    }
    let tau = rule.threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::new();
    for split in &plan.splits {
        let (mut need_pos, mut need_neg) = (split.positives, split.negatives);
        let mut attempts = 0;
        while need_pos > 0 || need_neg > 0 {
            attempts += 1;
            if attempts > MAX_SCENARIOS_PER_SPLIT {
                return Err(Error::input(format!(
                    "split `{}`: could not reach requested counts",
                    split.name
                )));
            }
            let half = (plan.frames_per_scenario.max(3) - 1) as f64 / 2.0;
            let (kind, closest, travel) = match (need_pos > 0, need_neg > 0) {
                (true, true) => (
                    ScenarioKind::ApproachRetreat,
                    tau * rng.random_range(0.1..0.8),
                    tau * rng.random_range(4.0..8.0),
                ),
                (true, false) => (
                    ScenarioKind::Circulate,
                    tau * rng.random_range(0.2..0.6),
                    tau * rng.random_range(2.0..6.0),
                ),
                _ => (
                    ScenarioKind::PassBy,
                    tau * rng.random_range(1.5..3.0),
                    tau * rng.random_range(2.0..6.0),
                ),
            };
            let params = ScenarioParams {
                frames: plan.frames_per_scenario,
                closest_approach: closest,
                speed: travel / (2.0 * half),
                subject: None,
                seed: rng.random(),
            };
            let scenario = match generate_scenario(kind, &params, base, resolution, rule) {
                Ok(s) => s,
                // a draw that does not fit in the frame is simply redrawn
                Err(Error::Input(_)) => continue,
                Err(e) => return Err(e),
            };
            let mut selected = Vec::new();
            for l in &scenario.labels {
                match l.label {
                    Label::Positive if need_pos > 0 => {
                        need_pos -= 1;
                        selected.push(l.clone());
                    }
                    Label::Negative if need_neg > 0 => {
                        need_neg -= 1;
                        selected.push(l.clone());
                    }
                    _ => {}
                }
            }
            if selected.is_empty() {
                continue;
            }
            out.push(LabeledSequence {
                name: format!("{}_{:04}", split.name, out.len()),
                sequence: scenario.sequence,
                labels: selected,
                split: Some(split.name.clone()),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitPolicy {
    /// Pool every frame and split by ratio after a seeded shuffle.
    Ratios { ratios: Vec<(String, f64)>, seed: u64 },
    /// Use each sequence's own `split` name.
    PerSequence,
}

/// Seeded assignment of `n` items to splits with exact largest-remainder
/// counts. Returns the split index for each item.
pub fn assign_splits(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::field("ratios", "need at least one non-negative ratio"));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        return Err(Error::field("ratios", "ratios sum to zero"));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())).then(i.cmp(&j)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut out = vec![0; n];
    let mut k = 0;
    for (split, &c) in counts.iter().enumerate() {
        for &item in &perm[k..k + c] {
            out[item] = split;
        }
        k += c;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub positive: usize,
    pub negative: usize,
    pub contact: usize,
    pub total: usize,
}

impl SplitCounts {
    fn add(&mut self, label: Label) {
        match label {
            Label::Positive => self.positive += 1,
            Label::Negative => self.negative += 1,
            Label::Contact => self.contact += 1,
        }
        self.total += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub counts: BTreeMap<String, SplitCounts>,
    pub total: SplitCounts,
    pub threshold: f64,
    pub rule: NearMissRule,
    pub render_mode: String,
    pub resolution: Resolution,
    pub sequences: usize,
}

pub const LABELS_FILE: &str = "labels.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes rendered frames, `labels.csv`, one `<split>.txt` per split and
/// `summary.json` into `out_dir`.
pub fn export_dataset(
    out_dir: &Path,
    sequences: &[LabeledSequence],
    policy: &SplitPolicy,
    cfg: &RenderConfig,
    rule: &NearMissRule,
) -> Result<DatasetSummary> {
    struct Item<'a> {
        seq: &'a LabeledSequence,
        label: &'a LabeledFrame,
        split: String,
    }
    let mut items: Vec<Item> = sequences
        .iter()
        .flat_map(|s| s.labels.iter().map(move |l| (s, l)))
        .map(|(seq, label)| Item { seq, label, split: String::new() })
        .collect();
    if items.is_empty() {
        return Err(Error::input("no labeled frames to export"));
    }
    match policy {
        SplitPolicy::Ratios { ratios, seed } => {
            let weights: Vec<f64> = ratios.iter().map(|(_, r)| *r).collect();
            let assignment = assign_splits(items.len(), &weights, *seed)?;
            for (item, s) in items.iter_mut().zip(assignment) {
                item.split = ratios[s].0.clone();
            }
        }
        SplitPolicy::PerSequence => {
            for item in &mut items {
                item.split = item
                    .seq
                    .split
                    .clone()
                    .ok_or_else(|| Error::input(format!("sequence `{}` has no split", item.seq.name)))?;
            }
        }
    }

    let rel_path = |item: &Item| {
        format!("frames/{}/{}_{:05}.png", item.split, item.seq.name, item.label.frame_index)
    };
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in &items {
        splits.entry(item.split.clone()).or_default().push(rel_path(item));
    }
    for split in splits.keys() {
        let d = out_dir.join("frames").join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    items.par_iter().try_for_each(|item| -> Result<()> {
        let frame = item
            .seq
            .sequence
            .frames
            .get(item.label.frame_index)
            .ok_or_else(|| Error::input(format!("`{}` has no frame {}", item.seq.name, item.label.frame_index)))?;
        let img = render_frame(frame, cfg)?;
        io::write_png(&out_dir.join(rel_path(item)), &img)
    })?;

    let labels_path = out_dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&labels_path)
        .map_err(|e| Error::io(&labels_path, std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::io(out_dir.join(LABELS_FILE), std::io::Error::other(e));
    w.write_record(["frame_path", "label", "min_distance", "subject_id", "protected_id"])
        .map_err(csv_err)?;
    let mut counts: BTreeMap<String, SplitCounts> = BTreeMap::new();
    let mut total = SplitCounts::default();
    for item in &items {
        let (d, s, p) = match &item.label.evidence {
            Some(e) => (e.min_distance.to_string(), e.subject_id.as_str(), e.protected_id.as_str()),
            None => (String::new(), "", ""),
        };
        w.write_record([rel_path(item).as_str(), item.label.label.as_str(), &d, s, p])
            .map_err(csv_err)?;
        counts.entry(item.split.clone()).or_default().add(item.label.label);
        total.add(item.label.label);
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;

    for (split, paths) in &splits {
        let mut text = paths.join("\n");
        text.push('\n');
        let p = out_dir.join(format!("{split}.txt"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }

    let summary = DatasetSummary {
        counts,
        total,
        threshold: rule.threshold,
        rule: rule.clone(),
        render_mode: cfg.mode.as_str().into(),
        resolution: cfg.resolution,
        sequences: sequences.len(),
    };
    io::write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
