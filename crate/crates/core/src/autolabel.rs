//! Rule-based relation labels from 3D boxes and the expression generator
//! built on them.
//!
//! Every directional rule compares the centroid offset `delta = T_target -
//! T_reference` with a per-axis margin `margin_fraction * mean(half-extent of
//! target, half-extent of reference)` measured along that camera axis. The
//! camera frame is y-down, so "above" means a negative y offset.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    self, BBox2D, DatasetIndex, Expression, IndexEntry, PairFile, PairRecord, RelationKind,
    RelationMode, RelationVocabulary, SceneManifest,
};
use crate::geometry::{lift_detection, DenoiseConfig, OrientedBox3D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationRuleConfig {
    pub margin_fraction: f64,
    pub max_pair_distance_m: f64,
    pub support_gap_m: f64,
    pub containment_fraction: f64,
}

impl Default for RelationRuleConfig {
    fn default() -> Self {
        Self {
            margin_fraction: 0.5,
            max_pair_distance_m: 3.0,
            support_gap_m: 0.05,
            containment_fraction: 0.9,
        }
    }
}

impl RelationRuleConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.margin_fraction,
            self.max_pair_distance_m,
            self.support_gap_m,
            self.containment_fraction,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(Error::validation("rules", "all rule parameters must be positive"));
        }
        if self.margin_fraction >= 10.0 {
            return Err(Error::validation("rules.margin_fraction", "must be < 10"));
        }
        Ok(())
    }
}

/// Raw rule outcomes for one ordered pair, before vocabulary filtering.
#[derive(Debug, Clone, Copy)]
struct RuleEval {
    delta: Vector3<f64>,
    margin: Vector3<f64>,
    on: bool,
    inside: bool,
}

fn evaluate_rules(target: &OrientedBox3D, reference: &OrientedBox3D, cfg: &RelationRuleConfig) -> RuleEval {
    let delta = target.t - reference.t;
    let ht = target.camera_half_extents();
    let hr = reference.camera_half_extents();
    let margin = (ht + hr) * (0.5 * cfg.margin_fraction);

    // Support: target sits on the reference's top face (y-down: the target's
    // bottom is at T.y + h.y, the reference's top at T.y - h.y).
    let gap = (reference.t.y - hr.y) - (target.t.y + ht.y);
    let over_footprint = delta.x.abs() <= hr.x && delta.z.abs() <= hr.z;
    let on = delta.y < 0.0 && gap.abs() <= cfg.support_gap_m && over_footprint;

    let inside = containment(target.t, ht, reference.t, hr) >= cfg.containment_fraction;
    RuleEval {
        delta,
        margin,
        on,
        inside,
    }
}

/// Fraction of the target's camera-aligned hull volume inside the reference's.
fn containment(tc: Vector3<f64>, th: Vector3<f64>, rc: Vector3<f64>, rh: Vector3<f64>) -> f64 {
    let mut inter = 1.0;
    let mut vol = 1.0;
    for a in 0..3 {
        let lo = (tc[a] - th[a]).max(rc[a] - rh[a]);
        let hi = (tc[a] + th[a]).min(rc[a] + rh[a]);
        inter *= (hi - lo).max(0.0);
        vol *= 2.0 * th[a];
    }
    if vol > 0.0 {
        inter / vol
    } else {
        let inside = (0..3).all(|a| (tc[a] - rc[a]).abs() <= rh[a]);
        if inside {
            1.0
        } else {
            0.0
        }
    }
}

impl RuleEval {
    fn holds(&self, kind: RelationKind) -> bool {
        let (d, m) = (self.delta, self.margin);
        match kind {
            RelationKind::Left => d.x < -m.x,
            RelationKind::Right => d.x > m.x,
            RelationKind::Above => d.y < -m.y,
            RelationKind::Below => d.y > m.y,
            RelationKind::Behind => d.z > m.z,
            RelationKind::InFrontOf => d.z < -m.z,
            RelationKind::On => self.on,
            RelationKind::In => self.inside,
        }
    }

    /// How far a directional relation clears its margin, as `|delta| / margin`.
    fn exceedance(&self, kind: RelationKind) -> f64 {
        let axis = match kind {
            RelationKind::Left | RelationKind::Right => 0,
            RelationKind::Above | RelationKind::Below => 1,
            RelationKind::Behind | RelationKind::InFrontOf => 2,
            RelationKind::On | RelationKind::In => return f64::INFINITY,
        };
        let m = self.margin[axis];
        if m > 0.0 {
            self.delta[axis].abs() / m
        } else {
            f64::INFINITY
        }
    }
}

/// Vocabulary indices (ascending) of every relation the rules assign to
/// `target` relative to `reference`. Multiclass vocabularies get at most one:
/// "in" beats "on", which beats the directional relation with the largest
/// normalized margin exceedance (ties to the lower index).
pub fn relation_oracle(
    target: &OrientedBox3D,
    reference: &OrientedBox3D,
    cfg: &RelationRuleConfig,
    vocab: &RelationVocabulary,
) -> Vec<usize> {
    let eval = evaluate_rules(target, reference, cfg);
    let hits: Vec<(usize, RelationKind)> = (0..vocab.len())
        .filter_map(|i| vocab.kind(i).map(|k| (i, k)))
        .filter(|&(_, k)| eval.holds(k))
        .collect();
    match vocab.mode {
        RelationMode::Multilabel => hits.into_iter().map(|(i, _)| i).collect(),
        RelationMode::Multiclass => {
            let pick = |kind| hits.iter().find(|(_, k)| *k == kind).map(|(i, _)| *i);
            if let Some(i) = pick(RelationKind::In).or_else(|| pick(RelationKind::On)) {
                return vec![i];
            }
            let mut best: Option<(usize, f64)> = None;
            for &(i, k) in &hits {
                let e = eval.exceedance(k);
                if best.is_none_or(|(_, b)| e > b) {
                    best = Some((i, e));
                }
            }
            best.map(|(i, _)| vec![i]).unwrap_or_default()
        }
    }
}

/// An object instance ready for labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub label: String,
    pub score: f64,
    pub bbox: BBox2D,
    pub box3d: OrientedBox3D,
}

/// One expression per (ordered pair, relation), before deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateExpression {
    pub target: usize,
    pub reference: usize,
    pub relation: usize,
    pub score: f64,
}

/// Ordered pairs within range and their relation sets (non-empty only).
pub fn label_pairs(
    objects: &[LabeledBox],
    cfg: &RelationRuleConfig,
    vocab: &RelationVocabulary,
) -> Vec<(usize, usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for (j, b) in objects.iter().enumerate() {
            if i == j || (a.box3d.t - b.box3d.t).norm() > cfg.max_pair_distance_m {
                continue;
            }
            let rels = relation_oracle(&a.box3d, &b.box3d, cfg, vocab);
            if !rels.is_empty() {
                out.push((i, j, rels));
            }
        }
    }
    out
}

pub fn candidate_expressions(
    objects: &[LabeledBox],
    cfg: &RelationRuleConfig,
    vocab: &RelationVocabulary,
) -> Vec<CandidateExpression> {
    label_pairs(objects, cfg, vocab)
        .into_iter()
        .flat_map(|(i, j, rels)| {
            let score = objects[i].score * objects[j].score;
            rels.into_iter().map(move |r| CandidateExpression {
                target: i,
                reference: j,
                relation: r,
                score,
            })
        })
        .collect()
}

/// Expressions deduplicated on (target label, relation, reference label).
/// The highest-scoring pair supplies the ground-truth boxes (earliest pair on
/// ties); other target instances satisfying the same triplet become
/// alternates.
pub fn generate_expressions(
    objects: &[LabeledBox],
    cfg: &RelationRuleConfig,
    vocab: &RelationVocabulary,
) -> Vec<Expression> {
    let candidates = candidate_expressions(objects, cfg, vocab);
    let mut groups: Vec<((String, usize, String), Vec<&CandidateExpression>)> = Vec::new();
    let mut slot: HashMap<(String, usize, String), usize> = HashMap::new();
    for c in &candidates {
        let key = (objects[c.target].label.clone(), c.relation, objects[c.reference].label.clone());
        let idx = *slot.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[idx].1.push(c);
    }
    groups
        .into_iter()
        .map(|((t, r, f), members)| {
            let best = members
                .iter()
                .copied()
                .reduce(|a, b| if b.score > a.score { b } else { a })
                .expect("non-empty group");
            let primary = objects[best.target].bbox;
            let mut alternates: Vec<BBox2D> = Vec::new();
            for m in &members {
                let b = objects[m.target].bbox;
                if b != primary && !alternates.contains(&b) {
                    alternates.push(b);
                }
            }
            Expression {
                target: t,
                relation: vocab.names[r].clone(),
                reference: f,
                gt_target_bbox: Some(primary),
                gt_reference_bbox: Some(objects[best.reference].bbox),
                gt_target_alternates: alternates,
            }
        })
        .collect()
}

/// Pair records (with the boxes that produced them) for classifier training.
pub fn pair_records(
    objects: &[LabeledBox],
    cfg: &RelationRuleConfig,
    vocab: &RelationVocabulary,
) -> Vec<PairRecord> {
    label_pairs(objects, cfg, vocab)
        .into_iter()
        .map(|(i, j, rels)| PairRecord {
            target_label: objects[i].label.clone(),
            reference_label: objects[j].label.clone(),
            target_bbox: objects[i].bbox,
            reference_bbox: objects[j].bbox,
            target_box3d: Some(objects[i].box3d),
            reference_box3d: Some(objects[j].box3d),
            relations: rels.into_iter().map(|r| vocab.names[r].clone()).collect(),
        })
        .collect()
}

/// Lifts every detection of a scene and keeps the ones with a usable fit.
/// Detections are keyed by their query label; exact duplicates are dropped.
pub fn lift_scene_objects(
    manifest: &SceneManifest,
    depth: &dataio::DepthImage,
    denoise: &DenoiseConfig,
    min_score: f64,
) -> Vec<LabeledBox> {
    let mut out: Vec<LabeledBox> = Vec::new();
    for (key, dets) in &manifest.detections {
        for det in dets.iter().filter(|d| d.score >= min_score) {
            if out.iter().any(|o| &o.label == key && o.bbox == det.bbox) {
                continue;
            }
            let lifted = lift_detection(depth, det.mask.as_ref(), &det.bbox, &manifest.intrinsics, denoise);
            if lifted.degenerate {
                log::debug!("{}: skipping unliftable `{key}` detection", manifest.scene_id);
                continue;
            }
            out.push(LabeledBox {
                label: key.clone(),
                score: det.score,
                bbox: det.bbox,
                box3d: lifted.bbox3d,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub rules: RelationRuleConfig,
    pub denoise: DenoiseConfig,
    /// Detections below this score are not treated as objects.
    pub min_score: f64,
    pub vocabulary: RelationVocabulary,
    pub threads: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            rules: RelationRuleConfig::default(),
            denoise: DenoiseConfig::default(),
            min_score: 0.5,
            vocabulary: RelationVocabulary::six_directional(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub scenes_ok: usize,
    pub scenes_failed: Vec<String>,
    pub n_expressions: usize,
    pub n_pairs: usize,
    pub relation_counts: BTreeMap<String, usize>,
}

struct LabeledScene {
    manifest: SceneManifest,
    pairs: PairFile,
    depth_src: PathBuf,
    rgb_src: PathBuf,
}

fn label_one(path: &Path, opts: &BuildOptions) -> Result<LabeledScene> {
    let mut manifest = dataio::load_manifest(path)?;
    let depth = manifest.load_depth_for(path)?;
    let objects = lift_scene_objects(&manifest, &depth, &opts.denoise, opts.min_score);
    manifest.vocabulary = opts.vocabulary.clone();
    manifest.expressions = generate_expressions(&objects, &opts.rules, &opts.vocabulary);
    let pairs = PairFile {
        scene_id: manifest.scene_id.clone(),
        pairs: pair_records(&objects, &opts.rules, &opts.vocabulary),
    };
    Ok(LabeledScene {
        depth_src: SceneManifest::resolve(path, &manifest.depth_path),
        rgb_src: SceneManifest::resolve(path, &manifest.rgb_path),
        manifest,
        pairs,
    })
}

fn copy_file(src: &Path, dst: &Path) -> Result<()> {
    std::fs::copy(src, dst).map(|_| ()).map_err(|e| Error::io(src, e))
}

/// Runs lift → fit → rules over every scene and writes a self-contained
/// dataset (manifests with generated expressions, depth/RGB copies, pair
/// files, index). Scenes that fail are logged and skipped; the build fails
/// only when no scene succeeds.
pub fn build_dataset(manifests: &[PathBuf], opts: &BuildOptions, out_dir: &Path) -> Result<BuildSummary> {
    opts.rules.validate()?;
    opts.denoise.validate()?;
    opts.vocabulary.validate()?;
    if manifests.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::validation("threads", e.to_string()))?;
    let results: Vec<Result<LabeledScene>> =
        pool.install(|| manifests.par_iter().map(|p| label_one(p, opts)).collect());

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut all_exprs = Vec::new();
    let mut n_pairs = 0;
    for (path, res) in manifests.iter().zip(results) {
        let scene = match res {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failed.push(path.display().to_string());
                continue;
            }
        };
        let id = scene.manifest.scene_id.clone();
        if entries.iter().any(|e: &IndexEntry| e.scene_id == id) {
            log::warn!("skipping {}: duplicate scene id `{id}`", path.display());
            failed.push(path.display().to_string());
            continue;
        }
        let mut manifest = scene.manifest;
        let depth_name = format!("{id}_depth.png");
        copy_file(&scene.depth_src, &out_dir.join(&depth_name))?;
        manifest.depth_path = depth_name;
        if scene.rgb_src.exists() {
            let ext = scene.rgb_src.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let rgb_name = format!("{id}_rgb.{ext}");
            copy_file(&scene.rgb_src, &out_dir.join(&rgb_name))?;
            manifest.rgb_path = rgb_name;
        }
        let manifest_name = format!("{id}.json");
        let pairs_name = format!("{id}.pairs.json");
        dataio::save_manifest(&manifest, &out_dir.join(&manifest_name))?;
        dataio::write_text(&out_dir.join(&pairs_name), &dataio::to_json_string(&scene.pairs))?;
        n_pairs += scene.pairs.pairs.len();
        all_exprs.extend(manifest.expressions);
        entries.push(IndexEntry {
            scene_id: id,
            manifest: manifest_name,
            pairs: Some(pairs_name),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let relation_counts = dataio::relation_counts(&opts.vocabulary, &all_exprs);
    let index = DatasetIndex {
        version: dataio::DATASET_VERSION,
        vocabulary: opts.vocabulary.clone(),
        scenes: entries,
        n_expressions: all_exprs.len(),
        relation_counts: relation_counts.clone(),
    };
    index.save(out_dir)?;
    Ok(BuildSummary {
        scenes_ok: index.scenes.len(),
        scenes_failed: failed,
        n_expressions: all_exprs.len(),
        n_pairs,
        relation_counts,
    })
}
