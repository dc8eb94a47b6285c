//! Candidate selection per role and pairwise ranking by
//! `score(target) * score(reference) * P(relation | pair)`.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    BBox2D, DepthImage, Detection2D, Expression, RelationKind, RelationMode, RelationVocabulary, SceneManifest,
};
use crate::features::{pair_features, EmbeddingTable, PairSide};
use crate::geometry::{lift_detection, DenoiseConfig, LiftedBox, OrientedBox3D};
use crate::srm::{forward, MlpParams};
use crate::{Error, Result, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorProfile {
    #[default]
    Detic,
    Gdino,
}

impl std::str::FromStr for DetectorProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "detic" => Ok(DetectorProfile::Detic),
            "gdino" | "groundingdino" => Ok(DetectorProfile::Gdino),
            _ => Err(Error::validation("detector_profile", format!("unknown profile `{s}` (detic, gdino)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    pub k: usize,
    pub profile: DetectorProfile,
    pub detic_score_threshold: f64,
    pub gdino_box_threshold: f64,
    /// Carried for the detector side; box scores are what reach the ranker.
    pub gdino_text_threshold: f64,
    pub degenerate_penalty: f64,
    /// Drop pairs with a failed lift instead of penalizing them.
    pub strict: bool,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            k: 3,
            profile: DetectorProfile::Detic,
            detic_score_threshold: 0.02,
            gdino_box_threshold: 0.15,
            gdino_text_threshold: 0.10,
            degenerate_penalty: 0.5,
            strict: false,
        }
    }
}

impl RankingConfig {
    /// Default `k` for the vocabulary style: 3 for multiclass, 10 for multilabel.
    pub fn for_vocabulary(vocab: &RelationVocabulary) -> Self {
        let k = match vocab.mode {
            RelationMode::Multiclass => 3,
            RelationMode::Multilabel => 10,
        };
        Self { k, ..Self::default() }
    }

    pub fn score_threshold(&self) -> f64 {
        match self.profile {
            DetectorProfile::Detic => self.detic_score_threshold,
            DetectorProfile::Gdino => self.gdino_box_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::validation("ranking.k", "must be >= 1"));
        }
        for (name, v) in [
            ("ranking.detic_score_threshold", self.detic_score_threshold),
            ("ranking.gdino_box_threshold", self.gdino_box_threshold),
            ("ranking.gdino_text_threshold", self.gdino_text_threshold),
            ("ranking.degenerate_penalty", self.degenerate_penalty),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn candidate_order(a: &Detection2D, b: &Detection2D) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Detections at or above the profile threshold, best first, at most `k`.
pub fn select_candidates(detections: &[Detection2D], cfg: &RankingConfig, role: Role) -> Result<Vec<Detection2D>> {
    let threshold = cfg.score_threshold();
    let mut kept: Vec<Detection2D> = detections.iter().filter(|d| d.score >= threshold).cloned().collect();
    if kept.is_empty() {
        return Err(Error::NoCandidates(role));
    }
    kept.sort_by(candidate_order);
    kept.truncate(cfg.k);
    Ok(kept)
}

/// A selected detection with its lifted box (if the model needs one).
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub detection: Detection2D,
    pub lift: Option<LiftedBox>,
}

impl Candidate {
    pub fn new(detection: Detection2D) -> Self {
        Self { detection, lift: None }
    }

    fn degenerate(&self) -> bool {
        self.lift.is_some_and(|l| l.degenerate)
    }

    fn same_instance(&self, other: &Candidate) -> bool {
        self.detection.label == other.detection.label && self.detection.bbox == other.detection.bbox
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub target_index: usize,
    pub reference_index: usize,
    pub target_bbox: BBox2D,
    pub reference_bbox: BBox2D,
    pub target_score: f64,
    pub reference_score: f64,
    pub relation_prob: f64,
    pub penalty: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub target: Detection2D,
    pub reference: Detection2D,
    pub joint_score: f64,
    pub relation_prob: f64,
    pub penalty: f64,
    pub per_pair_table: Option<Vec<PairScore>>,
}

/// Total order on scored pairs; `Less` means `a` ranks ahead of `b`.
pub fn pair_order(a: &PairScore, b: &PairScore) -> Ordering {
    b.joint
        .total_cmp(&a.joint)
        .then(b.target_score.total_cmp(&a.target_score))
        .then(b.reference_score.total_cmp(&a.reference_score))
        .then(a.target_bbox.lex_cmp(&b.target_bbox))
        .then(a.reference_bbox.lex_cmp(&b.reference_bbox))
        .then(a.target_index.cmp(&b.target_index))
        .then(a.reference_index.cmp(&b.reference_index))
}

/// Scores every admissible (target, reference) pair with `relation_prob` and
/// returns the best one. A detection never pairs with itself; pairs with a
/// failed lift are penalized, or dropped in strict mode.
pub fn rank_pairs<F>(
    targets: &[Candidate],
    references: &[Candidate],
    cfg: &RankingConfig,
    mut relation_prob: F,
    explain: bool,
) -> Result<GroundingResult>
where
    F: FnMut(&Candidate, &Candidate) -> Result<f64>,
{
    if targets.is_empty() {
        return Err(Error::NoCandidates(Role::Target));
    }
    if references.is_empty() {
        return Err(Error::NoCandidates(Role::Reference));
    }
    let mut table = Vec::with_capacity(targets.len() * references.len());
    for (i, t) in targets.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            if t.same_instance(r) {
                continue;
            }
            let n_degenerate = t.degenerate() as i32 + r.degenerate() as i32;
            if cfg.strict && n_degenerate > 0 {
                continue;
            }
            let p = relation_prob(t, r)?;
            let penalty = cfg.degenerate_penalty.powi(n_degenerate);
            table.push(PairScore {
                target_index: i,
                reference_index: j,
                target_bbox: t.detection.bbox,
                reference_bbox: r.detection.bbox,
                target_score: t.detection.score,
                reference_score: r.detection.score,
                relation_prob: p,
                penalty,
                joint: t.detection.score * r.detection.score * p * penalty,
            });
        }
    }
    let best = table.iter().min_by(|a, b| pair_order(a, b)).cloned().ok_or(Error::NoValidPairs)?;
    Ok(GroundingResult {
        target: targets[best.target_index].detection.clone(),
        reference: references[best.reference_index].detection.clone(),
        joint_score: best.joint,
        relation_prob: best.relation_prob,
        penalty: best.penalty,
        per_pair_table: explain.then_some(table),
    })
}

/// Index of a relation in the model vocabulary, by exact name or by meaning.
pub fn relation_index(vocab: &RelationVocabulary, name: &str) -> Result<usize> {
    vocab
        .index_of(name)
        .or_else(|| RelationKind::parse(name).and_then(|k| vocab.index_of_kind(k)))
        .ok_or_else(|| {
            Error::validation(
                "expression.relation",
                format!("`{name}` is not in the model vocabulary ({})", vocab.names.join(", ")),
            )
        })
}

/// Memoized lifts for one scene, keyed by label and box.
#[derive(Debug, Default)]
pub struct LiftCache {
    entries: HashMap<(String, [u64; 4]), LiftedBox>,
}

impl LiftCache {
    pub fn get_or_lift(&mut self, det: &Detection2D, scene: &SceneManifest, depth: &DepthImage, cfg: &DenoiseConfig) -> LiftedBox {
        let b = det.bbox;
        let key = (det.label.clone(), [b.x, b.y, b.w, b.h].map(f64::to_bits));
        *self
            .entries
            .entry(key)
            .or_insert_with(|| lift_detection(depth, det.mask.as_ref(), &det.bbox, &scene.intrinsics, cfg))
    }
}

/// Everything needed to ground expressions besides the scene itself.
#[derive(Debug, Clone)]
pub struct Grounder<'a> {
    pub model: &'a MlpParams,
    pub embeddings: Option<&'a EmbeddingTable>,
    pub ranking: RankingConfig,
    pub denoise: DenoiseConfig,
}

fn detections_for<'m>(scene: &'m SceneManifest, label: &str) -> &'m [Detection2D] {
    scene.detections.get(label).map(Vec::as_slice).unwrap_or(&[])
}

impl Grounder<'_> {
    /// select candidates per role → lift → score pairs with the relation model.
    pub fn ground(
        &self,
        scene: &SceneManifest,
        depth: &DepthImage,
        expr: &Expression,
        cache: &mut LiftCache,
        explain: bool,
    ) -> Result<GroundingResult> {
        self.ranking.validate()?;
        let rel = relation_index(&self.model.vocabulary, &expr.relation)?;
        let schema = self.model.schema;
        let mut lift_all = |dets: Vec<Detection2D>| -> Vec<Candidate> {
            dets.into_iter()
                .map(|d| Candidate {
                    lift: schema.is_3d().then(|| cache.get_or_lift(&d, scene, depth, &self.denoise)),
                    detection: d,
                })
                .collect()
        };
        let targets = lift_all(select_candidates(detections_for(scene, &expr.target), &self.ranking, Role::Target)?);
        let references =
            lift_all(select_candidates(detections_for(scene, &expr.reference), &self.ranking, Role::Reference)?);
        let k = &scene.intrinsics;
        // 2D schemas never read the 3D slot.
        let placeholder = OrientedBox3D::axis_aligned(Vector3::zeros(), Vector3::zeros());
        let prob = |t: &Candidate, r: &Candidate| -> Result<f64> {
            let t3 = t.lift.map_or(placeholder, |l| l.bbox3d);
            let r3 = r.lift.map_or(placeholder, |l| l.bbox3d);
            let x = pair_features(
                schema,
                PairSide { label: &expr.target, bbox: &t.detection.bbox, box3d: &t3 },
                PairSide { label: &expr.reference, bbox: &r.detection.bbox, box3d: &r3 },
                k.width,
                k.height,
                self.embeddings,
            )?;
            Ok(forward(self.model, &x)?.probs[rel])
        };
        rank_pairs(&targets, &references, &self.ranking, prob, explain)
    }
}

/// Baseline that ignores the relation: the best-scoring target candidate.
pub fn detector_only(scene: &SceneManifest, expr: &Expression, cfg: &RankingConfig) -> Result<Detection2D> {
    let cands = select_candidates(detections_for(scene, &expr.target), cfg, Role::Target)?;
    Ok(cands.into_iter().next().expect("select_candidates returns at least one"))
}
