//! Labeled classifier samples from a dataset directory.
//!
//! Pair files are used when present. Otherwise expressions are grouped by
//! their ground-truth box pair, and boxes are lifted from the best-matching
//! detection (or from the bare box region).

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataio::{BBox2D, DatasetIndex, DepthImage, RelationMode, RelationVocabulary, SceneManifest};
use crate::features::{pair_features, EmbeddingTable, FeatureSchema, PairSide};
use crate::geometry::{iou_2d, lift_detection, DenoiseConfig, OrientedBox3D};
use crate::ranking::relation_index;
use crate::srm::Sample;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocabulary: RelationVocabulary,
    pub samples: Vec<Sample>,
    /// Scene id of every sample, aligned with `samples`.
    pub scene_ids: Vec<String>,
}

/// One labeled pair before featurization.
#[derive(Debug, Clone)]
struct RawPair {
    target_label: String,
    reference_label: String,
    target_bbox: BBox2D,
    reference_bbox: BBox2D,
    target_box3d: Option<OrientedBox3D>,
    reference_box3d: Option<OrientedBox3D>,
    relations: Vec<String>,
}

/// Box for an annotated region: the detection overlapping it best (IoU >=
/// 0.5, using its mask) or the region itself.
fn lift_region(scene: &SceneManifest, depth: &DepthImage, label: &str, bbox: &BBox2D, denoise: &DenoiseConfig) -> OrientedBox3D {
    let matched = scene
        .detections
        .get(label)
        .into_iter()
        .flatten()
        .map(|d| (iou_2d(&d.bbox, bbox), d))
        .filter(|(iou, _)| *iou >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d);
    let mask = matched.and_then(|d| d.mask.as_ref());
    lift_detection(depth, mask, bbox, &scene.intrinsics, denoise).bbox3d
}

fn pairs_from_expressions(scene: &SceneManifest) -> Vec<RawPair> {
    let mut grouped: BTreeMap<(String, String, [u64; 8]), RawPair> = BTreeMap::new();
    for e in &scene.expressions {
        let (Some(t), Some(r)) = (e.gt_target_bbox, e.gt_reference_bbox) else {
            continue;
        };
        let bits = [t.x, t.y, t.w, t.h, r.x, r.y, r.w, r.h].map(f64::to_bits);
        let entry = grouped.entry((e.target.clone(), e.reference.clone(), bits)).or_insert_with(|| RawPair {
            target_label: e.target.clone(),
            reference_label: e.reference.clone(),
            target_bbox: t,
            reference_bbox: r,
            target_box3d: None,
            reference_box3d: None,
            relations: Vec::new(),
        });
        if !entry.relations.contains(&e.relation) {
            entry.relations.push(e.relation.clone());
        }
    }
    grouped.into_values().collect()
}

/// Loads every scene of `dir` as classifier samples for `schema`.
pub fn load_corpus(
    dir: &Path,
    schema: FeatureSchema,
    embeddings: Option<&EmbeddingTable>,
    denoise: &DenoiseConfig,
) -> Result<Corpus> {
    let index = DatasetIndex::load(dir)?;
    let vocab = index.vocabulary.clone();
    let mut samples = Vec::new();
    let mut scene_ids = Vec::new();
    for i in 0..index.scenes.len() {
        let scene = index.load_scene(dir, i)?;
        let raw = match index.load_pairs(dir, i)? {
            Some(file) => file
                .pairs
                .into_iter()
                .map(|p| RawPair {
                    target_label: p.target_label,
                    reference_label: p.reference_label,
                    target_bbox: p.target_bbox,
                    reference_bbox: p.reference_bbox,
                    target_box3d: p.target_box3d,
                    reference_box3d: p.reference_box3d,
                    relations: p.relations,
                })
                .collect(),
            None => pairs_from_expressions(&scene),
        };
        if raw.is_empty() {
            continue;
        }
        let needs_depth = schema.is_3d() && raw.iter().any(|p| p.target_box3d.is_none() || p.reference_box3d.is_none());
        let depth = if needs_depth {
            Some(scene.load_depth_for(&index.manifest_path(dir, i))?)
        } else {
            None
        };
        let k = &scene.intrinsics;
        for p in raw {
            let mut labels: Vec<usize> =
                p.relations.iter().map(|r| relation_index(&vocab, r)).collect::<Result<_>>()?;
            labels.sort_unstable();
            labels.dedup();
            if labels.is_empty() {
                continue;
            }
            if vocab.mode == RelationMode::Multiclass {
                labels.truncate(1);
            }
            let placeholder = OrientedBox3D::axis_aligned(Default::default(), Default::default());
            let resolve = |b: Option<OrientedBox3D>, label: &str, bbox: &BBox2D| match (b, &depth) {
                (Some(b), _) => b,
                (None, Some(d)) => lift_region(&scene, d, label, bbox, denoise),
                (None, None) => placeholder,
            };
            let t3 = resolve(p.target_box3d, &p.target_label, &p.target_bbox);
            let r3 = resolve(p.reference_box3d, &p.reference_label, &p.reference_bbox);
            let x = pair_features(
                schema,
                PairSide { label: &p.target_label, bbox: &p.target_bbox, box3d: &t3 },
                PairSide { label: &p.reference_label, bbox: &p.reference_bbox, box3d: &r3 },
                k.width,
                k.height,
                embeddings,
            )?;
            samples.push(Sample { x, labels });
            scene_ids.push(scene.scene_id.clone());
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Corpus {
        vocabulary: vocab,
        samples,
        scene_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_benchmark, SceneSpec};

    #[test]
    fn pair_files_and_expression_fallback_agree_on_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { seed: 9, noisy_detections: false, ..Default::default() };
        generate_benchmark(10, &spec, 1, dir.path()).unwrap();
        let train = dir.path().join("train");
        let with_pairs = load_corpus(&train, FeatureSchema::Geom2d, None, &DenoiseConfig::default()).unwrap();
        assert!(with_pairs.samples.iter().all(|s| s.x.len() == 8 && !s.labels.is_empty()));

        // Drop the pair files: labels must come back from the expressions.
        let mut index = DatasetIndex::load(&train).unwrap();
        index.scenes.iter_mut().for_each(|e| e.pairs = None);
        index.save(&train).unwrap();
        let from_exprs = load_corpus(&train, FeatureSchema::Geom3d, None, &DenoiseConfig::default()).unwrap();
        assert!(from_exprs.samples.iter().all(|s| s.x.len() == 30));
        assert!(!from_exprs.samples.is_empty());
        assert!(from_exprs.samples.len() <= with_pairs.samples.len());
    }

    #[test]
    fn language_schema_needs_table() {
        let dir = tempfile::tempdir().unwrap();
        generate_benchmark(10, &SceneSpec { seed: 2, ..Default::default() }, 1, dir.path()).unwrap();
        let err = load_corpus(&dir.path().join("train"), FeatureSchema::Geom3dLng, None, &DenoiseConfig::default());
        assert!(err.unwrap_err().is_validation());
    }
}
