//! Grounding accuracy / IoU and relation-classification metrics, with text
//! and JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{BBox2D, RelationMode, RelationVocabulary};
use crate::geometry::iou_2d;
use crate::srm::RelationDistribution;
use crate::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PROB_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub n: usize,
    pub iou_threshold: f64,
    /// Percentage of samples whose best IoU reaches `iou_threshold`.
    pub accuracy: f64,
    pub mean_iou: f64,
    /// Samples with no prediction (counted as IoU 0).
    pub n_failed: usize,
}

/// Best IoU of `pred` against any acceptable ground truth; 0 without a prediction.
pub fn best_iou(pred: Option<&BBox2D>, gts: &[BBox2D]) -> f64 {
    pred.map_or(0.0, |p| gts.iter().map(|g| iou_2d(p, g)).fold(0.0, f64::max))
}

pub fn eval_grounding(preds: &[Option<BBox2D>], gts: &[Vec<BBox2D>], iou_threshold: f64) -> Result<GroundingMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| best_iou(p.as_ref(), g)).collect();
    let n = ious.len();
    let hits = ious.iter().filter(|&&v| v >= iou_threshold).count();
    Ok(GroundingMetrics {
        n,
        iou_threshold,
        accuracy: 100.0 * hits as f64 / n as f64,
        mean_iou: ious.iter().sum::<f64>() / n as f64,
        n_failed: preds.iter().filter(|p| p.is_none()).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub relation: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples carrying this relation.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub mode: RelationMode,
    pub per_relation: Vec<RelationScores>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Argmax accuracy (multiclass) or exact label-set match (multilabel), in percent.
    pub accuracy: f64,
    /// Percentage of samples whose labels meet the `k` most probable relations.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub topk: BTreeMap<usize, f64>,
}

impl ClassificationMetrics {
    pub fn f1(&self, relation: &str) -> Option<f64> {
        self.per_relation.iter().find(|r| r.relation == relation).map(|r| r.f1)
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Predicted label set: the argmax for multiclass, every relation with
/// probability >= `threshold` for multilabel.
pub fn predicted_labels(dist: &RelationDistribution, threshold: f64) -> Vec<usize> {
    match dist.mode {
        RelationMode::Multiclass => vec![dist.argmax()],
        RelationMode::Multilabel => (0..dist.probs.len()).filter(|&c| dist.probs[c] >= threshold).collect(),
    }
}

pub fn eval_classification(
    preds: &[RelationDistribution],
    labels: &[Vec<usize>],
    vocab: &RelationVocabulary,
    threshold: f64,
    ks: &[usize],
) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptySet);
    }
    let c = vocab.len();
    if let Some(p) = preds.iter().find(|p| p.probs.len() != c) {
        return Err(Error::DimensionMismatch {
            expected: format!("{c} relation probabilities"),
            found: p.probs.len().to_string(),
        });
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    let mut support = vec![0usize; c];
    let mut exact = 0usize;
    let mut topk_hits = vec![0usize; ks.len()];
    for (dist, truth) in preds.iter().zip(labels) {
        let pred = predicted_labels(dist, threshold);
        for k in 0..c {
            match (pred.contains(&k), truth.contains(&k)) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fn_[k] += 1,
                (false, false) => {}
            }
            if truth.contains(&k) {
                support[k] += 1;
            }
        }
        let correct = match vocab.mode {
            RelationMode::Multiclass => truth.contains(&pred[0]),
            RelationMode::Multilabel => {
                let mut t = truth.clone();
                t.sort_unstable();
                t.dedup();
                t == pred
            }
        };
        exact += correct as usize;
        if !ks.is_empty() {
            let ranked = dist.ranked();
            for (hit, &k) in topk_hits.iter_mut().zip(ks) {
                if ranked.iter().take(k).any(|r| truth.contains(r)) {
                    *hit += 1;
                }
            }
        }
    }
    let per_relation: Vec<RelationScores> = (0..c)
        .map(|k| {
            let (precision, recall, f1) = f1_from(tp[k], fp[k], fn_[k]);
            RelationScores {
                relation: vocab.names[k].clone(),
                precision,
                recall,
                f1,
                support: support[k],
            }
        })
        .collect();
    let n = preds.len();
    let (_, _, micro_f1) = f1_from(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_f1 = per_relation.iter().map(|r| r.f1).sum::<f64>() / c as f64;
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Ok(ClassificationMetrics {
        n,
        mode: vocab.mode,
        per_relation,
        micro_f1,
        macro_f1,
        accuracy: pct(exact),
        topk: ks.iter().zip(&topk_hits).map(|(&k, &h)| (k, pct(h))).collect(),
    })
}

pub fn classification_report_text(m: &ClassificationMetrics) -> String {
    let mut header: Vec<String> = m.per_relation.iter().map(|r| r.relation.clone()).collect();
    header.extend(["micro F1", "macro F1", "ACC"].map(String::from));
    let mut row: Vec<String> = m.per_relation.iter().map(|r| format!("{:.2}", 100.0 * r.f1)).collect();
    row.extend([
        format!("{:.2}", 100.0 * m.micro_f1),
        format!("{:.2}", 100.0 * m.macro_f1),
        format!("{:.2}", m.accuracy),
    ]);
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = format!("relation classification (n = {}, {:?})\n", m.n, m.mode).to_lowercase();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    let _ = writeln!(out, "{}", line(&row));
    for (k, v) in &m.topk {
        let _ = writeln!(out, "top-{k}: {v:.2}");
    }
    out
}

pub fn grounding_report_text(m: &GroundingMetrics) -> String {
    format!(
        "grounding (n = {}, failed = {})\nacc@{:.2}: {:.2}\nmean IoU: {:.4}\n",
        m.n, m.n_failed, m.iou_threshold, m.accuracy, m.mean_iou
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox2D {
        BBox2D::new(x, y, w, h)
    }

    fn dist(probs: &[f64], mode: RelationMode) -> RelationDistribution {
        RelationDistribution {
            probs: probs.to_vec(),
            mode,
        }
    }

    fn vocab3(mode: RelationMode) -> RelationVocabulary {
        RelationVocabulary::new(vec!["a".into(), "b".into(), "c".into()], mode).unwrap()
    }

    #[test]
    fn grounding_identities() {
        let g = vec![vec![bb(0.0, 0.0, 10.0, 10.0)], vec![bb(20.0, 20.0, 4.0, 4.0)]];
        let exact: Vec<_> = g.iter().map(|v| Some(v[0])).collect();
        let m = eval_grounding(&exact, &g, 0.5).unwrap();
        assert_eq!((m.accuracy, m.mean_iou), (100.0, 1.0));
        let disjoint = vec![Some(bb(100.0, 0.0, 1.0, 1.0)), None];
        let m = eval_grounding(&disjoint, &g, 0.5).unwrap();
        assert_eq!((m.accuracy, m.mean_iou, m.n_failed), (0.0, 0.0, 1));
    }

    #[test]
    fn grounding_hand_case() {
        // Second prediction: [0,0,10,10] vs [5,0,10,10] → 50 / 150 = 1/3.
        let g = vec![vec![bb(0.0, 0.0, 10.0, 10.0)], vec![bb(5.0, 0.0, 10.0, 10.0)]];
        let p = vec![Some(bb(0.0, 0.0, 10.0, 10.0)), Some(bb(0.0, 0.0, 10.0, 10.0))];
        let m = eval_grounding(&p, &g, 0.5).unwrap();
        assert_eq!(m.accuracy, 50.0);
        assert!((m.mean_iou - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn any_alternate_counts() {
        let g = vec![vec![bb(50.0, 0.0, 10.0, 10.0), bb(0.0, 0.0, 10.0, 10.0)]];
        let m = eval_grounding(&[Some(bb(0.0, 0.0, 10.0, 10.0))], &g, 0.5).unwrap();
        assert_eq!(m.accuracy, 100.0);
    }

    #[test]
    fn grounding_errors() {
        assert!(matches!(eval_grounding(&[None], &[], 0.5), Err(Error::LengthMismatch { .. })));
        assert!(matches!(eval_grounding(&[], &[], 0.5), Err(Error::EmptySet)));
    }

    #[test]
    fn perfect_multilabel() {
        let v = vocab3(RelationMode::Multilabel);
        let preds = vec![dist(&[0.9, 0.1, 0.8], RelationMode::Multilabel), dist(&[0.2, 0.7, 0.1], RelationMode::Multilabel)];
        let labels = vec![vec![0, 2], vec![1]];
        let m = eval_classification(&preds, &labels, &v, 0.5, &[]).unwrap();
        assert!(m.per_relation.iter().all(|r| r.f1 == 1.0));
        assert_eq!((m.micro_f1, m.macro_f1, m.accuracy), (1.0, 1.0, 100.0));
    }

    #[test]
    fn absent_class_gets_zero_f1() {
        let v = vocab3(RelationMode::Multilabel);
        let preds = vec![dist(&[0.9, 0.1, 0.1], RelationMode::Multilabel), dist(&[0.1, 0.7, 0.1], RelationMode::Multilabel)];
        let m = eval_classification(&preds, &[vec![0], vec![1]], &v, 0.5, &[]).unwrap();
        assert_eq!(m.f1("c"), Some(0.0));
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.micro_f1, 1.0);
    }

    #[test]
    fn hand_built_confusion() {
        // Multiclass, 10 samples. Rows: truth; columns: prediction.
        //        a  b  c
        //   a    3  1  0
        //   b    1  2  1
        //   c    0  0  2
        let pairs = [(0, 0), (0, 0), (0, 0), (0, 1), (1, 0), (1, 1), (1, 1), (1, 2), (2, 2), (2, 2)];
        let v = vocab3(RelationMode::Multiclass);
        let preds: Vec<_> = pairs
            .iter()
            .map(|&(_, p)| {
                let mut probs = [0.1, 0.1, 0.1];
                probs[p] = 0.8;
                dist(&probs, RelationMode::Multiclass)
            })
            .collect();
        let labels: Vec<_> = pairs.iter().map(|&(t, _)| vec![t]).collect();
        let m = eval_classification(&preds, &labels, &v, 0.5, &[1, 2]).unwrap();
        // a: P 3/4 R 3/4; b: P 2/3 R 2/4; c: P 2/3 R 2/2.
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        let expect = [f(0.75, 0.75), f(2.0 / 3.0, 0.5), f(2.0 / 3.0, 1.0)];
        for (r, e) in m.per_relation.iter().zip(expect) {
            assert!((r.f1 - e).abs() < 1e-12, "{}: {} vs {e}", r.relation, r.f1);
        }
        assert_eq!(m.accuracy, 70.0);
        assert!((m.micro_f1 - 0.7).abs() < 1e-12);
        assert_eq!(m.topk[&1], 70.0);
        assert_eq!(m.per_relation[1].support, 4);
    }

    #[test]
    fn json_roundtrip_and_layout() {
        let v = RelationVocabulary::six_directional();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<_> = (0..20)
            .map(|_| dist(&(0..6).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), RelationMode::Multilabel))
            .collect();
        let labels: Vec<_> = (0..20).map(|i| vec![i % 6]).collect();
        let m = eval_classification(&preds, &labels, &v, 0.5, &[]).unwrap();
        let json = crate::dataio::to_json_string(&m);
        assert!(!json.contains("topk"));
        let back: ClassificationMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let text = classification_report_text(&m);
        let header = text.lines().nth(1).unwrap();
        assert_eq!(header.split(" | ").count(), 9);
        assert!(!text.contains("top-"));
    }

    fn random_multiclass(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<RelationDistribution>, Vec<Vec<usize>>) {
        let preds = (0..n)
            .map(|_| dist(&(0..c).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), RelationMode::Multiclass))
            .collect();
        let labels = (0..n).map(|_| vec![rng.random_range(0..c)]).collect();
        (preds, labels)
    }

    #[test]
    fn micro_f1_equals_accuracy_for_single_label() {
        let v = RelationVocabulary::tabletop();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let (p, l) = random_multiclass(&mut rng, n, 6);
            let m = eval_classification(&p, &l, &v, 0.5, &[]).unwrap();
            assert!((100.0 * m.micro_f1 - m.accuracy).abs() < 1e-9);
            let mean = m.per_relation.iter().map(|r| r.f1).sum::<f64>() / 6.0;
            assert!((m.macro_f1 - mean).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn order_invariance(seed in 0u64..500) {
            let v = RelationVocabulary::tabletop();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, l) = random_multiclass(&mut rng, 30, 6);
            let mut idx: Vec<usize> = (0..30).collect();
            idx.shuffle(&mut rng);
            let p2: Vec<_> = idx.iter().map(|&i| p[i].clone()).collect();
            let l2: Vec<_> = idx.iter().map(|&i| l[i].clone()).collect();
            let a = eval_classification(&p, &l, &v, 0.5, &[1, 2]).unwrap();
            let b = eval_classification(&p2, &l2, &v, 0.5, &[1, 2]).unwrap();
            prop_assert_eq!(a.per_relation, b.per_relation);
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.topk, b.topk);
        }

        #[test]
        fn accuracy_non_increasing_in_threshold(boxes in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, -10.0..10.0f64, -10.0..10.0f64), 1..40)) {
            let preds: Vec<_> = boxes.iter().map(|&(x, y, w, h, dx, dy)| Some(bb(x + dx, y + dy, w, h))).collect();
            let gts: Vec<_> = boxes.iter().map(|&(x, y, w, h, _, _)| vec![bb(x, y, w, h)]).collect();
            let accs: Vec<f64> = [0.3, 0.5, 0.7].iter().map(|&t| eval_grounding(&preds, &gts, t).unwrap().accuracy).collect();
            prop_assert!(accs[0] >= accs[1] && accs[1] >= accs[2]);
        }
    }
}
