//! Deterministic synthetic RGB-D scenes: axis-aligned boxes inside a room,
//! depth rendered by per-pixel ray casting, per-object masks from the nearest
//! hit, and relation labels from the autolabel rules applied to the lifted
//! boxes.
//!
//! The camera sits at the origin looking down +z (x right, y down), so the
//! world is gravity-aligned with the image.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autolabel::{self, LabeledBox, RelationRuleConfig};
use crate::dataio::{
    self, BBox2D, BinaryMask, CameraIntrinsics, DatasetIndex, DepthImage, Detection2D, IndexEntry,
    PairFile, RelationVocabulary, SceneManifest,
};
use crate::geometry::{lift_detection, project, DenoiseConfig, OrientedBox3D};
use crate::{Error, Result};

pub const CLASSES: [&str; 8] = ["coffee mug", "book", "bottle", "cereal box", "lamp", "plant", "bowl", "laptop"];
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
pub const PLACEHOLDER_RGB: &str = "placeholder_rgb.png";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Axis-aligned box given by its corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_center(center: Vector3<f64>, size: Vector3<f64>) -> Self {
        let lo = center - size / 2.0;
        let hi = center + size / 2.0;
        Self {
            min: [lo.x, lo.y, lo.z],
            max: [hi.x, hi.y, hi.z],
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn size(&self) -> Vector3<f64> {
        Vector3::from_fn(|i, _| self.max[i] - self.min[i])
    }

    fn overlaps(&self, other: &Aabb, gap: f64) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] + gap && other.min[i] < self.max[i] + gap)
    }

    fn inside(&self, outer: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] >= outer.min[i] && self.max[i] <= outer.max[i])
    }

    fn corners(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..8).map(move |c| {
            Vector3::new(
                if c & 1 == 0 { self.min[0] } else { self.max[0] },
                if c & 2 == 0 { self.min[1] } else { self.max[1] },
                if c & 4 == 0 { self.min[2] } else { self.max[2] },
            )
        })
    }

    pub fn to_box3d(&self) -> OrientedBox3D {
        OrientedBox3D::axis_aligned(self.center(), self.size())
    }
}

/// Entry distance of the ray `t * dir` (from the origin) into `b`, if any.
pub fn ray_aabb(dir: &Vector3<f64>, b: &Aabb) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if dir[i] == 0.0 {
            if b.min[i] > 0.0 || b.max[i] < 0.0 {
                return None;
            }
            continue;
        }
        let a = b.min[i] / dir[i];
        let c = b.max[i] / dir[i];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t0 <= t1).then_some(t0)
}

/// Exit distance of the ray from a box containing the origin.
fn ray_exit(dir: &Vector3<f64>, b: &Aabb) -> f64 {
    (0..3)
        .filter(|&i| dir[i] != 0.0)
        .map(|i| if dir[i] > 0.0 { b.max[i] / dir[i] } else { b.min[i] / dir[i] })
        .fold(f64::INFINITY, f64::min)
}

fn pixel_ray(u: u32, v: u32, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0)
}

/// Float depth (z, meters) and nearest object per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub z: Vec<f64>,
    pub ids: Vec<Option<usize>>,
    /// Pixels each object would cover with nothing in front of it.
    pub unoccluded_area: Vec<usize>,
}

/// Ray casts every pixel against the objects, falling back to the room walls.
pub fn render(objects: &[Aabb], room: &Aabb, k: &CameraIntrinsics) -> Render {
    let n = (k.width * k.height) as usize;
    let mut z = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut unoccluded_area = vec![0usize; objects.len()];
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = pixel_ray(u, v, k);
            let mut best: Option<(f64, usize)> = None;
            for (i, b) in objects.iter().enumerate() {
                if let Some(t) = ray_aabb(&dir, b) {
                    unoccluded_area[i] += 1;
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            match best {
                Some((t, i)) => {
                    z.push(t);
                    ids.push(Some(i));
                }
                None => {
                    z.push(ray_exit(&dir, room));
                    ids.push(None);
                }
            }
        }
    }
    Render { z, ids, unoccluded_area }
}

/// Millimeter depth image (0 beyond the 16-bit range).
pub fn quantize_depth(r: &Render, k: &CameraIntrinsics) -> DepthImage {
    let values = r
        .z
        .iter()
        .map(|&z| {
            let mm = (z * 1000.0).round();
            if (1.0..=65535.0).contains(&mm) {
                mm as u16
            } else {
                0
            }
        })
        .collect();
    DepthImage::new(k.width, k.height, values).expect("render covers the image")
}

/// Mask of the pixels where `id` is the nearest hit.
pub fn object_mask(r: &Render, id: usize, k: &CameraIntrinsics) -> BinaryMask {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut col_major = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            if r.ids[v * w + u] == Some(id) {
                col_major[u * h + v] = true;
            }
        }
    }
    BinaryMask::from_column_major(k.width, k.height, &col_major)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive range of objects to place.
    pub n_objects: (usize, usize),
    pub room: Aabb,
    /// Region object centers are drawn from.
    pub placement: Aabb,
    pub object_size_range_m: (f64, f64),
    pub intrinsics: CameraIntrinsics,
    /// Largest occluded fraction an object may have and still be annotated.
    pub occlusion_rate: f64,
    pub min_visible_pixels: usize,
    /// Probability that a true object gets no detection.
    pub detector_noise: f64,
    /// Jittered boxes, random scores and distractors instead of perfect detections.
    pub noisy_detections: bool,
    pub max_distractors: usize,
    pub rules: RelationRuleConfig,
    pub denoise: DenoiseConfig,
    pub vocabulary: RelationVocabulary,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: (4, 10),
            room: Aabb {
                min: [-2.5, -1.5, -0.5],
                max: [2.5, 1.2, 5.0],
            },
            placement: Aabb {
                min: [-1.3, -0.8, 1.4],
                max: [1.3, 0.8, 3.6],
            },
            object_size_range_m: (0.06, 0.5),
            intrinsics: CameraIntrinsics {
                fx: 120.0,
                fy: 120.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
            },
            occlusion_rate: 0.5,
            min_visible_pixels: 30,
            detector_noise: 0.1,
            noisy_detections: true,
            max_distractors: 2,
            rules: RelationRuleConfig::default(),
            denoise: DenoiseConfig::default(),
            vocabulary: RelationVocabulary::six_directional(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.rules.validate()?;
        self.denoise.validate()?;
        self.vocabulary.validate()?;
        let (lo, hi) = self.n_objects;
        if lo < 2 || lo > hi {
            return Err(Error::validation("synth.n_objects", "need 2 <= min <= max"));
        }
        let (smin, smax) = self.object_size_range_m;
        if !(smin > 0.0 && smin <= smax) {
            return Err(Error::validation("synth.object_size_range_m", "need 0 < min <= max"));
        }
        if !self.placement.inside(&self.room) {
            return Err(Error::validation("synth.placement", "must lie inside the room"));
        }
        if !(0..3).all(|i| self.room.min[i] < 0.0 && self.room.max[i] > 0.0) {
            return Err(Error::validation("synth.room", "must contain the camera"));
        }
        for (name, v) in [("synth.occlusion_rate", self.occlusion_rate), ("synth.detector_noise", self.detector_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, "must be in [0, 1]"));
            }
        }
        Ok(())
    }

    fn in_view(&self, b: &Aabb) -> bool {
        let k = &self.intrinsics;
        b.corners().all(|c| {
            let (u, v) = project(&c, k);
            c.z > 0.0 && u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub label: String,
    pub aabb: Aabb,
}

/// An object that is visible enough to be annotated.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub object: usize,
    pub mask: BinaryMask,
    pub bbox: BBox2D,
    pub lifted: OrientedBox3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub manifest: SceneManifest,
    pub depth: DepthImage,
    pub render: Render,
    pub objects: Vec<SynthObject>,
    pub annotated: Vec<AnnotatedObject>,
    pub pairs: PairFile,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Rejection-samples non-overlapping, fully visible boxes.
pub fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SynthObject>> {
    let n = rng.random_range(spec.n_objects.0..=spec.n_objects.1);
    let (smin, smax) = spec.object_size_range_m;
    let mut placed: Vec<SynthObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS));
        }
        let p = &spec.placement;
        let center = Vector3::from_fn(|i, _| uniform(rng, p.min[i], p.max[i]));
        let size = Vector3::from_fn(|_, _| uniform(rng, smin, smax));
        let label = CLASSES[rng.random_range(0..CLASSES.len())];
        let b = Aabb::from_center(center, size);
        if !b.inside(&spec.room) || !spec.in_view(&b) || placed.iter().any(|o| o.aabb.overlaps(&b, 0.02)) {
            continue;
        }
        placed.push(SynthObject {
            label: label.to_string(),
            aabb: b,
        });
    }
    Ok(placed)
}

fn noisy_detections(
    annotated: &[AnnotatedObject],
    objects: &[SynthObject],
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, Vec<Detection2D>> {
    let k = &spec.intrinsics;
    let mut out: BTreeMap<String, Vec<Detection2D>> = BTreeMap::new();
    for a in annotated {
        let label = &objects[a.object].label;
        let entry = out.entry(label.clone()).or_default();
        if !spec.noisy_detections {
            entry.push(Detection2D {
                label: label.clone(),
                score: 1.0,
                bbox: a.bbox,
                mask: Some(a.mask.clone()),
            });
            continue;
        }
        if rng.random_bool(spec.detector_noise) {
            continue;
        }
        let b = a.bbox;
        let mut jitter = |extent: f64| extent * uniform(rng, -0.05, 0.05);
        let bbox = BBox2D::new(b.x + jitter(b.w), b.y + jitter(b.h), b.w + jitter(b.w), b.h + jitter(b.h))
            .clamped(k.width, k.height);
        entry.push(Detection2D {
            label: label.clone(),
            score: uniform(rng, 0.5, 1.0),
            bbox,
            mask: Some(a.mask.clone()),
        });
    }
    if spec.noisy_detections {
        for (label, dets) in out.iter_mut() {
            for _ in 0..rng.random_range(0..=spec.max_distractors) {
                let w = uniform(rng, 8.0, 40.0).round();
                let h = uniform(rng, 8.0, 40.0).round();
                let x = uniform(rng, 0.0, k.width as f64 - w).round();
                let y = uniform(rng, 0.0, k.height as f64 - h).round();
                dets.push(Detection2D {
                    label: label.clone(),
                    score: uniform(rng, 0.0, 0.6),
                    bbox: BBox2D::new(x, y, w, h),
                    mask: None,
                });
            }
        }
    }
    out
}

/// Builds one scene. Everything is a function of `spec.seed` and `scene_id`.
pub fn generate_scene(spec: &SceneSpec, scene_id: &str) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = place_objects(spec, &mut rng)?;
    let k = spec.intrinsics;
    let boxes: Vec<Aabb> = objects.iter().map(|o| o.aabb).collect();
    let render = render(&boxes, &spec.room, &k);
    let depth = quantize_depth(&render, &k);

    let mut annotated = Vec::new();
    for (i, _) in objects.iter().enumerate() {
        let mask = object_mask(&render, i, &k);
        let visible = mask.area() as usize;
        let full = render.unoccluded_area[i].max(1);
        if visible < spec.min_visible_pixels || (visible as f64) < (1.0 - spec.occlusion_rate) * full as f64 {
            continue;
        }
        let bbox = mask.tight_bbox().expect("non-empty mask");
        let lift = lift_detection(&depth, Some(&mask), &bbox, &k, &spec.denoise);
        if lift.degenerate {
            continue;
        }
        annotated.push(AnnotatedObject {
            object: i,
            mask,
            bbox,
            lifted: lift.bbox3d,
        });
    }

    let labeled: Vec<LabeledBox> = annotated
        .iter()
        .map(|a| LabeledBox {
            label: objects[a.object].label.clone(),
            score: 1.0,
            bbox: a.bbox,
            box3d: a.lifted,
        })
        .collect();
    let expressions = autolabel::generate_expressions(&labeled, &spec.rules, &spec.vocabulary);
    let pairs = PairFile {
        scene_id: scene_id.to_string(),
        pairs: autolabel::pair_records(&labeled, &spec.rules, &spec.vocabulary),
    };
    let detections = noisy_detections(&annotated, &objects, spec, &mut rng);
    let manifest = SceneManifest {
        scene_id: scene_id.to_string(),
        rgb_path: PLACEHOLDER_RGB.to_string(),
        depth_path: format!("{scene_id}_depth.png"),
        intrinsics: k,
        vocabulary: spec.vocabulary.clone(),
        detections,
        expressions,
        provenance: Some(format!("synthgen seed={}", spec.seed)),
    };
    manifest.validate()?;
    Ok(SyntheticScene {
        manifest,
        depth,
        render,
        objects,
        annotated,
        pairs,
    })
}

/// Per-scene seed: the master seed's ChaCha stream number `index`.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.random()
}

/// Split by scene index: 8 of every 10 train, then one val, one test.
pub fn split_of(index: usize) -> &'static str {
    match index % 10 {
        8 => "val",
        9 => "test",
        _ => "train",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub scenes: usize,
    pub expressions: usize,
    pub pairs: usize,
    pub relation_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub seed: u64,
    pub n_scenes: usize,
    pub splits: BTreeMap<String, SplitSummary>,
}

/// Writes `out/{train,val,test}/` dataset directories (manifests, depth
/// PNGs, pair files, placeholder RGB, index) plus `out/summary.json`.
pub fn generate_benchmark(n_scenes: usize, spec: &SceneSpec, threads: usize, out: &Path) -> Result<BenchmarkSummary> {
    if n_scenes < 10 {
        return Err(Error::validation("scenes", "need at least 10 scenes"));
    }
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::validation("threads", e.to_string()))?;
    let scenes: Vec<SyntheticScene> = pool.install(|| {
        (0..n_scenes)
            .into_par_iter()
            .map(|i| {
                let s = SceneSpec {
                    seed: scene_seed(spec.seed, i as u64),
                    ..spec.clone()
                };
                generate_scene(&s, &format!("scene_{i:05}"))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let k = spec.intrinsics;
    let mut indices: BTreeMap<&str, DatasetIndex> = SPLITS
        .iter()
        .map(|&s| {
            (
                s,
                DatasetIndex {
                    version: dataio::DATASET_VERSION,
                    vocabulary: spec.vocabulary.clone(),
                    scenes: Vec::new(),
                    n_expressions: 0,
                    relation_counts: BTreeMap::new(),
                },
            )
        })
        .collect();
    let mut pair_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut exprs: BTreeMap<&str, Vec<dataio::Expression>> = BTreeMap::new();
    for split in SPLITS {
        dataio::save_placeholder_rgb(k.width, k.height, &out.join(split).join(PLACEHOLDER_RGB))?;
    }
    for (i, scene) in scenes.into_iter().enumerate() {
        let split = split_of(i);
        let dir = out.join(split);
        let id = &scene.manifest.scene_id;
        let manifest_name = format!("{id}.json");
        let pairs_name = format!("{id}.pairs.json");
        dataio::save_depth(&scene.depth, &dir.join(&scene.manifest.depth_path))?;
        dataio::save_manifest(&scene.manifest, &dir.join(&manifest_name))?;
        dataio::write_text(&dir.join(&pairs_name), &dataio::to_json_string(&scene.pairs))?;
        *pair_counts.entry(split).or_default() += scene.pairs.pairs.len();
        exprs.entry(split).or_default().extend(scene.manifest.expressions);
        indices.get_mut(split).expect("known split").scenes.push(IndexEntry {
            scene_id: id.clone(),
            manifest: manifest_name,
            pairs: Some(pairs_name),
        });
    }
    let mut splits = BTreeMap::new();
    for (split, mut index) in indices {
        let e = exprs.remove(split).unwrap_or_default();
        index.n_expressions = e.len();
        index.relation_counts = dataio::relation_counts(&spec.vocabulary, &e);
        index.save(&out.join(split))?;
        splits.insert(
            split.to_string(),
            SplitSummary {
                scenes: index.scenes.len(),
                expressions: index.n_expressions,
                pairs: pair_counts.get(split).copied().unwrap_or(0),
                relation_counts: index.relation_counts,
            },
        );
    }
    let summary = BenchmarkSummary {
        seed: spec.seed,
        n_scenes,
        splits,
    };
    dataio::write_text(&out.join("summary.json"), &dataio::to_json_string(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject_pixel;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&spec(5), "s").unwrap();
        let b = generate_scene(&spec(5), "s").unwrap();
        assert_eq!(dataio::manifest_to_string(&a.manifest), dataio::manifest_to_string(&b.manifest));
        assert_eq!(a.depth, b.depth);
        let c = generate_scene(&spec(6), "s").unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn center_pixel_depth_is_analytic() {
        let s = SceneSpec::default();
        let b = Aabb::from_center(Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.3, 0.2, 0.25));
        let r = render(&[b], &s.room, &s.intrinsics);
        let k = &s.intrinsics;
        let i = (k.cy as usize) * k.width as usize + k.cx as usize;
        assert_eq!(r.ids[i], Some(0));
        assert!((r.z[i] - (2.0 - 0.125)).abs() < 1e-6);
        // Off-center pixel hitting the front face: z is still the face depth.
        assert!((r.z[i + 3] - 1.875).abs() < 1e-6);
        // Background: the back wall straight ahead.
        assert!((r.z[0] - ray_exit(&pixel_ray(0, 0, k), &s.room)).abs() < 1e-12);
    }

    #[test]
    fn occlusion_takes_nearest_hit() {
        let k = CameraIntrinsics { fx: 20.0, fy: 20.0, cx: 12.0, cy: 8.0, width: 24, height: 16 };
        let room = SceneSpec::default().room;
        let boxes = [
            Aabb::from_center(Vector3::new(0.0, 0.0, 3.0), Vector3::new(1.0, 1.0, 0.5)),
            Aabb::from_center(Vector3::new(0.2, 0.1, 2.0), Vector3::new(0.4, 0.4, 0.3)),
            Aabb::from_center(Vector3::new(-0.6, -0.2, 2.5), Vector3::new(0.5, 0.3, 0.3)),
        ];
        let r = render(&boxes, &room, &k);
        for v in 0..k.height {
            for u in 0..k.width {
                let dir = pixel_ray(u, v, &k);
                let hits: Vec<(f64, usize)> = boxes.iter().enumerate().filter_map(|(i, b)| ray_aabb(&dir, b).map(|t| (t, i))).collect();
                let expect = hits.iter().min_by(|a, b| a.0.total_cmp(&b.0)).map(|h| h.1);
                let idx = (v * k.width + u) as usize;
                assert_eq!(r.ids[idx], expect, "pixel {u},{v}");
            }
        }
        assert!(r.ids.contains(&Some(1)) && r.ids.contains(&Some(0)));
    }

    #[test]
    fn gt_bbox_is_tight_mask_bbox() {
        for seed in 0..10 {
            let s = generate_scene(&spec(seed), "s").unwrap();
            for a in &s.annotated {
                assert_eq!(Some(a.bbox), a.mask.tight_bbox());
            }
            for e in &s.manifest.expressions {
                let gt = e.gt_target_bbox.unwrap();
                assert!(s.annotated.iter().any(|a| a.bbox == gt));
            }
        }
    }

    #[test]
    fn lifted_centroid_near_visible_surface_centroid() {
        let s = SceneSpec {
            n_objects: (2, 2),
            ..Default::default()
        };
        let k = s.intrinsics;
        let b = Aabb::from_center(Vector3::new(0.1, -0.05, 2.2), Vector3::new(0.35, 0.3, 0.3));
        let r = render(&[b], &s.room, &k);
        let depth = quantize_depth(&r, &k);
        let mask = object_mask(&r, 0, &k);
        let mut sum = Vector3::zeros();
        let mut n = 0.0;
        for (u, v) in mask.pixels() {
            sum += backproject_pixel(u as f64, v as f64, r.z[(v * k.width + u) as usize], &k);
            n += 1.0;
        }
        let truth = sum / n;
        let lift = lift_detection(&depth, Some(&mask), &mask.tight_bbox().unwrap(), &k, &s.denoise);
        assert!(!lift.degenerate);
        assert!((lift.bbox3d.t - truth).norm() < 0.10, "{:?} vs {truth:?}", lift.bbox3d.t);
    }

    #[test]
    fn noisy_scores_in_range_and_labels_keyed() {
        for seed in 0..10 {
            let s = generate_scene(&spec(seed), "s").unwrap();
            for (key, dets) in &s.manifest.detections {
                for d in dets {
                    assert_eq!(&d.label, key);
                    assert!((0.0..=1.0).contains(&d.score));
                }
            }
        }
    }

    #[test]
    fn perfect_detections_match_annotations() {
        let s = generate_scene(&SceneSpec { noisy_detections: false, ..spec(3) }, "s").unwrap();
        let n: usize = s.manifest.detections.values().map(Vec::len).sum();
        assert_eq!(n, s.annotated.len());
        assert!(s.manifest.detections.values().flatten().all(|d| d.score == 1.0 && d.mask.is_some()));
    }

    #[test]
    fn placement_failure_when_room_is_too_small() {
        let s = SceneSpec {
            n_objects: (10, 10),
            placement: Aabb { min: [-0.1, -0.1, 2.0], max: [0.1, 0.1, 2.1] },
            ..Default::default()
        };
        assert!(matches!(generate_scene(&s, "s"), Err(Error::PlacementFailure(_))));
    }

    #[test]
    fn split_partition() {
        let counts = (0..100).fold(BTreeMap::new(), |mut m, i| {
            *m.entry(split_of(i)).or_insert(0) += 1;
            m
        });
        assert_eq!(counts["train"], 80);
        assert_eq!(counts["val"], 10);
        assert_eq!(counts["test"], 10);
        assert_ne!(scene_seed(1, 0), scene_seed(1, 1));
        assert_ne!(scene_seed(1, 0), scene_seed(2, 0));
    }
}
