//! On-disk scene and dataset formats.
//!
//! A scene is one JSON manifest (see `docs/manifest.md`) referencing a 16-bit
//! millimeter depth PNG. A dataset is a directory holding an `index.json`, the
//! per-scene manifests and optional per-scene pair files produced by the
//! autolabeler.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::OrientedBox3D;
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("intrinsics", "non-finite value"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("intrinsics.width", "image size must be positive"));
        }
        if self.fx <= 0.0 {
            return Err(Error::validation("intrinsics.fx", "must be > 0"));
        }
        if self.fy <= 0.0 {
            return Err(Error::validation("intrinsics.fy", "must be > 0"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) {
            return Err(Error::validation("intrinsics.cx", "must lie in [0, width)"));
        }
        if !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::validation("intrinsics.cy", "must lie in [0, height)"));
        }
        Ok(())
    }
}

/// Row-major depth in millimeters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<u16>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} depth values"),
                found: values.len().to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.values[v as usize * self.width as usize + u as usize]
    }
}

/// Foreground mask stored as column-major run lengths, alternating
/// background/foreground and starting with a (possibly zero) background run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct MaskDoc {
    /// `[height, width]`, the usual RLE convention.
    size: [u32; 2],
    runs: Vec<u32>,
}

impl Serialize for BinaryMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskDoc {
            size: [self.height, self.width],
            runs: self.runs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MaskDoc::deserialize(d)?;
        BinaryMask::from_runs(doc.size[1], doc.size[0], doc.runs)
            .map_err(serde::de::Error::custom)
    }
}

impl BinaryMask {
    pub fn from_runs(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(Error::validation(
                "mask.runs",
                format!("runs sum to {total}, expected {expected}"),
            ));
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Encodes a column-major boolean grid (`pixels[u * height + v]`).
    pub fn from_column_major(width: u32, height: u32, pixels: &[bool]) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &p in pixels {
            if p != current {
                runs.push(count);
                count = 0;
                current = p;
            }
            count += 1;
        }
        runs.push(count);
        Self {
            width,
            height,
            runs,
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &BTreeSet<(u32, u32)>) -> Self {
        let mut grid = vec![false; width as usize * height as usize];
        for &(u, v) in pixels {
            assert!(u < width && v < height, "pixel ({u},{v}) outside mask");
            grid[u as usize * height as usize + v as usize] = true;
        }
        Self::from_column_major(width, height, &grid)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Foreground pixels as `(u, v)` = (column, row), in column-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let h = self.height as u64;
        let mut offset = 0u64;
        self.runs.iter().enumerate().flat_map(move |(i, &r)| {
            let start = offset;
            offset += r as u64;
            let range = if i % 2 == 1 { start..start + r as u64 } else { 0..0 };
            range.map(move |idx| ((idx / h) as u32, (idx % h) as u32))
        })
    }

    pub fn decode(&self) -> BTreeSet<(u32, u32)> {
        self.pixels().collect()
    }

    /// Tight pixel bbox of the foreground, `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox2D> {
        let mut it = self.pixels();
        let (u0, v0) = it.next()?;
        let (mut umin, mut umax, mut vmin, mut vmax) = (u0, u0, v0, v0);
        for (u, v) in it {
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        Some(BBox2D::new(
            umin as f64,
            vmin as f64,
            (umax - umin + 1) as f64,
            (vmax - vmin + 1) as f64,
        ))
    }
}

/// Axis-aligned image box: top-left corner plus extents, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox2D {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox2D> for [f64; 4] {
    fn from(b: BBox2D) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox2D {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Intersection with the image rectangle `[0, width] x [0, height]`.
    pub fn clamped(&self, width: u32, height: u32) -> Self {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = (self.x + self.w).clamp(0.0, width as f64);
        let y1 = (self.y + self.h).clamp(0.0, height as f64);
        Self::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    /// Lexicographic `(x, y, w, h)` comparison used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub label: String,
    pub score: f64,
    pub bbox: BBox2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationMode {
    Multiclass,
    Multilabel,
}

/// Geometric meaning of a relation word, independent of its surface form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    Left,
    Right,
    Above,
    Below,
    Behind,
    InFrontOf,
    On,
    In,
}

impl RelationKind {
    /// Maps a relation word to its kind; accepts the common surface forms
    /// ("left" / "left of", "on" / "on top of", "in" / "inside", ...).
    pub fn parse(name: &str) -> Option<Self> {
        let norm = name.trim().to_ascii_lowercase().replace(['_', '-'], " ");
        let kind = match norm.as_str() {
            "left" | "left of" | "to the left of" => RelationKind::Left,
            "right" | "right of" | "to the right of" => RelationKind::Right,
            "above" | "over" => RelationKind::Above,
            "below" | "under" | "beneath" => RelationKind::Below,
            "behind" => RelationKind::Behind,
            "in front of" | "in front" | "front" => RelationKind::InFrontOf,
            "on" | "on top of" | "atop" => RelationKind::On,
            "in" | "inside" | "inside of" => RelationKind::In,
            _ => return None,
        };
        Some(kind)
    }

    pub fn inverse(self) -> Option<Self> {
        Some(match self {
            RelationKind::Left => RelationKind::Right,
            RelationKind::Right => RelationKind::Left,
            RelationKind::Above => RelationKind::Below,
            RelationKind::Below => RelationKind::Above,
            RelationKind::Behind => RelationKind::InFrontOf,
            RelationKind::InFrontOf => RelationKind::Behind,
            RelationKind::On | RelationKind::In => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocabulary {
    pub names: Vec<String>,
    pub mode: RelationMode,
}

impl Default for RelationVocabulary {
    fn default() -> Self {
        Self::six_directional()
    }
}

impl RelationVocabulary {
    pub fn new(names: Vec<String>, mode: RelationMode) -> Result<Self> {
        let vocab = Self { names, mode };
        vocab.validate()?;
        Ok(vocab)
    }

    /// right, left, above, below, behind, in front of; multilabel.
    pub fn six_directional() -> Self {
        Self {
            names: ["right", "left", "above", "below", "behind", "in front of"]
                .map(String::from)
                .to_vec(),
            mode: RelationMode::Multilabel,
        }
    }

    /// behind, left of, right of, in front of, on top of, inside; multiclass.
    pub fn tabletop() -> Self {
        Self {
            names: ["behind", "left of", "right of", "in front of", "on top of", "inside"]
                .map(String::from)
                .to_vec(),
            mode: RelationMode::Multiclass,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn kind(&self, index: usize) -> Option<RelationKind> {
        RelationKind::parse(&self.names[index])
    }

    pub fn index_of_kind(&self, kind: RelationKind) -> Option<usize> {
        (0..self.names.len()).find(|&i| self.kind(i) == Some(kind))
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::validation("vocabulary.names", "must not be empty"));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(
                    "vocabulary.names",
                    format!("duplicate relation `{name}`"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub target: String,
    pub relation: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_target_bbox: Option<BBox2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_reference_bbox: Option<BBox2D>,
    /// Further target instances that also satisfy the expression.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_target_alternates: Vec<BBox2D>,
}

impl Expression {
    pub fn new(target: &str, relation: &str, reference: &str) -> Self {
        Self {
            target: target.to_string(),
            relation: relation.to_string(),
            reference: reference.to_string(),
            gt_target_bbox: None,
            gt_reference_bbox: None,
            gt_target_alternates: Vec::new(),
        }
    }

    /// Parses the `target,relation,reference` triplet form.
    pub fn parse_triplet(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [t, r, f] if !t.is_empty() && !r.is_empty() && !f.is_empty() => {
                Ok(Self::new(t, r, f))
            }
            _ => Err(Error::parse(
                "expression",
                format!("expected `target,relation,reference`, got `{s}`"),
            )),
        }
    }

    /// Every acceptable target box: the primary ground truth then alternates.
    pub fn gt_targets(&self) -> Vec<BBox2D> {
        self.gt_target_bbox
            .iter()
            .chain(self.gt_target_alternates.iter())
            .copied()
            .collect()
    }

    pub fn triplet(&self) -> (&str, &str, &str) {
        (&self.target, &self.relation, &self.reference)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub rgb_path: String,
    pub depth_path: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub vocabulary: RelationVocabulary,
    pub detections: BTreeMap<String, Vec<Detection2D>>,
    #[serde(default)]
    pub expressions: Vec<Expression>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() {
            return Err(Error::validation("scene_id", "must not be empty"));
        }
        self.intrinsics.validate()?;
        self.vocabulary.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for (key, dets) in &self.detections {
            for (i, det) in dets.iter().enumerate() {
                let field = |f: &str| format!("detections.{key}[{i}].{f}");
                if !(det.score.is_finite() && (0.0..=1.0).contains(&det.score)) {
                    return Err(Error::validation(
                        field("score"),
                        format!("{} outside [0, 1]", det.score),
                    ));
                }
                if !det.bbox.is_valid() {
                    return Err(Error::validation(field("bbox"), "non-finite or negative extent"));
                }
                if let Some(mask) = &det.mask {
                    if mask.width() != w || mask.height() != h {
                        return Err(Error::validation(
                            field("mask.size"),
                            format!(
                                "mask is {}x{}, image is {w}x{h}",
                                mask.width(),
                                mask.height()
                            ),
                        ));
                    }
                }
            }
        }
        for (i, expr) in self.expressions.iter().enumerate() {
            let field = |f: &str| format!("expressions[{i}].{f}");
            if self.vocabulary.index_of(&expr.relation).is_none() {
                return Err(Error::validation(
                    field("relation"),
                    format!("`{}` is not in the relation vocabulary", expr.relation),
                ));
            }
            if !self.detections.contains_key(&expr.target) {
                return Err(Error::validation(
                    field("target"),
                    format!("label `{}` has no detections entry", expr.target),
                ));
            }
            if !self.detections.contains_key(&expr.reference) {
                return Err(Error::validation(
                    field("reference"),
                    format!("label `{}` has no detections entry", expr.reference),
                ));
            }
            let boxes = expr
                .gt_target_bbox
                .iter()
                .chain(&expr.gt_reference_bbox)
                .chain(&expr.gt_target_alternates);
            if boxes.into_iter().any(|b| !b.is_valid()) {
                return Err(Error::validation(field("gt"), "invalid ground-truth box"));
            }
        }
        Ok(())
    }

    /// Resolves a manifest-relative path against the manifest's directory.
    pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    }

    pub fn load_depth_for(&self, manifest_path: &Path) -> Result<DepthImage> {
        load_depth(
            &Self::resolve(manifest_path, &self.depth_path),
            self.intrinsics.width,
            self.intrinsics.height,
        )
    }
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn parse_manifest(text: &str, context: &str) -> Result<SceneManifest> {
    let manifest: SceneManifest = serde_json::from_str(text).map_err(|e| {
        // Invariant failures raised inside custom deserializers surface here
        // too; report them as validation errors naming the mask.
        let msg = e.to_string();
        if msg.contains("validation error") {
            Error::validation("mask", msg)
        } else {
            Error::parse(context, msg)
        }
    })?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn manifest_to_string(manifest: &SceneManifest) -> String {
    to_json_string(manifest)
}

pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    write_text(path, &manifest_to_string(manifest))
}

/// Pretty JSON with a trailing newline; the one serialization used for every
/// document this crate writes.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable document");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Reads a 16-bit single-channel PNG holding millimeter depth.
pub fn load_depth(path: &Path, width: u32, height: u32) -> Result<DepthImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::DimensionMismatch {
            expected: "16-bit grayscale PNG".into(),
            found: format!("{:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    if info.width != width || info.height != height {
        return Err(Error::DimensionMismatch {
            expected: format!("{width}x{height}"),
            found: format!("{}x{}", info.width, info.height),
        });
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path.display().to_string(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let bytes = &buf[..frame.buffer_size()];
    let values = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    DepthImage::new(width, height, values)
}

pub fn save_depth(depth: &DepthImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), depth.width, depth.height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let bytes: Vec<u8> = depth.values.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    writer
        .finish()
        .map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Writes a flat 8-bit gray placeholder image (RGB is carried for provenance only).
pub fn save_placeholder_rgb(width: u32, height: u32, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let data = vec![128u8; width as usize * height as usize * 3];
    writer
        .write_image_data(&data)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    writer
        .finish()
        .map_err(|e| Error::parse(path.display().to_string(), e))
}

/// One ordered object pair with every relation that holds for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target_label: String,
    pub reference_label: String,
    pub target_bbox: BBox2D,
    pub reference_bbox: BBox2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_box3d: Option<OrientedBox3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_box3d: Option<OrientedBox3D>,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFile {
    pub scene_id: String,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene_id: String,
    /// Manifest path relative to the dataset directory.
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub vocabulary: RelationVocabulary,
    pub scenes: Vec<IndexEntry>,
    pub n_expressions: usize,
    pub relation_counts: BTreeMap<String, usize>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
        if index.version != DATASET_VERSION {
            return Err(Error::validation(
                "index.version",
                format!("unsupported dataset version {}", index.version),
            ));
        }
        index.vocabulary.validate()?;
        Ok(index)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(INDEX_FILE), &to_json_string(self))
    }

    pub fn manifest_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(&self.scenes[i].manifest)
    }

    pub fn load_scene(&self, dir: &Path, i: usize) -> Result<SceneManifest> {
        load_manifest(&self.manifest_path(dir, i))
    }

    pub fn load_pairs(&self, dir: &Path, i: usize) -> Result<Option<PairFile>> {
        match &self.scenes[i].pairs {
            Some(rel) => read_json(&dir.join(rel)).map(Some),
            None => Ok(None),
        }
    }
}

/// Per-relation expression counts in vocabulary order (zero counts included).
pub fn relation_counts<'a>(
    vocab: &RelationVocabulary,
    expressions: impl IntoIterator<Item = &'a Expression>,
) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> =
        vocab.names.iter().map(|n| (n.clone(), 0)).collect();
    for e in expressions {
        *counts.entry(e.relation.clone()).or_default() += 1;
    }
    counts
}

/// Writes `x y z` lines (meters) for point-cloud debugging.
pub fn write_point_dump(points: &[[f64; 3]], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in points {
        writeln!(w, "{} {} {}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
