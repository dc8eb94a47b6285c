//! MLP input vectors: flattened box geometry of a (target, reference) pair,
//! optionally followed by word embeddings of both labels.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::BBox2D;
use crate::geometry::OrientedBox3D;
use crate::{Error, Result};

pub const GEOM2D_LEN: usize = 8;
pub const GEOM3D_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSchema {
    Geom2d,
    Geom2dLng,
    Geom3d,
    Geom3dLng,
}

impl FeatureSchema {
    pub const ALL: [FeatureSchema; 4] = [
        FeatureSchema::Geom2d,
        FeatureSchema::Geom2dLng,
        FeatureSchema::Geom3d,
        FeatureSchema::Geom3dLng,
    ];

    /// Identifier recorded in model files.
    pub fn id(self) -> &'static str {
        match self {
            FeatureSchema::Geom2d => "GEOM2D",
            FeatureSchema::Geom2dLng => "GEOM2D_LNG",
            FeatureSchema::Geom3d => "GEOM3D",
            FeatureSchema::Geom3dLng => "GEOM3D_LNG",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    /// Command-line spelling (`geom3d+lng`).
    pub fn flag(self) -> &'static str {
        match self {
            FeatureSchema::Geom2d => "geom2d",
            FeatureSchema::Geom2dLng => "geom2d+lng",
            FeatureSchema::Geom3d => "geom3d",
            FeatureSchema::Geom3dLng => "geom3d+lng",
        }
    }

    pub fn is_3d(self) -> bool {
        matches!(self, FeatureSchema::Geom3d | FeatureSchema::Geom3dLng)
    }

    pub fn uses_language(self) -> bool {
        matches!(self, FeatureSchema::Geom2dLng | FeatureSchema::Geom3dLng)
    }

    pub fn geometric(self) -> Self {
        if self.is_3d() {
            FeatureSchema::Geom3d
        } else {
            FeatureSchema::Geom2d
        }
    }

    fn with_language(self) -> Self {
        if self.is_3d() {
            FeatureSchema::Geom3dLng
        } else {
            FeatureSchema::Geom2dLng
        }
    }

    /// Vector length for embedding dimension `e` (ignored without language).
    pub fn len(self, e: usize) -> usize {
        let base = if self.is_3d() { GEOM3D_LEN } else { GEOM2D_LEN };
        if self.uses_language() {
            base + 2 * e
        } else {
            base
        }
    }
}

impl fmt::Display for FeatureSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FeatureSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.flag() == s || v.id() == s)
            .ok_or_else(|| {
                Error::validation(
                    "features",
                    format!("unknown feature variant `{s}` (geom2d, geom2d+lng, geom3d, geom3d+lng)"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema: FeatureSchema,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn push_box3d(out: &mut Vec<f64>, b: &OrientedBox3D) {
    out.extend(b.t.iter());
    out.extend(b.rotation_row_major());
    out.extend(b.d.iter());
}

/// `[T, R (row-major), D]` of the target, then of the reference.
pub fn feat3d(target: &OrientedBox3D, reference: &OrientedBox3D) -> FeatureVector {
    let mut values = Vec::with_capacity(GEOM3D_LEN);
    push_box3d(&mut values, target);
    push_box3d(&mut values, reference);
    FeatureVector {
        values,
        schema: FeatureSchema::Geom3d,
    }
}

/// `[x_c, y_c, w, h]` of the target then the reference, normalized by the
/// image width (x, w) and height (y, h).
pub fn feat2d(target: &BBox2D, reference: &BBox2D, width: u32, height: u32) -> FeatureVector {
    let (w, h) = (width as f64, height as f64);
    let mut values = Vec::with_capacity(GEOM2D_LEN);
    for b in [target, reference] {
        let (xc, yc) = b.center();
        values.extend([xc / w, yc / h, b.w / w, b.h / h]);
    }
    FeatureVector {
        values,
        schema: FeatureSchema::Geom2d,
    }
}

/// Appends the target and reference label embeddings to a geometric vector.
pub fn with_language(
    base: FeatureVector,
    target_label: &str,
    reference_label: &str,
    table: &EmbeddingTable,
) -> Result<FeatureVector> {
    if base.schema.uses_language() {
        return Err(Error::SchemaMismatch {
            expected: "GEOM2D or GEOM3D".into(),
            found: base.schema.id().into(),
        });
    }
    let mut values = base.values;
    values.reserve(2 * table.dim());
    values.extend(table.embed(target_label));
    values.extend(table.embed(reference_label));
    Ok(FeatureVector {
        values,
        schema: base.schema.with_language(),
    })
}

/// One side of a pair as seen by the feature builder.
#[derive(Debug, Clone, Copy)]
pub struct PairSide<'a> {
    pub label: &'a str,
    pub bbox: &'a BBox2D,
    pub box3d: &'a OrientedBox3D,
}

/// Builds the feature vector of `schema` for a (target, reference) pair.
/// `width`/`height` normalize 2D boxes; language variants need `table`.
pub fn pair_features(
    schema: FeatureSchema,
    target: PairSide<'_>,
    reference: PairSide<'_>,
    width: u32,
    height: u32,
    table: Option<&EmbeddingTable>,
) -> Result<FeatureVector> {
    let base = if schema.is_3d() {
        feat3d(target.box3d, reference.box3d)
    } else {
        feat2d(target.bbox, reference.bbox, width, height)
    };
    if !schema.uses_language() {
        return Ok(base);
    }
    let table = table.ok_or_else(|| {
        Error::validation("embeddings", format!("feature schema {schema} needs a word-embedding table"))
    })?;
    with_language(base, target.label, reference.label, table)
}

/// Word vectors, read from the text format `E N` followed by `word v1 .. vE` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        if let Some((w, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::validation(
                format!("embeddings.{w}"),
                format!("has {} values, expected {dim}", v.len()),
            ));
        }
        Ok(Self { dim, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("embeddings", "missing `E N` header"))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Error::parse("embeddings header", e)))
            .collect::<Result<_>>()?;
        let [dim, n] = nums[..] else {
            return Err(Error::parse("embeddings header", "expected two integers"));
        };
        let mut entries = HashMap::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut toks = line.split_whitespace();
            let word = toks.next().expect("non-empty line");
            let vec: Vec<f64> = toks
                .map(|t| t.parse().map_err(|e| Error::parse(format!("embeddings line {}", i + 2), e)))
                .collect::<Result<_>>()?;
            if vec.len() != dim {
                return Err(Error::parse(
                    format!("embeddings line {}", i + 2),
                    format!("{} values, expected {dim}", vec.len()),
                ));
            }
            entries.insert(word.to_string(), vec);
        }
        if entries.len() != n {
            return Err(Error::parse(
                "embeddings",
                format!("header declares {n} words, found {}", entries.len()),
            ));
        }
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// Mean of the per-word vectors; unknown words contribute zeros.
    pub fn embed(&self, label: &str) -> Vec<f64> {
        let words: Vec<String> = label.split_whitespace().map(str::to_lowercase).collect();
        let mut acc = vec![0.0; self.dim];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            if let Some(v) = self.entries.get(w) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        let n = words.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn table4() -> EmbeddingTable {
        EmbeddingTable::parse("4 3\ncoffee 1 2 3 4\nmug 0 0.5 1 -1\ntable 9 9 9 9\n").unwrap()
    }

    #[test]
    fn feat3d_identity_layout() {
        let t = OrientedBox3D::axis_aligned(Vector3::new(0.0, 0.0, 1.0), Vector3::repeat(0.1));
        let r = OrientedBox3D::axis_aligned(Vector3::new(0.0, 0.0, 2.0), Vector3::repeat(0.2));
        let f = feat3d(&t, &r);
        let expected = vec![
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.1, 0.1, //
            0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.2, 0.2, 0.2,
        ];
        assert_eq!(f.values, expected);
        assert_eq!(f.schema, FeatureSchema::Geom3d);
        let swapped = feat3d(&r, &t);
        assert_eq!(swapped.values[..15], f.values[15..]);
        assert_eq!(swapped.values[15..], f.values[..15]);
    }

    #[test]
    fn rotation_is_row_major() {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let b = OrientedBox3D {
            t: Vector3::zeros(),
            r,
            d: Vector3::new(3.0, 2.0, 1.0),
        };
        let f = feat3d(&b, &b);
        assert_eq!(f.values[3..12], [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn feat2d_normalized() {
        let f = feat2d(
            &BBox2D::new(0.0, 0.0, 10.0, 10.0),
            &BBox2D::new(10.0, 10.0, 10.0, 10.0),
            100,
            100,
        );
        assert_eq!(f.values, vec![0.05, 0.05, 0.1, 0.1, 0.15, 0.15, 0.1, 0.1]);
        let same = feat2d(&BBox2D::new(3.0, 4.0, 5.0, 6.0), &BBox2D::new(3.0, 4.0, 5.0, 6.0), 64, 48);
        assert_eq!(same.values[..4], same.values[4..]);
    }

    #[test]
    fn language_append_lengths_and_oov() {
        let t = OrientedBox3D::axis_aligned(Vector3::zeros(), Vector3::repeat(1.0));
        let f = with_language(feat3d(&t, &t), "mug", "spaceship", &table4()).unwrap();
        assert_eq!(f.len(), 38);
        assert_eq!(f.schema, FeatureSchema::Geom3dLng);
        assert_eq!(f.values[30..34], [0.0, 0.5, 1.0, -1.0]);
        assert_eq!(f.values[34..], [0.0; 4]);
        assert!(with_language(f, "a", "b", &table4()).is_err());
    }

    #[test]
    fn multiword_label_is_mean() {
        let table = table4();
        let direct: Vec<f64> = table
            .get("coffee")
            .unwrap()
            .iter()
            .zip(table.get("mug").unwrap())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        assert_eq!(table.embed("coffee mug"), direct);
    }

    #[test]
    fn embedding_table_rejects_ragged_rows() {
        assert!(EmbeddingTable::parse("3 1\nx 1 2\n").is_err());
        assert!(EmbeddingTable::parse("2 2\nx 1 2\n").is_err());
    }

    #[test]
    fn schema_flags_roundtrip() {
        for s in FeatureSchema::ALL {
            assert_eq!(s.flag().parse::<FeatureSchema>().unwrap(), s);
            assert_eq!(FeatureSchema::from_id(s.id()), Some(s));
        }
        assert_eq!(FeatureSchema::Geom2dLng.len(50), 108);
    }

    fn arb_box3d() -> impl Strategy<Value = OrientedBox3D> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(-3.2..3.2f64),
            prop::array::uniform3(0.0..2.0f64),
        )
            .prop_map(|(t, e, d)| OrientedBox3D {
                t: Vector3::from(t),
                r: *nalgebra::Rotation3::from_euler_angles(e[0], e[1], e[2]).matrix(),
                d: Vector3::from(d),
            })
    }

    proptest! {
        #[test]
        fn feat3d_shape_and_finiteness(a in arb_box3d(), b in arb_box3d()) {
            let f = feat3d(&a, &b);
            prop_assert_eq!(f.len(), GEOM3D_LEN);
            prop_assert_eq!(f.schema, FeatureSchema::Geom3d);
            prop_assert!(f.values.iter().all(|v| v.is_finite()));
            prop_assert_eq!(&f, &feat3d(&a, &b));
        }

        #[test]
        fn feat2d_in_unit_range(x in 0.0..90.0f64, y in 0.0..90.0f64, w in 0.0..10.0f64, h in 0.0..10.0f64,
                                x2 in 0.0..50.0f64, y2 in 0.0..50.0f64) {
            let a = BBox2D::new(x, y, w, h);
            let b = BBox2D::new(x2, y2, 50.0, 50.0);
            let f = feat2d(&a, &b, 100, 100);
            prop_assert!(f.values.iter().all(|v| (0.0..=1.0 + 1e-9).contains(v)));
        }
    }
}
