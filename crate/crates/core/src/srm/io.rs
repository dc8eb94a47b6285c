//! Binary model file, little-endian:
//!
//! ```text
//! magic   b"RGSM"
//! version u32
//! schema  u32 length + UTF-8 id (e.g. "GEOM3D")
//! mode    u8 (0 = multiclass, 1 = multilabel)
//! vocab   u32 count, then per name: u32 length + UTF-8
//! layers  u32 count L, then L + 1 u32 widths (input, hidden.., output)
//! params  per layer: out*in f32 weights (row-major), then out f32 biases
//! crc32   u32 over every preceding byte
//! ```

use std::path::Path;

use crate::dataio::{RelationMode, RelationVocabulary};
use crate::features::FeatureSchema;
use crate::srm::{DenseLayer, MlpParams};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"RGSM";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    put_str(&mut out, params.schema.id());
    out.push(match params.vocabulary.mode {
        RelationMode::Multiclass => 0,
        RelationMode::Multilabel => 1,
    });
    out.extend_from_slice(&(params.vocabulary.len() as u32).to_le_bytes());
    for name in &params.vocabulary.names {
        put_str(&mut out, name);
    }
    let dims = params.dims();
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in params.iter_params() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptModel("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptModel("invalid UTF-8".into()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpParams> {
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::CorruptModel("missing model header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptModel("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let schema_id = r.string()?;
    let schema = FeatureSchema::from_id(&schema_id)
        .ok_or_else(|| Error::CorruptModel(format!("unknown feature schema `{schema_id}`")))?;
    let mode = match r.take(1)?[0] {
        0 => RelationMode::Multiclass,
        1 => RelationMode::Multilabel,
        m => return Err(Error::CorruptModel(format!("unknown mode byte {m}"))),
    };
    let n_names = r.u32()? as usize;
    let names = (0..n_names).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocabulary = RelationVocabulary::new(names, mode).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::CorruptModel(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..=n_layers).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let count = in_dim
            .checked_mul(out_dim)
            .filter(|&c| c.saturating_mul(4) <= body.len())
            .ok_or_else(|| Error::CorruptModel("layer shape exceeds file size".into()))?;
        let weights = (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let bias = (0..out_dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        layers.push(DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
        });
    }
    if r.pos != body.len() {
        return Err(Error::CorruptModel("trailing bytes after parameters".into()));
    }
    let params = MlpParams {
        layers,
        schema,
        vocabulary,
    };
    params.validate().map_err(|e| Error::CorruptModel(e.to_string()))?;
    Ok(params)
}

pub fn save_model(params: &MlpParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, model_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MlpParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use crate::srm::forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MlpParams::glorot(
            &[30, 16, 8, 6],
            FeatureSchema::Geom3d,
            RelationVocabulary::six_directional(),
            &mut rng,
        )
        .unwrap();
        p.iter_params_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        p.quantize_f32();
        p
    }

    #[test]
    fn roundtrip_is_exact() {
        let p = model();
        let q = model_from_bytes(&model_to_bytes(&p)).unwrap();
        assert_eq!(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = FeatureVector {
                values: (0..30).map(|_| rng.random_range(-2.0..2.0)).collect(),
                schema: FeatureSchema::Geom3d,
            };
            let a = forward(&p, &x).unwrap().probs;
            let b = forward(&q, &x).unwrap().probs;
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = model_to_bytes(&model());
        for cut in [3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(model_from_bytes(&bytes[..cut]), Err(Error::CorruptModel(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = model_to_bytes(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::CorruptModel(_))));
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = model_to_bytes(&model());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(model_from_bytes(&bytes), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn schema_mismatch_after_load() {
        let q = model_from_bytes(&model_to_bytes(&model())).unwrap();
        let x2d = FeatureVector {
            values: vec![0.0; 8],
            schema: FeatureSchema::Geom2d,
        };
        assert!(matches!(forward(&q, &x2d), Err(Error::SchemaMismatch { .. })));
    }
}
