//! Model weight files.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! "AQPM"            4-byte magic
//! u32               format version
//! u32               layer count L
//! L x { u32 rank R, R x u32 extent }
//! f64 * sum(prod(extents))   parameter payload, storage order
//! ```
//!
//! Training metadata goes to a sibling `.json` file next to the weights.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{architecture_fingerprint, FEATURE_EPSILON};
use super::PredictorModel;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::spectral::StftConfig;

pub const MAGIC: &[u8; 4] = b"AQPM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub corpus_id: String,
}

/// The JSON written beside a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSidecar {
    pub format_version: u32,
    pub fingerprint: Vec<Vec<usize>>,
    pub stft: StftConfig,
    pub feature_epsilon: f64,
    pub training: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub format_version: u32,
    pub fingerprint: Vec<Vec<usize>>,
    pub payload: Vec<f64>,
    pub metadata: Option<TrainingMetadata>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_bundle(model: &PredictorModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in model.params().iter().flat_map(|p| p.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::BundleParse(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<WeightBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BundleParse("bad magic, not an AQPM weight file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::BundleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let layers = r.u32("layer count")? as usize;
    if layers > 1024 {
        return Err(Error::BundleParse(format!("implausible layer count {layers}")));
    }
    let mut fingerprint = Vec::with_capacity(layers);
    let mut total = 0usize;
    for i in 0..layers {
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::BundleParse(format!("layer {i} has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        total = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| Error::BundleParse("parameter count overflows".into()))?;
        fingerprint.push(shape);
    }
    let payload_bytes = r.take(
        total
            .checked_mul(8)
            .ok_or_else(|| Error::BundleParse("payload size overflows".into()))?,
        "payload",
    )?;
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::BundleParse(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(WeightBundle {
        format_version: version,
        fingerprint,
        payload,
        metadata: None,
    })
}

impl WeightBundle {
    pub fn into_model(self) -> Result<PredictorModel> {
        let expected = architecture_fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint(format!(
                "bundle layers {:?} do not match architecture {:?}",
                self.fingerprint, expected
            )));
        }
        let mut params = Vec::with_capacity(expected.len());
        let mut offset = 0;
        for shape in expected {
            let n: usize = shape.iter().product();
            params.push(Tensor::new(shape, self.payload[offset..offset + n].to_vec())?);
            offset += n;
        }
        PredictorModel::from_params(params)
    }
}

pub fn save_model(model: &PredictorModel, metadata: &TrainingMetadata, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bundle(model)).map_err(|e| Error::io(path, e))?;
    let sidecar = BundleSidecar {
        format_version: FORMAT_VERSION,
        fingerprint: model.fingerprint(),
        stft: model.stft_config(),
        feature_epsilon: FEATURE_EPSILON,
        training: metadata.clone(),
    };
    let json_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(json_path, e))
}

/// Reads a weight file and, when present, its metadata sidecar.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bundle = decode_bundle(&bytes)?;
    let json_path = sidecar_path(path);
    if json_path.exists() {
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: BundleSidecar = serde_json::from_str(&text)?;
        bundle.metadata = Some(sidecar.training);
    }
    Ok(bundle)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorModel> {
    load_bundle(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Waveform;

    #[test]
    fn round_trip_predicts_bitwise() {
        let model = PredictorModel::init(11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.aqpm");
        let meta = TrainingMetadata {
            seed: 11,
            epochs: 0,
            corpus_id: "unit".into(),
        };
        save_model(&model, &meta, &path).unwrap();
        let bundle = load_bundle(&path).unwrap();
        assert_eq!(bundle.metadata.as_ref(), Some(&meta));
        let loaded = bundle.into_model().unwrap();
        let x = Waveform::new((0..1024).map(|i| (i as f64 * 0.05).sin()).collect(), 16_000).unwrap();
        let a = model.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
        assert_eq!(model.weights_digest(), loaded.weights_digest());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let bytes = encode_bundle(&PredictorModel::init(0).unwrap());
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_bundle(&bytes[..cut]), Err(Error::BundleParse(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode_bundle(&PredictorModel::init(0).unwrap());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_bundle(&bytes),
            Err(Error::BundleVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn mismatched_architecture_names_the_fingerprint() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&2.5f64.to_le_bytes());
        let bundle = decode_bundle(&bytes).unwrap();
        let err = bundle.into_model().unwrap_err();
        assert!(matches!(err, Error::Fingerprint(_)));
        assert!(err.to_string().contains("fingerprint"));
    }
}
