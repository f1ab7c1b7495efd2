//! `RLAC` checkpoint files.
//!
//! Layout: magic `RLAC`, format version (u32 LE), manifest length in bytes
//! (u32 LE), UTF-8 JSON manifest, then the raw little-endian tensor payloads.
//! Manifest offsets are relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{build, Model, ModelSpec};
use crate::tensor::{Scalar, Shape, Tensor};

use super::data::Normalization;

pub const MAGIC: &[u8; 4] = b"RLAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub dtype: String,
    pub shape: [usize; 4],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub normalization: Option<Normalization>,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serialise every parameter buffer and BN running statistic of `model`.
pub fn to_bytes<T: Scalar>(
    model: &Model<T>,
    normalization: Option<Normalization>,
    config: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind, t: &Tensor<T>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            dtype: T::DTYPE.to_string(),
            shape: t.shape().0,
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    };
    for p in model.store.params() {
        push(&p.name, TensorKind::Param, &p.value);
    }
    for s in model.store.states() {
        push(&s.name, TensorKind::State, &s.value);
    }
    let manifest = Manifest {
        spec: model.spec.clone(),
        normalization,
        config,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))
}

/// Manifest and payload slice of a checkpoint image.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not an RLAC file".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((manifest, &bytes[12 + len..]))
}

/// Rebuild the model described by the manifest and load every tensor.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, Manifest)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut model = build::<T>(&manifest.spec, 0)?;
    let mut loaded = 0;
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{} is {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let shape = Shape(e.shape);
        let end = e.offset + shape.numel() * T::BYTES;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload of {} is truncated", e.name)))?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(shape, data)?;
        let slot = match e.kind {
            TensorKind::Param => model.store.params_mut().iter_mut().find(|p| p.name == e.name).map(|p| &mut p.value),
            TensorKind::State => model.store.states_mut().iter_mut().find(|s| s.name == e.name).map(|s| &mut s.value),
        };
        let slot = slot.ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", e.name)))?;
        if slot.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{} has shape {shape}, model expects {}",
                e.name,
                slot.shape()
            )));
        }
        *slot = t;
        loaded += 1;
    }
    let expected = model.store.params().len() + model.store.states().len();
    if loaded != expected {
        return Err(Error::Checkpoint(format!("{loaded} tensors loaded, model has {expected}")));
    }
    Ok((model, manifest))
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    normalization: Option<Normalization>,
    config: serde_json::Value,
) -> Result<()> {
    fs::write(path, to_bytes(model, normalization, config)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, Manifest)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::RlaConfig;
    use crate::exec::Mode;
    use crate::model_zoo::{Aggregation, Family};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_exact() {
        let spec = ModelSpec::new(Family::Resnet110, Aggregation::Rla(RlaConfig::with_k(4))).with_blocks(1);
        let mut m = build::<f32>(&spec, 9).unwrap();
        let x = Tensor::randn(Shape::new(3, 3, 32, 32), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        m.forward(&x, Mode::Train).unwrap();
        let norm = Normalization::identity();
        let bytes = to_bytes(&m, Some(norm), serde_json::json!({"seed": 9})).unwrap();
        assert_eq!(&bytes[..4], b"RLAC");
        let (mut back, manifest) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(manifest.normalization, Some(norm));
        assert_eq!(manifest.config["seed"], 9);
        assert_eq!(
            back.forward(&x, Mode::Eval).unwrap().data(),
            m.forward(&x, Mode::Eval).unwrap().data()
        );
        assert!(from_bytes::<f64>(&bytes).is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
    }
}
