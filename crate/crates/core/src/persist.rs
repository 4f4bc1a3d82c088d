//! Model container: `RSVMODEL` magic, little-endian header length, JSON
//! header (format version, network config, encoding context, training
//! settings, tensor table), tensor payloads as f64 LE in declared order and
//! a trailing SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::preprocess::EncodingContext;

pub const MAGIC: &[u8; 8] = b"RSVMODEL";
pub const FORMAT_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: String,
    network: NetworkConfig,
    encoding: EncodingContext,
    alpha: f64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// A trained network together with everything needed to reproduce its
/// inputs.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub network: Network,
    pub encoding: EncodingContext,
    pub alpha: f64,
    pub seed: u64,
}

pub fn to_bytes(model: &SavedModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION.into(),
        network: model.network.config.clone(),
        encoding: model.encoding.clone(),
        alpha: model.alpha,
        seed: model.seed,
        tensors: model
            .network
            .store
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.network.store.parameter_count() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.network.store.iter() {
        for v in &p.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a model file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let major = header.format_version.split('.').next().unwrap_or_default();
    if major != FORMAT_VERSION.split('.').next().unwrap() {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let mut data = &body[16 + len..];
    let mut store = ParameterStore::new();
    for t in &header.tensors {
        let count = t.rows * t.cols;
        if data.len() < 8 * count {
            return Err(bad(format!("truncated tensor {}", t.name)));
        }
        let values = data[..8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * count..];
        store.add(t.name.clone(), Tensor::new(t.rows, t.cols, values)?)?;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(SavedModel {
        network: Network::from_store(header.network, store)?,
        encoding: header.encoding,
        alpha: header.alpha,
        seed: header.seed,
    })
}

pub fn save(model: &SavedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SavedModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::PredictMode;
    use crate::preprocess::{encode, EncodingOptions};
    use crate::synthgen::{generate, GeneratorConfig};

    fn model() -> (SavedModel, crate::domain::Portfolio) {
        let (p, _) = generate(&GeneratorConfig::desk(60.0, 2)).unwrap();
        let encoding = EncodingContext::fit(&p.schema, &p.files, p.n, EncodingOptions::default()).unwrap();
        let network = Network::new(NetworkConfig::for_encoding(&encoding, 4, 6, 3)).unwrap();
        (SavedModel { network, encoding, alpha: 0.2, seed: 9 }, p)
    }

    #[test]
    fn round_trip_reproduces_predictions_bitwise() {
        let (m, p) = model();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.network.store, m.network.store);
        assert_eq!(back.encoding, m.encoding);
        let batch = encode(&p.files, &m.encoding);
        let a = m.network.predict_sequence(&batch, &PredictMode::Inference).unwrap();
        let b = back.network.predict_sequence(&batch, &PredictMode::Inference).unwrap();
        assert_eq!(a.p_hat, b.p_hat);
        assert_eq!(a.y_star, b.y_star);
    }

    #[test]
    fn corruption_is_detected() {
        let (m, _) = model();
        let mut bytes = to_bytes(&m).unwrap();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::ModelFormat(e)) if e.contains("checksum")));
        assert!(from_bytes(b"nonsense").is_err());
    }
}
