//! Single-file weight container.
//!
//! Layout: 8-byte little-endian manifest length, UTF-8 JSON manifest, then
//! raw little-endian f32 tensors in row-major order at the byte offsets the
//! manifest declares. Save/load round-trips are bit-exact; the container
//! checksum doubles as the model fingerprint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::{LayerWeights, MicroModel, ModelConfig, Weights};
use crate::tokenizer::{BOS_ID, EOS_ID, PAD_ID};

pub const CONTAINER_FORMAT_VERSION: u32 = 1;
const CONTAINER_MAGIC: &str = "DSWT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor payload region.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightManifest {
    pub magic: String,
    pub format_version: u32,
    pub config: ModelConfig,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Canonical tensor order: embeddings, per-layer attention then MLP
/// parameters, final norm, output head.
fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let dff = config.d_ff;
    let v = config.vocab_size;
    let mut shapes = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        let p = format!("layers.{l}");
        shapes.extend([
            (format!("{p}.ln1.g"), vec![d]),
            (format!("{p}.ln1.b"), vec![d]),
            (format!("{p}.attn.wq"), vec![d, d]),
            (format!("{p}.attn.bq"), vec![d]),
            (format!("{p}.attn.wk"), vec![d, d]),
            (format!("{p}.attn.bk"), vec![d]),
            (format!("{p}.attn.wv"), vec![d, d]),
            (format!("{p}.attn.bv"), vec![d]),
            (format!("{p}.attn.wo"), vec![d, d]),
            (format!("{p}.attn.bo"), vec![d]),
            (format!("{p}.ln2.g"), vec![d]),
            (format!("{p}.ln2.b"), vec![d]),
            (format!("{p}.mlp.w1"), vec![dff, d]),
            (format!("{p}.mlp.b1"), vec![dff]),
            (format!("{p}.mlp.w2"), vec![d, dff]),
            (format!("{p}.mlp.b2"), vec![d]),
        ]);
    }
    shapes.push(("ln_f.g".to_string(), vec![d]));
    shapes.push(("ln_f.b".to_string(), vec![d]));
    shapes.push(("head.w".to_string(), vec![v, d]));
    shapes
}

fn tensor_data(weights: &Weights) -> Vec<&[f32]> {
    let mut data: Vec<&[f32]> = vec![&weights.tok_emb, &weights.pos_emb];
    for l in &weights.layers {
        data.extend([
            l.ln1_g.as_slice(),
            l.ln1_b.as_slice(),
            l.w_q.as_slice(),
            l.b_q.as_slice(),
            l.w_k.as_slice(),
            l.b_k.as_slice(),
            l.w_v.as_slice(),
            l.b_v.as_slice(),
            l.w_o.as_slice(),
            l.b_o.as_slice(),
            l.ln2_g.as_slice(),
            l.ln2_b.as_slice(),
            l.w_fc1.as_slice(),
            l.b_fc1.as_slice(),
            l.w_fc2.as_slice(),
            l.b_fc2.as_slice(),
        ]);
    }
    data.push(&weights.lnf_g);
    data.push(&weights.lnf_b);
    data.push(&weights.head);
    data
}

pub(crate) fn container_bytes(config: &ModelConfig, weights: &Weights) -> Vec<u8> {
    let shapes = tensor_shapes(config);
    let data = tensor_data(weights);
    debug_assert_eq!(shapes.len(), data.len());

    let mut tensors = Vec::with_capacity(shapes.len());
    let mut offset = 0u64;
    for ((name, shape), values) in shapes.iter().zip(&data) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += (values.len() * 4) as u64;
    }

    let manifest = WeightManifest {
        magic: CONTAINER_MAGIC.to_string(),
        format_version: CONTAINER_FORMAT_VERSION,
        config: config.clone(),
        bos_id: BOS_ID,
        eos_id: EOS_ID,
        pad_id: PAD_ID,
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");

    let mut bytes = Vec::with_capacity(8 + manifest_json.len() + offset as usize);
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    for values in data {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub(crate) fn assemble_model(config: ModelConfig, weights: Weights) -> MicroModel {
    let bytes = container_bytes(&config, &weights);
    let fingerprint = hex::encode(Sha256::digest(&bytes));
    MicroModel::new_with_fingerprint(config, weights, fingerprint)
}

impl MicroModel {
    /// Serialize the model into the container format.
    pub fn to_container_bytes(&self) -> Vec<u8> {
        container_bytes(self.config(), &self.weights)
    }
}

/// Write the model's weight container to `path`.
pub fn save_weights(model: &MicroModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_container_bytes())?;
    Ok(())
}

/// Load a model from a weight container, validating the manifest before any
/// tensor is materialized.
pub fn load_weights(path: &Path) -> Result<MicroModel> {
    let bytes = fs::read(path)?;
    load_from_bytes(&bytes)
}

pub fn load_from_bytes(bytes: &[u8]) -> Result<MicroModel> {
    if bytes.len() < 8 {
        return Err(CoreError::Format("container shorter than header".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(CoreError::Format("truncated manifest".into()));
    }
    let manifest: WeightManifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| CoreError::Format(format!("manifest is not valid JSON: {e}")))?;
    if manifest.magic != CONTAINER_MAGIC {
        return Err(CoreError::Format(format!("bad magic {:?}", manifest.magic)));
    }
    if manifest.format_version != CONTAINER_FORMAT_VERSION {
        return Err(CoreError::Version(manifest.format_version));
    }
    manifest
        .config
        .validate()
        .map_err(|e| CoreError::Format(format!("invalid config in manifest: {e}")))?;

    // The manifest must declare exactly the canonical tensor list with
    // contiguous offsets, and the declared sizes must match the file length.
    let expected = tensor_shapes(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(CoreError::Format(format!(
            "expected {} tensors, manifest declares {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(CoreError::Format(format!(
                "tensor {:?} where {name:?} was expected",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(CoreError::Format(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(CoreError::Format(format!(
                "tensor {name:?} at offset {}, expected {offset}",
                entry.offset
            )));
        }
        offset += (shape.iter().product::<usize>() * 4) as u64;
    }
    let payload = &bytes[8 + manifest_len..];
    if payload.len() as u64 != offset {
        return Err(CoreError::Checksum(format!(
            "payload is {} bytes, manifest declares {offset}",
            payload.len()
        )));
    }

    let mut cursor = 0usize;
    let mut read_tensor = |len: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(f32::from_le_bytes(
                payload[cursor..cursor + 4].try_into().unwrap(),
            ));
            cursor += 4;
        }
        out
    };

    let config = manifest.config.clone();
    let d = config.d_model;
    let dff = config.d_ff;
    let v = config.vocab_size;
    let tok_emb = read_tensor(v * d);
    let pos_emb = read_tensor(config.max_seq_len * d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_g: read_tensor(d),
            ln1_b: read_tensor(d),
            w_q: read_tensor(d * d),
            b_q: read_tensor(d),
            w_k: read_tensor(d * d),
            b_k: read_tensor(d),
            w_v: read_tensor(d * d),
            b_v: read_tensor(d),
            w_o: read_tensor(d * d),
            b_o: read_tensor(d),
            ln2_g: read_tensor(d),
            ln2_b: read_tensor(d),
            w_fc1: read_tensor(dff * d),
            b_fc1: read_tensor(dff),
            w_fc2: read_tensor(d * dff),
            b_fc2: read_tensor(d),
        })
        .collect();
    let lnf_g = read_tensor(d);
    let lnf_b = read_tensor(d);
    let head = read_tensor(v * d);

    let weights = Weights {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        head,
    };
    let fingerprint = hex::encode(Sha256::digest(bytes));
    Ok(MicroModel::new_with_fingerprint(
        config,
        weights,
        fingerprint,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_micro_model, Backend};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 259,
            max_seq_len: 48,
            seed: 7,
        }
    }

    #[test]
    fn round_trip_preserves_forward_bits() {
        let model = init_micro_model(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path).unwrap();

        assert_eq!(model.fingerprint(), loaded.fingerprint());
        let tokens: Vec<u32> = b"roundtrip".iter().map(|&b| b as u32).collect();
        let a = model.forward(&tokens, None).unwrap();
        let b = loaded.forward(&tokens, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn resaved_model_keeps_fingerprint() {
        let model = init_micro_model(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        let path2 = dir.path().join("model2.bin");
        save_weights(&loaded, &path2).unwrap();
        let reloaded = load_weights(&path2).unwrap();
        assert_eq!(model.fingerprint(), reloaded.fingerprint());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = init_micro_model(&tiny_config()).unwrap();
        let mut bytes = model.to_container_bytes();
        bytes.truncate(bytes.len() - 100);
        assert!(matches!(
            load_from_bytes(&bytes),
            Err(CoreError::Checksum(_))
        ));
        assert!(matches!(
            load_from_bytes(&bytes[..4]),
            Err(CoreError::Format(_))
        ));
    }

    #[test]
    fn edited_shape_is_rejected_before_tensors_load() {
        let model = init_micro_model(&tiny_config()).unwrap();
        let bytes = model.to_container_bytes();
        let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest_str = std::str::from_utf8(&bytes[8..8 + manifest_len]).unwrap();
        let edited = manifest_str.replacen("[16,16]", "[16,17]", 1);
        assert_ne!(edited, manifest_str);
        let mut out = Vec::new();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[8 + manifest_len..]);
        assert!(matches!(load_from_bytes(&out), Err(CoreError::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let model = init_micro_model(&tiny_config()).unwrap();
        let bytes = model.to_container_bytes();
        let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest_str = std::str::from_utf8(&bytes[8..8 + manifest_len]).unwrap();

        let rebuild = |edited: String| {
            let mut out = Vec::new();
            out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
            out.extend_from_slice(edited.as_bytes());
            out.extend_from_slice(&bytes[8 + manifest_len..]);
            out
        };

        let bad_magic = rebuild(manifest_str.replacen("\"DSWT\"", "\"NOPE\"", 1));
        assert!(matches!(
            load_from_bytes(&bad_magic),
            Err(CoreError::Format(_))
        ));

        let bad_version =
            rebuild(manifest_str.replacen("\"format_version\":1", "\"format_version\":9", 1));
        assert!(matches!(
            load_from_bytes(&bad_version),
            Err(CoreError::Version(9))
        ));
    }
}
