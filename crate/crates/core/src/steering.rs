//! Steering vectors: extraction from contrastive pairs, hook packaging, and
//! persistence.
//!
//! The vector at layer `l` is the mean over pairs of the difference between
//! the final-token residual-stream states of the dense (positive) and sparse
//! (negative) traces, encoded with no hooks active. Per-pair states may be
//! computed concurrently; the reduction runs sequentially in pair-index
//! order so the floating-point sum is reproducible.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Backend, InjectionHook, PositionPolicy};
use crate::parallel::map_ordered;
use crate::prompts;
use crate::trace::ReasoningTrace;

/// Provenance of a contrastive pair's positive trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewriterTag {
    #[serde(rename = "rule-based")]
    RuleBased,
    #[serde(rename = "external")]
    External,
    #[serde(rename = "random-compression")]
    RandomCompression,
}

impl fmt::Display for RewriterTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RewriterTag::RuleBased => "rule-based",
            RewriterTag::External => "external",
            RewriterTag::RandomCompression => "random-compression",
        };
        f.write_str(s)
    }
}

/// A dense positive and sparse negative trace for the same question.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub question: String,
    pub positive: ReasoningTrace,
    pub negative: ReasoningTrace,
    pub rewriter_tag: RewriterTag,
}

impl ContrastivePair {
    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(CoreError::EmptyTrace);
        }
        if self.positive.question != self.negative.question {
            return Err(CoreError::Domain(
                "positive and negative traces answer different questions".into(),
            ));
        }
        Ok(())
    }
}

/// How a trace is framed when encoding states for extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Encode behind the full chain-of-thought prompt (the inference-time
    /// framing); disable to condition on the bare question.
    pub use_cot_template: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            use_cot_template: true,
        }
    }
}

fn extraction_prompt(question: &str, opts: ExtractOptions) -> String {
    if opts.use_cot_template {
        prompts::cot_prompt(question)
    } else {
        question.to_string()
    }
}

/// Residual-stream state of the last trace token at `layer`, with the trace
/// encoded behind its question prompt and no hooks active.
pub fn final_token_state(
    model: &impl Backend,
    question: &str,
    trace: &ReasoningTrace,
    layer: usize,
    opts: ExtractOptions,
) -> Result<Vec<f32>> {
    if trace.token_ids.is_empty() {
        return Err(CoreError::EmptyTrace);
    }
    if layer >= model.n_layers() {
        return Err(CoreError::Config(format!(
            "layer {layer} out of range (model has {} layers)",
            model.n_layers()
        )));
    }
    let mut tokens = model
        .tokenizer()
        .tokenize(&extraction_prompt(question, opts));
    tokens.extend_from_slice(&trace.token_ids);
    if tokens.len() > model.max_seq_len() {
        return Err(CoreError::Length {
            got: tokens.len(),
            max: model.max_seq_len(),
        });
    }
    let out = model.forward(&tokens, None)?;
    Ok(out.states.at(layer, tokens.len() - 1).to_vec())
}

/// A persisted steering direction for one layer of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub layer: usize,
    pub values: Vec<f32>,
    pub n_pairs: usize,
    pub model_fingerprint: String,
    pub created_from: RewriterTag,
}

/// Mean contrastive difference of final-token states over `pairs` at `layer`.
///
/// States are accumulated in f64 and summed in ascending pair order, so the
/// result is bit-reproducible and invariant under duplicating the pair set.
pub fn extract_vector(
    model: &impl Backend,
    pairs: &[ContrastivePair],
    layer: usize,
    opts: ExtractOptions,
) -> Result<SteeringVector> {
    if pairs.is_empty() {
        return Err(CoreError::EmptySet("no contrastive pairs".into()));
    }
    let states: Vec<Result<(Vec<f32>, Vec<f32>)>> = map_ordered(pairs, |pair| {
        pair.validate()?;
        let pos = final_token_state(model, &pair.question, &pair.positive, layer, opts)?;
        let neg = final_token_state(model, &pair.question, &pair.negative, layer, opts)?;
        Ok((pos, neg))
    });

    let d = model.d_model();
    let mut sum = vec![0.0f64; d];
    for (index, state) in states.into_iter().enumerate() {
        let (pos, neg) = state.map_err(|e| CoreError::Pair {
            index,
            source: Box::new(e),
        })?;
        for i in 0..d {
            sum[i] += f64::from(pos[i]) - f64::from(neg[i]);
        }
    }
    let n = pairs.len() as f64;
    let values: Vec<f32> = sum.iter().map(|&s| (s / n) as f32).collect();
    Ok(SteeringVector {
        layer,
        values,
        n_pairs: pairs.len(),
        model_fingerprint: model.fingerprint().to_string(),
        created_from: pairs[0].rewriter_tag,
    })
}

/// Package a vector as an injection hook `h~ = h + lambda * v`.
///
/// The vector must have been extracted from the active model's weights;
/// `force` overrides the fingerprint check for deliberate cross-checkpoint
/// ablations.
pub fn make_hook(
    vector: &SteeringVector,
    model: &impl Backend,
    lambda: f64,
    policy: PositionPolicy,
    force: bool,
) -> Result<InjectionHook> {
    if !force && vector.model_fingerprint != model.fingerprint() {
        return Err(CoreError::FingerprintMismatch {
            vector: vector.model_fingerprint.clone(),
            model: model.fingerprint().to_string(),
        });
    }
    let hook = InjectionHook {
        layer: vector.layer,
        vector: vector.values.clone(),
        lambda,
        policy,
    };
    hook.validate(model.n_layers(), model.d_model())?;
    Ok(hook)
}

// ---------------------------------------------------------------------------
// Vector file format
// ---------------------------------------------------------------------------

pub const VECTOR_FORMAT_VERSION: u32 = 1;
const VECTOR_MAGIC: &str = "DSVC";

#[derive(Debug, Serialize, Deserialize)]
struct VectorManifest {
    magic: String,
    format_version: u32,
    layer: usize,
    d_model: usize,
    n_pairs: usize,
    model_fingerprint: String,
    created_from: RewriterTag,
}

/// Serialize: 8-byte little-endian manifest length, JSON manifest, then the
/// vector values as little-endian f32. Lossless round trip.
pub fn vector_to_bytes(vector: &SteeringVector) -> Vec<u8> {
    let manifest = VectorManifest {
        magic: VECTOR_MAGIC.to_string(),
        format_version: VECTOR_FORMAT_VERSION,
        layer: vector.layer,
        d_model: vector.values.len(),
        n_pairs: vector.n_pairs,
        model_fingerprint: vector.model_fingerprint.clone(),
        created_from: vector.created_from,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut bytes = Vec::with_capacity(8 + manifest_json.len() + vector.values.len() * 4);
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    for v in &vector.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn vector_from_bytes(bytes: &[u8]) -> Result<SteeringVector> {
    if bytes.len() < 8 {
        return Err(CoreError::Format("vector file shorter than header".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(CoreError::Format("truncated vector manifest".into()));
    }
    let manifest: VectorManifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| CoreError::Format(format!("vector manifest is not valid JSON: {e}")))?;
    if manifest.magic != VECTOR_MAGIC {
        return Err(CoreError::Format(format!("bad magic {:?}", manifest.magic)));
    }
    if manifest.format_version != VECTOR_FORMAT_VERSION {
        return Err(CoreError::Version(manifest.format_version));
    }
    let payload = &bytes[8 + manifest_len..];
    if payload.len() != manifest.d_model * 4 {
        return Err(CoreError::Format(format!(
            "vector payload is {} bytes, manifest declares d_model {} ({} bytes)",
            payload.len(),
            manifest.d_model,
            manifest.d_model * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SteeringVector {
        layer: manifest.layer,
        values,
        n_pairs: manifest.n_pairs,
        model_fingerprint: manifest.model_fingerprint,
        created_from: manifest.created_from,
    })
}

pub fn save_vector(vector: &SteeringVector, path: &Path) -> Result<()> {
    fs::write(path, vector_to_bytes(vector))?;
    Ok(())
}

pub fn load_vector(path: &Path) -> Result<SteeringVector> {
    vector_from_bytes(&fs::read(path)?)
}
