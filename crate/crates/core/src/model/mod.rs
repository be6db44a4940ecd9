//! Decoder-only model backend: the contract plus the bundled deterministic
//! micro-transformer.
//!
//! The backend exposes per-layer residual-stream states (each transformer
//! block's output) and an additive injection hook `h~ = h + lambda * v`
//! applied to one layer's output before it feeds the next block.

mod forward;
mod io;

pub use forward::softmax_in_place;
pub use io::{
    load_from_bytes, load_weights, save_weights, WeightManifest, CONTAINER_FORMAT_VERSION,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tokenizer::{ByteTokenizer, Tokenizer, BYTE_VOCAB_SIZE, EOS_ID};

/// Structural hyperparameters plus the initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: BYTE_VOCAB_SIZE,
            max_seq_len: 2560,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(CoreError::Config(
                "n_layers, d_model, n_heads and d_ff must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(CoreError::Config("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(CoreError::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Where an injection hook applies along the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionPolicy {
    /// Inject only at positions at or beyond the prompt length, i.e. at
    /// generated tokens. Under plain `forward` the whole input counts as
    /// prompt, so this policy injects nowhere there.
    GeneratedOnly,
    /// Inject at every position of the sequence.
    AllPositions,
}

/// Additive residual-stream intervention at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionHook {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub lambda: f64,
    pub policy: PositionPolicy,
}

impl InjectionHook {
    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if self.layer >= n_layers {
            return Err(CoreError::Config(format!(
                "hook layer {} out of range (model has {n_layers} layers)",
                self.layer
            )));
        }
        if self.vector.len() != d_model {
            return Err(CoreError::Shape {
                expected: d_model,
                got: self.vector.len(),
            });
        }
        Ok(())
    }
}

/// Per-layer, per-position residual-stream activations from one forward pass.
///
/// Layer `l` holds block `l`'s output (post second residual add), after any
/// hook injection at that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    data: Vec<f32>,
}

impl HiddenStates {
    pub(crate) fn zeros(n_layers: usize, seq_len: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            seq_len,
            d_model,
            data: vec![0.0; n_layers * seq_len * d_model],
        }
    }

    pub fn at(&self, layer: usize, position: usize) -> &[f32] {
        let start = (layer * self.seq_len + position) * self.d_model;
        &self.data[start..start + self.d_model]
    }

    pub(crate) fn set(&mut self, layer: usize, position: usize, values: &[f32]) {
        let start = (layer * self.seq_len + position) * self.d_model;
        self.data[start..start + self.d_model].copy_from_slice(values);
    }
}

/// Logits and residual-stream states from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of `vocab_size` logits per input position.
    pub logits: Vec<Vec<f32>>,
    pub states: HiddenStates,
}

/// Contract every model backend fulfils: deterministic forward passes with
/// residual-stream access, hookable injection, and greedy decoding.
///
/// A backend is immutable once constructed and safe to share across threads;
/// each generation owns private decode state internally.
pub trait Backend: Sync {
    fn n_layers(&self) -> usize;
    fn d_model(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Checksum of the serialized weight container.
    fn fingerprint(&self) -> &str;
    fn tokenizer(&self) -> &dyn Tokenizer;
    /// Token id that terminates greedy decoding, if the backend has one.
    fn eos_id(&self) -> Option<u32>;
    fn forward(&self, tokens: &[u32], hook: Option<&InjectionHook>) -> Result<ForwardOutput>;
    fn greedy_generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        hook: Option<&InjectionHook>,
    ) -> Result<Vec<u32>>;
}

// ---------------------------------------------------------------------------
// Micro model weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub w_q: Vec<f32>,
    pub b_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub b_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub b_v: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_fc1: Vec<f32>,
    pub b_fc1: Vec<f32>,
    pub w_fc2: Vec<f32>,
    pub b_fc2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Weights {
    pub tok_emb: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f32>,
    pub lnf_b: Vec<f32>,
    pub head: Vec<f32>,
}

/// The bundled deterministic micro-transformer.
///
/// Architecture: token + learned positional embeddings; per block pre-norm
/// multi-head causal self-attention with residual add, then pre-norm
/// two-layer GELU MLP with residual add; final norm; untied output head.
/// All arithmetic is scalar f32 in fixed order.
#[derive(Debug, Clone)]
pub struct MicroModel {
    config: ModelConfig,
    pub(crate) weights: Weights,
    fingerprint: String,
    tokenizer: ByteTokenizer,
}

impl MicroModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Draw a uniform value in `(-scale, scale)` from the top 24 bits of the
/// generator's next u32. This mapping, not the crate's float distributions,
/// defines the initialization stream so it stays stable across platforms.
fn uniform_symmetric(rng: &mut ChaCha8Rng, scale: f32) -> f32 {
    let u = (rng.next_u32() >> 8) as f32 / 16_777_216.0;
    (2.0 * u - 1.0) * scale
}

fn fill_uniform(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| uniform_symmetric(rng, scale)).collect()
}

/// Build a micro model with weights derived deterministically from
/// `config.seed`.
///
/// Generator: ChaCha8 seeded with the config seed, consumed in row-major
/// order by (1) token embedding, (2) positional embedding, (3) per layer the
/// attention projections q, k, v, o then the MLP weights fc1, fc2, and
/// (4) the output head. Norm scales start at one, norm shifts and all biases
/// at zero, consuming no generator output. Weight scales are
/// `1/sqrt(fan_in)`; embeddings and head use `1/sqrt(d_model)`.
pub fn init_micro_model(config: &ModelConfig) -> Result<MicroModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let dff = config.d_ff;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let inv_sqrt_dff = 1.0 / (dff as f32).sqrt();

    let tok_emb = fill_uniform(&mut rng, config.vocab_size * d, inv_sqrt_d);
    let pos_emb = fill_uniform(&mut rng, config.max_seq_len * d, inv_sqrt_d);

    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            w_q: fill_uniform(&mut rng, d * d, inv_sqrt_d),
            b_q: vec![0.0; d],
            w_k: fill_uniform(&mut rng, d * d, inv_sqrt_d),
            b_k: vec![0.0; d],
            w_v: fill_uniform(&mut rng, d * d, inv_sqrt_d),
            b_v: vec![0.0; d],
            w_o: fill_uniform(&mut rng, d * d, inv_sqrt_d),
            b_o: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w_fc1: fill_uniform(&mut rng, dff * d, inv_sqrt_d),
            b_fc1: vec![0.0; dff],
            w_fc2: fill_uniform(&mut rng, d * dff, inv_sqrt_dff),
            b_fc2: vec![0.0; d],
        })
        .collect();

    let lnf_g = vec![1.0; d];
    let lnf_b = vec![0.0; d];
    let head = fill_uniform(&mut rng, config.vocab_size * d, inv_sqrt_d);

    let weights = Weights {
        tok_emb,
        pos_emb,
        layers,
        lnf_g,
        lnf_b,
        head,
    };
    Ok(io::assemble_model(config.clone(), weights))
}

impl Backend for MicroModel {
    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn eos_id(&self) -> Option<u32> {
        (self.config.vocab_size > EOS_ID as usize).then_some(EOS_ID)
    }

    fn forward(&self, tokens: &[u32], hook: Option<&InjectionHook>) -> Result<ForwardOutput> {
        forward::forward(self, tokens, hook)
    }

    fn greedy_generate(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        hook: Option<&InjectionHook>,
    ) -> Result<Vec<u32>> {
        forward::greedy_generate(self, prompt, max_new_tokens, hook, true)
    }
}

impl MicroModel {
    /// Greedy decoding that re-encodes the full sequence at every step
    /// instead of using the KV cache. Exists to check cache correctness:
    /// outputs are bit-identical to the cached path.
    pub fn greedy_generate_uncached(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        hook: Option<&InjectionHook>,
    ) -> Result<Vec<u32>> {
        forward::greedy_generate(self, prompt, max_new_tokens, hook, false)
    }

    pub(crate) fn new_with_fingerprint(
        config: ModelConfig,
        weights: Weights,
        fingerprint: String,
    ) -> Self {
        Self {
            config,
            weights,
            fingerprint,
            tokenizer: ByteTokenizer,
        }
    }
}
