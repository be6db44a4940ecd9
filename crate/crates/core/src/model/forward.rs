//! The decode engine.
//!
//! One routine processes a single position against the accumulated per-layer
//! K/V state; the full forward pass, cached greedy decoding and uncached
//! greedy decoding all drive it, so cached and uncached outputs agree bit
//! for bit. All loops run in a fixed order with scalar f32 arithmetic.

use crate::error::{CoreError, Result};
use crate::model::{ForwardOutput, HiddenStates, InjectionHook, MicroModel, PositionPolicy};

const LN_EPS: f32 = 1e-5;

/// Numerically stable in-place softmax (max-subtracted). Rows sum to one
/// within float rounding.
pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gamma[i] + beta[i];
    }
}

/// y = W x with W stored row-major as [out][in].
fn linear_no_bias(w: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = 0.0f32;
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        *out_v = acc;
    }
}

/// y = W x + b with W stored row-major as [out][in].
fn linear(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    linear_no_bias(w, x, out);
    for (o, out_v) in out.iter_mut().enumerate() {
        *out_v += b[o];
    }
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Appended K/V rows for one layer; each row is d_model values.
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Private decode state for one sequence. Holds the KV cache and the
/// resolved injection boundary; never shared between generations.
pub(super) struct DecodeSession<'m> {
    model: &'m MicroModel,
    kv: Vec<LayerKv>,
    /// Positions >= this index receive the injection; `usize::MAX` disables it.
    inject_from: usize,
    hook: Option<&'m InjectionHook>,
    len: usize,
}

impl<'m> DecodeSession<'m> {
    /// `prompt_len` resolves the generated-only policy: injection starts at
    /// that position. Plain forward passes treat the whole input as prompt.
    pub(super) fn new(
        model: &'m MicroModel,
        hook: Option<&'m InjectionHook>,
        prompt_len_for_policy: usize,
    ) -> Result<Self> {
        if let Some(h) = hook {
            h.validate(model.config().n_layers, model.config().d_model)?;
        }
        let inject_from = match hook.map(|h| h.policy) {
            None => usize::MAX,
            Some(PositionPolicy::AllPositions) => 0,
            Some(PositionPolicy::GeneratedOnly) => prompt_len_for_policy,
        };
        let kv = (0..model.config().n_layers)
            .map(|_| LayerKv {
                k: Vec::new(),
                v: Vec::new(),
            })
            .collect();
        Ok(Self {
            model,
            kv,
            inject_from,
            hook,
            len: 0,
        })
    }

    /// Process one token at the next position; returns its logits row and
    /// optionally records per-layer block outputs into `states`.
    pub(super) fn advance(
        &mut self,
        token: u32,
        mut states: Option<&mut HiddenStates>,
    ) -> Result<Vec<f32>> {
        let cfg = self.model.config();
        let w = &self.model.weights;
        let pos = self.len;
        if pos >= cfg.max_seq_len {
            return Err(CoreError::Length {
                got: pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if (token as usize) >= cfg.vocab_size {
            return Err(CoreError::Domain(format!(
                "token id {token} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }

        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let d_head = cfg.head_dim();
        let t_idx = token as usize;

        let mut x = vec![0.0f32; d];
        for i in 0..d {
            x[i] = w.tok_emb[t_idx * d + i] + w.pos_emb[pos * d + i];
        }

        let mut normed = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut attn_ctx = vec![0.0f32; d];
        let mut attn_out = vec![0.0f32; d];
        let mut ff_hidden = vec![0.0f32; cfg.d_ff];
        let mut ff_out = vec![0.0f32; d];
        let scale = 1.0 / (d_head as f32).sqrt();

        for (layer_idx, lw) in w.layers.iter().enumerate() {
            // attention
            layer_norm(&x, &lw.ln1_g, &lw.ln1_b, &mut normed);
            linear(&lw.w_q, &lw.b_q, &normed, &mut q);
            let kv = &mut self.kv[layer_idx];
            let base = kv.k.len();
            kv.k.resize(base + d, 0.0);
            kv.v.resize(base + d, 0.0);
            linear(&lw.w_k, &lw.b_k, &normed, &mut kv.k[base..base + d]);
            linear(&lw.w_v, &lw.b_v, &normed, &mut kv.v[base..base + d]);

            for h in 0..n_heads {
                let q_h = &q[h * d_head..(h + 1) * d_head];
                let mut scores = vec![0.0f32; pos + 1];
                for (j, score) in scores.iter_mut().enumerate() {
                    let k_h = &kv.k[j * d + h * d_head..j * d + (h + 1) * d_head];
                    let mut dot = 0.0f32;
                    for i in 0..d_head {
                        dot += q_h[i] * k_h[i];
                    }
                    *score = dot * scale;
                }
                softmax_in_place(&mut scores);
                let ctx = &mut attn_ctx[h * d_head..(h + 1) * d_head];
                ctx.fill(0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let v_h = &kv.v[j * d + h * d_head..j * d + (h + 1) * d_head];
                    for i in 0..d_head {
                        ctx[i] += p * v_h[i];
                    }
                }
            }
            linear(&lw.w_o, &lw.b_o, &attn_ctx, &mut attn_out);
            for i in 0..d {
                x[i] += attn_out[i];
            }

            // MLP
            layer_norm(&x, &lw.ln2_g, &lw.ln2_b, &mut normed);
            linear(&lw.w_fc1, &lw.b_fc1, &normed, &mut ff_hidden);
            for v in ff_hidden.iter_mut() {
                *v = gelu(*v);
            }
            linear(&lw.w_fc2, &lw.b_fc2, &ff_hidden, &mut ff_out);
            for i in 0..d {
                x[i] += ff_out[i];
            }

            // Injection replaces this block's output before it feeds the
            // next block; the sum is taken in f64 so exactly one rounding
            // separates the injected state from h + lambda*v.
            if let Some(hook) = self.hook {
                if hook.layer == layer_idx && pos >= self.inject_from {
                    for i in 0..d {
                        x[i] = (f64::from(x[i]) + hook.lambda * f64::from(hook.vector[i])) as f32;
                    }
                }
            }

            if let Some(s) = states.as_mut() {
                s.set(layer_idx, pos, &x);
            }
        }

        layer_norm(&x, &w.lnf_g, &w.lnf_b, &mut normed);
        let mut logits = vec![0.0f32; cfg.vocab_size];
        linear_no_bias(&w.head, &normed, &mut logits);

        self.len += 1;
        Ok(logits)
    }
}

/// Index of the largest logit; ties break toward the lowest token id.
pub(crate) fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub(super) fn forward(
    model: &MicroModel,
    tokens: &[u32],
    hook: Option<&InjectionHook>,
) -> Result<ForwardOutput> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(CoreError::Domain(
            "forward over empty token sequence".into(),
        ));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(CoreError::Length {
            got: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut session = DecodeSession::new(model, hook, tokens.len())?;
    let mut states = HiddenStates::zeros(cfg.n_layers, tokens.len(), cfg.d_model);
    let mut logits = Vec::with_capacity(tokens.len());
    for &token in tokens {
        logits.push(session.advance(token, Some(&mut states))?);
    }
    Ok(ForwardOutput { logits, states })
}

pub(super) fn greedy_generate(
    model: &MicroModel,
    prompt: &[u32],
    max_new_tokens: usize,
    hook: Option<&InjectionHook>,
    use_cache: bool,
) -> Result<Vec<u32>> {
    let cfg = model.config();
    if prompt.is_empty() {
        return Err(CoreError::Domain("empty prompt".into()));
    }
    if prompt.len() + max_new_tokens > cfg.max_seq_len {
        return Err(CoreError::Length {
            got: prompt.len() + max_new_tokens,
            max: cfg.max_seq_len,
        });
    }
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let eos = crate::model::Backend::eos_id(model);

    if use_cache {
        let mut session = DecodeSession::new(model, hook, prompt.len())?;
        let mut last_logits = Vec::new();
        for &token in prompt {
            last_logits = session.advance(token, None)?;
        }
        let mut generated = Vec::new();
        loop {
            let next = argmax(&last_logits);
            if Some(next) == eos {
                break;
            }
            generated.push(next);
            if generated.len() == max_new_tokens {
                break;
            }
            last_logits = session.advance(next, None)?;
        }
        Ok(generated)
    } else {
        // Re-encode prompt + generated from scratch each step.
        let mut sequence = prompt.to_vec();
        let mut generated = Vec::new();
        loop {
            let mut session = DecodeSession::new(model, hook, prompt.len())?;
            let mut last_logits = Vec::new();
            for &token in &sequence {
                last_logits = session.advance(token, None)?;
            }
            let next = argmax(&last_logits);
            if Some(next) == eos {
                break;
            }
            generated.push(next);
            sequence.push(next);
            if generated.len() == max_new_tokens {
                break;
            }
        }
        Ok(generated)
    }
}
