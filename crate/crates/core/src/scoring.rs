//! Token-level negative log-likelihood of traces under a model.
//!
//! A trace is scored in one forward pass over prompt + trace: each trace
//! token's NLL is the negative log-softmax probability the model assigns it
//! at the predicting position, in nats, averaged over trace tokens only.
//! Prompt tokens are conditioned on, never scored.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::Backend;
use crate::parallel::map_ordered;
use crate::tokenizer::BOS_ID;

/// Per-token and mean NLL for one scored trace, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllResult {
    pub mean_nll: f64,
    pub per_token_nll: Vec<f64>,
    pub t_count: usize,
}

/// NLL of `target` under the categorical distribution the logits define,
/// computed with a max-subtracted log-sum-exp in f64.
pub(crate) fn nll_from_logits(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max
        + logits
            .iter()
            .map(|&l| (f64::from(l) - max).exp())
            .sum::<f64>()
            .ln();
    lse - f64::from(logits[target as usize])
}

/// Score `trace_ids` conditioned on `prompt_ids`.
///
/// An empty prompt is scored by conditioning the first trace token on BOS.
/// No hooks are active: scoring always measures the unmodified model.
pub fn token_nll(model: &impl Backend, prompt_ids: &[u32], trace_ids: &[u32]) -> Result<NllResult> {
    if trace_ids.is_empty() {
        return Err(CoreError::EmptyTrace);
    }
    let bos = [BOS_ID];
    let prompt = if prompt_ids.is_empty() {
        &bos[..]
    } else {
        prompt_ids
    };
    let total = prompt.len() + trace_ids.len();
    if total > model.max_seq_len() {
        return Err(CoreError::Length {
            got: total,
            max: model.max_seq_len(),
        });
    }

    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(trace_ids);
    let out = model.forward(&tokens, None)?;

    let per_token_nll: Vec<f64> = trace_ids
        .iter()
        .enumerate()
        .map(|(i, &target)| nll_from_logits(&out.logits[prompt.len() + i - 1], target))
        .collect();
    let mean_nll = per_token_nll.iter().sum::<f64>() / per_token_nll.len() as f64;
    Ok(NllResult {
        mean_nll,
        t_count: per_token_nll.len(),
        per_token_nll,
    })
}

/// Score many (prompt, trace) pairs; results come back in input order.
pub fn token_nll_batch(
    model: &impl Backend,
    items: &[(Vec<u32>, Vec<u32>)],
) -> Vec<Result<NllResult>> {
    map_ordered(items, |(prompt, trace)| token_nll(model, prompt, trace))
}

/// Mean NLL the model assigns to its own greedy outputs on `prompts`.
pub fn self_likelihood_baseline(
    model: &impl Backend,
    prompts: &[Vec<u32>],
    max_new_tokens: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(CoreError::EmptySet(
            "self-likelihood over no prompts".into(),
        ));
    }
    let scores = map_ordered(prompts, |prompt| -> Result<f64> {
        let generated = model.greedy_generate(prompt, max_new_tokens, None)?;
        Ok(token_nll(model, prompt, &generated)?.mean_nll)
    });
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / prompts.len() as f64)
}

/// One histogram bucket over mean-NLL values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

/// Bucket mean-NLL values into fixed-width bins `[k*w, (k+1)*w)`.
///
/// Non-finite values are dropped first; if nothing survives the filter the
/// histogram declares the single range `[0, bin_width)` with count zero.
pub fn nll_histogram(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if values.is_empty() {
        return Err(CoreError::EmptySet("histogram over no values".into()));
    }
    if !(bin_width > 0.0) {
        return Err(CoreError::Domain(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(Histogram {
            bin_width,
            bins: vec![HistogramBin {
                low: 0.0,
                high: bin_width,
                count: 0,
            }],
        });
    }
    let index = |v: f64| (v / bin_width).floor() as i64;
    let lo = finite.iter().copied().map(index).min().unwrap();
    let hi = finite.iter().copied().map(index).max().unwrap();
    let mut bins: Vec<HistogramBin> = (lo..=hi)
        .map(|k| HistogramBin {
            low: k as f64 * bin_width,
            high: (k + 1) as f64 * bin_width,
            count: 0,
        })
        .collect();
    for v in finite {
        bins[(index(v) - lo) as usize].count += 1;
    }
    Ok(Histogram { bin_width, bins })
}

/// Emit the histogram as CSV with columns bin_low, bin_high, count.
pub fn write_histogram_csv(histogram: &Histogram, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_low", "bin_high", "count"])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    for bin in &histogram.bins {
        w.write_record([
            bin.low.to_string(),
            bin.high.to_string(),
            bin.count.to_string(),
        ])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
