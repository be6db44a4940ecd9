//! Offline rewriters: deterministic rule-based step merging and the
//! random-compression control.
//!
//! Both are conservative by construction: they only remove step delimiters
//! (each replaced by a single space), so the rewritten solution equals the
//! original once delimiters are stripped and whitespace is normalized.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tokenizer::Tokenizer;
use crate::trace::{join_steps, ReasoningTrace};

/// Connectives that mark a step as a continuation of the previous one.
/// Matched case-insensitively against the step's first word, with trailing
/// punctuation stripped.
pub const CONNECTIVES: [&str; 4] = ["so", "therefore", "thus", "then"];

/// Knobs for the deterministic rule-based rewriter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleRewriteConfig {
    /// A step counts as short when its token count is below this threshold.
    pub short_step_max_tokens: usize,
    /// Merge budget per trace.
    pub max_merges_per_trace: usize,
}

impl Default for RuleRewriteConfig {
    fn default() -> Self {
        Self {
            short_step_max_tokens: 12,
            max_merges_per_trace: 3,
        }
    }
}

fn starts_with_connective(step: &str) -> bool {
    step.split_whitespace()
        .next()
        .map(|word| {
            let word = word.trim_end_matches([',', '.', ':', ';', '!']);
            CONNECTIVES.iter().any(|c| word.eq_ignore_ascii_case(c))
        })
        .unwrap_or(false)
}

/// Merge adjacent steps with a deterministic left-to-right scan.
///
/// At boundary (i, i+1) a merge fires when both steps are below the
/// short-step token threshold, or when step i+1 begins with a connective
/// from [`CONNECTIVES`]. Merging joins the two steps with a single space and
/// advances the scan past the merged step, so a step participates in at most
/// one merge; at most `max_merges_per_trace` merges fire. All characters of
/// the original steps are preserved; only delimiters are removed. The final
/// step can only ever be the second element of a merge.
pub fn rule_rewrite(
    trace: &ReasoningTrace,
    config: &RuleRewriteConfig,
    tokenizer: &dyn Tokenizer,
) -> ReasoningTrace {
    let mut steps = trace.steps.clone();
    let mut merges = 0;
    let mut i = 0;
    while i + 1 < steps.len() && merges < config.max_merges_per_trace {
        let both_short = tokenizer.tokenize(&steps[i]).len() < config.short_step_max_tokens
            && tokenizer.tokenize(&steps[i + 1]).len() < config.short_step_max_tokens;
        if both_short || starts_with_connective(&steps[i + 1]) {
            let second = steps.remove(i + 1);
            steps[i] = format!("{} {}", steps[i], second);
            merges += 1;
        }
        i += 1;
    }
    ReasoningTrace::new(&trace.question, &join_steps(&steps), tokenizer)
}

/// Remove `k_merges` distinct step boundaries chosen uniformly at random.
///
/// Sampler: a partial Fisher-Yates shuffle of the boundary indices
/// `0..n_steps-1` driven by ChaCha8 seeded with `seed`; the first `k_merges`
/// entries are the removed boundaries. Deterministic given (trace, seed, k).
pub fn random_compress(
    trace: &ReasoningTrace,
    seed: u64,
    k_merges: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<ReasoningTrace> {
    let n = trace.n_steps();
    if n < 2 {
        return Err(CoreError::Domain(format!(
            "random compression needs >= 2 steps, trace has {n}"
        )));
    }
    if k_merges == 0 {
        return Err(CoreError::Domain("k_merges must be >= 1".into()));
    }
    if k_merges >= n {
        return Err(CoreError::Domain(format!(
            "k_merges {k_merges} must be < n_steps {n}"
        )));
    }
    let chosen = sample_boundaries(n - 1, k_merges, seed);

    let mut steps: Vec<String> = Vec::with_capacity(n - k_merges);
    for (idx, step) in trace.steps.iter().enumerate() {
        // Boundary idx-1 sits between steps idx-1 and idx.
        if idx > 0 && chosen.contains(&(idx - 1)) {
            let last = steps.last_mut().expect("non-empty by construction");
            last.push(' ');
            last.push_str(step);
        } else {
            steps.push(step.clone());
        }
    }
    Ok(ReasoningTrace::new(
        &trace.question,
        &join_steps(&steps),
        tokenizer,
    ))
}

/// First `k` entries of a seeded partial Fisher-Yates shuffle of
/// `0..n_boundaries`, sorted ascending.
pub fn sample_boundaries(n_boundaries: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_boundaries).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k.min(n_boundaries) {
        let j = i + (rng.next_u64() % (n_boundaries - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..k.min(n_boundaries)].to_vec();
    chosen.sort_unstable();
    chosen
}
