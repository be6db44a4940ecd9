//! Contrastive pair construction from the target model's own outputs.
//!
//! Negatives are the model's greedy chain-of-thought generations; positives
//! come from one of three rewriters: the deterministic rule-based merger,
//! the seeded random-compression control, or an external LLM rewriter.
//! Pairs failing the audit's answer/marker preservation checks are excluded
//! and replaced from the remaining question pool.

pub mod audit;
pub mod external;
pub mod rewrite;

pub use audit::{audit, edit_similarity, levenshtein, normalized_content, AuditReport};
pub use external::{ExternalRewriterConfig, RewriterClient};
pub use rewrite::{random_compress, rule_rewrite, RuleRewriteConfig, CONNECTIVES};

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::Backend;
use crate::parallel::map_ordered;
use crate::prompts;
use crate::steering::{ContrastivePair, RewriterTag};
use crate::trace::{ReasoningTrace, TraceRecord};

/// How positives are produced from negatives.
#[derive(Debug, Clone)]
pub enum RewriterMode {
    RuleBased(RuleRewriteConfig),
    RandomCompression { merge_seed: u64, max_merges: usize },
    External(ExternalRewriterConfig),
}

impl RewriterMode {
    pub fn tag(&self) -> RewriterTag {
        match self {
            RewriterMode::RuleBased(_) => RewriterTag::RuleBased,
            RewriterMode::RandomCompression { .. } => RewriterTag::RandomCompression,
            RewriterMode::External(_) => RewriterTag::External,
        }
    }
}

/// A question from the calibration pool; the gold answer, when present,
/// backs the optional wrong-negative filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PairQuestion {
    pub id: String,
    pub text: String,
    pub gold_answer: Option<String>,
}

/// Greedy chain-of-thought generations plus per-question failures.
#[derive(Debug)]
pub struct GeneratedNegatives {
    pub records: Vec<TraceRecord>,
    pub failures: Vec<(String, String)>,
}

/// Generate negatives: one greedy chain-of-thought trace per question (and
/// per sample index; greedy decoding makes repeated samples identical).
/// Failed questions are reported, not fatal. An empty question list yields
/// an empty (warned) result.
pub fn generate_negatives(
    model: &impl Backend,
    questions: &[PairQuestion],
    samples_per_question: u32,
    max_new_tokens: usize,
) -> GeneratedNegatives {
    if questions.is_empty() {
        log::warn!("generate_negatives called with an empty question list");
        return GeneratedNegatives {
            records: Vec::new(),
            failures: Vec::new(),
        };
    }
    let outcomes = map_ordered(questions, |q| {
        let prompt_ids = model.tokenizer().tokenize(&prompts::cot_prompt(&q.text));
        model
            .greedy_generate(&prompt_ids, max_new_tokens, None)
            .map(|ids| model.tokenizer().detokenize(&ids))
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (q, outcome) in questions.iter().zip(outcomes) {
        match outcome {
            Ok(solution) => {
                for sample_index in 0..samples_per_question.max(1) {
                    records.push(TraceRecord {
                        question_id: q.id.clone(),
                        question: q.text.clone(),
                        solution: solution.clone(),
                        sample_index,
                    });
                }
            }
            Err(e) => {
                log::warn!("negative generation failed for {}: {e}", q.id);
                failures.push((q.id.clone(), e.to_string()));
            }
        }
    }
    GeneratedNegatives { records, failures }
}

/// Per-trace seed for the random-compression control, derived from the base
/// seed and the question id so it is stable under pool changes.
fn per_trace_seed(base: u64, question_id: &str) -> u64 {
    let digest = Sha256::digest(question_id.as_bytes());
    base ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Produce the positive for one negative under the configured rewriter.
pub fn rewrite_trace(
    model: &impl Backend,
    mode: &RewriterMode,
    client: Option<&RewriterClient>,
    question_id: &str,
    question: &str,
    negative: &ReasoningTrace,
) -> Result<ReasoningTrace> {
    match mode {
        RewriterMode::RuleBased(config) => Ok(rule_rewrite(negative, config, model.tokenizer())),
        RewriterMode::RandomCompression {
            merge_seed,
            max_merges,
        } => {
            let k = (*max_merges)
                .min(negative.n_steps().saturating_sub(1))
                .max(1);
            random_compress(
                negative,
                per_trace_seed(*merge_seed, question_id),
                k,
                model.tokenizer(),
            )
        }
        RewriterMode::External(_) => {
            let client = client.ok_or_else(|| {
                CoreError::Config("external mode requires a rewriter client".into())
            })?;
            let text = client.rewrite(question, &negative.solution)?;
            Ok(ReasoningTrace::new(question, &text, model.tokenizer()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildPairsOptions {
    pub n_pairs: usize,
    pub max_new_tokens: usize,
    /// Drop questions whose negative's boxed answer disagrees with the gold
    /// answer. Off by default: a rewrite preserving a wrong answer is still
    /// a valid structural pair.
    pub require_gold_match: bool,
    pub samples_per_question: u32,
}

impl Default for BuildPairsOptions {
    fn default() -> Self {
        Self {
            n_pairs: 50,
            max_new_tokens: 2048,
            require_gold_match: false,
            samples_per_question: 1,
        }
    }
}

/// Why a question was excluded from the pair set.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Exclusion {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct BuiltPairs {
    pub pairs: Vec<ContrastivePair>,
    /// Question ids aligned with `pairs`.
    pub question_ids: Vec<String>,
    pub exclusions: Vec<Exclusion>,
}

impl BuiltPairs {
    pub fn to_records(&self) -> Vec<PairRecord> {
        self.pairs
            .iter()
            .zip(&self.question_ids)
            .map(|(pair, id)| PairRecord {
                question_id: id.clone(),
                question: pair.question.clone(),
                negative: pair.negative.solution.clone(),
                positive: pair.positive.solution.clone(),
                rewriter_tag: pair.rewriter_tag,
            })
            .collect()
    }
}

/// Build exactly `n_pairs` contrastive pairs, walking the question pool in
/// ascending question-id order and replacing excluded questions from the
/// remainder.
pub fn build_pairs(
    model: &impl Backend,
    questions: &[PairQuestion],
    mode: &RewriterMode,
    options: &BuildPairsOptions,
) -> Result<BuiltPairs> {
    let mut pool: Vec<PairQuestion> = questions.to_vec();
    pool.sort_by(|a, b| a.id.cmp(&b.id));

    let client = match mode {
        RewriterMode::External(config) => Some(RewriterClient::new(config.clone())?),
        _ => None,
    };

    let negatives = generate_negatives(model, &pool, 1, options.max_new_tokens);
    let mut exclusions: Vec<Exclusion> = negatives
        .failures
        .iter()
        .map(|(id, reason)| Exclusion {
            question_id: id.clone(),
            reason: format!("generation failed: {reason}"),
        })
        .collect();

    let mut pairs = Vec::with_capacity(options.n_pairs);
    let mut question_ids = Vec::with_capacity(options.n_pairs);
    for record in &negatives.records {
        if pairs.len() == options.n_pairs {
            break;
        }
        let mut exclude = |reason: String| {
            log::info!("excluding {}: {reason}", record.question_id);
            exclusions.push(Exclusion {
                question_id: record.question_id.clone(),
                reason,
            });
        };

        let negative = record.to_trace(model.tokenizer());
        if negative.is_empty() {
            exclude("empty negative trace".into());
            continue;
        }
        if options.require_gold_match {
            let gold = pool
                .iter()
                .find(|q| q.id == record.question_id)
                .and_then(|q| q.gold_answer.clone());
            if let Some(gold) = gold {
                let answered = crate::eval::extract_boxed_answer(&negative.solution)
                    .map(|p| crate::eval::answers_match(&p, &gold))
                    .unwrap_or(false);
                if !answered {
                    exclude("negative answer does not match gold".into());
                    continue;
                }
            }
        }

        let positive = match rewrite_trace(
            model,
            mode,
            client.as_ref(),
            &record.question_id,
            &record.question,
            &negative,
        ) {
            Ok(p) => p,
            Err(e) => {
                exclude(format!("rewrite failed: {e}"));
                continue;
            }
        };
        if positive.is_empty() {
            exclude("empty positive trace".into());
            continue;
        }

        let pair = ContrastivePair {
            question: record.question.clone(),
            positive,
            negative,
            rewriter_tag: mode.tag(),
        };
        let report = audit(&pair);
        if !report.answer_preserved {
            exclude("rewrite did not preserve the boxed answer".into());
            continue;
        }
        if !report.markers_preserved {
            exclude("rewrite did not preserve <<...>> markers".into());
            continue;
        }
        pairs.push(pair);
        question_ids.push(record.question_id.clone());
    }

    if pairs.len() < options.n_pairs {
        return Err(CoreError::InsufficientPairs {
            needed: options.n_pairs,
            built: pairs.len(),
        });
    }
    Ok(BuiltPairs {
        pairs,
        question_ids,
        exclusions,
    })
}

// ---------------------------------------------------------------------------
// Pairs JSONL
// ---------------------------------------------------------------------------

/// One line of a persisted pairs file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairRecord {
    pub question_id: String,
    pub question: String,
    pub negative: String,
    pub positive: String,
    pub rewriter_tag: RewriterTag,
}

impl PairRecord {
    pub fn to_pair(&self, tokenizer: &dyn crate::tokenizer::Tokenizer) -> ContrastivePair {
        ContrastivePair {
            question: self.question.clone(),
            positive: ReasoningTrace::new(&self.question, &self.positive, tokenizer),
            negative: ReasoningTrace::new(&self.question, &self.negative, tokenizer),
            rewriter_tag: self.rewriter_tag,
        }
    }
}

pub fn read_pair_records(reader: impl std::io::BufRead) -> Result<Vec<PairRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(records)
}

pub fn write_pair_records(mut writer: impl std::io::Write, records: &[PairRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
