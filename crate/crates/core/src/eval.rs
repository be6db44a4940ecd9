//! Dataset ingestion, answer extraction/matching, and steered or unsteered
//! evaluation runs.

use std::io::BufRead;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Backend, InjectionHook};
use crate::parallel::map_ordered;
use crate::prompts;
use crate::scoring::token_nll;
use crate::trace::{density, ReasoningTrace};

/// One evaluation question with its normalized gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    pub question: String,
    pub gold_answer: String,
}

/// Supported dataset file layouts (JSON Lines either way).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `{"question", "answer"}` where the gold answer follows the final
    /// `"#### "` marker inside the answer field.
    Gsm8kJsonl,
    /// `{"question", "answer"}` with the answer taken directly.
    PlainJsonl,
}

#[derive(Debug, Deserialize)]
struct RawDatasetLine {
    #[serde(alias = "id")]
    question_id: Option<String>,
    question: String,
    answer: String,
}

/// Read a dataset, normalizing gold answers on the way in.
pub fn ingest_dataset(reader: impl BufRead, format: DatasetFormat) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDatasetLine = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let gold = match format {
            DatasetFormat::Gsm8kJsonl => {
                let marker = "#### ";
                match raw.answer.rfind(marker) {
                    Some(pos) => raw.answer[pos + marker.len()..].to_string(),
                    None => return Err(CoreError::MissingGold { line: line_no }),
                }
            }
            DatasetFormat::PlainJsonl => raw.answer,
        };
        let gold = normalize_answer(&gold);
        if gold.is_empty() {
            return Err(CoreError::Parse {
                line: line_no,
                msg: "empty gold answer".into(),
            });
        }
        items.push(EvalItem {
            question_id: raw.question_id.unwrap_or_else(|| format!("q{line_no:06}")),
            question: raw.question,
            gold_answer: gold,
        });
    }
    Ok(items)
}

/// Contents of the last `\boxed{...}` span, with balanced-brace matching.
/// Returns `None` when no balanced span exists.
pub fn extract_boxed_answer(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let mut result = None;
    let mut search_from = 0;
    while let Some(found) = text[search_from..].find(MARKER) {
        let start = search_from + found + MARKER.len();
        let mut depth = 1u32;
        for (offset, ch) in text[start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        result = Some(text[start..start + offset].to_string());
                        break;
                    }
                }
                _ => {}
            }
        }
        search_from = start;
    }
    result
}

/// Trim whitespace, strip commas and surrounding dollar signs, lowercase.
pub fn normalize_answer(raw: &str) -> String {
    raw.trim()
        .replace(',', "")
        .trim_matches('$')
        .trim()
        .to_lowercase()
}

/// Compare a prediction against a gold answer: numerically (absolute
/// tolerance 1e-6) when both normalize to decimal numbers, exact string
/// equality otherwise. No symbolic equivalence.
pub fn answers_match(prediction: &str, gold: &str) -> bool {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    match (p.parse::<f64>(), g.parse::<f64>()) {
        (Ok(a), Ok(b)) => (a - b).abs() <= 1e-6,
        _ => p == g,
    }
}

/// Prompt framing used during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStyle {
    /// Standard chain-of-thought prompt.
    Cot,
    /// Dense-style instruction block ahead of the chain-of-thought prompt.
    Dense,
}

pub fn format_prompt(style: PromptStyle, question: &str) -> String {
    match style {
        PromptStyle::Cot => prompts::cot_prompt(question),
        PromptStyle::Dense => prompts::dense_inference_prompt(question),
    }
}

/// Knobs for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub prompt_style: PromptStyle,
    /// Echoed into the report for provenance; not used for computation.
    pub vector_file: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 2048,
            prompt_style: PromptStyle::Cot,
            vector_file: None,
        }
    }
}

/// Outcome for one question. Metric fields are absent when the item failed
/// with an error or generated an empty trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub question_id: String,
    pub prediction: Option<String>,
    pub correct: bool,
    pub n_steps: Option<usize>,
    pub rho: Option<f64>,
    pub n_tokens: Option<usize>,
    pub mean_nll: Option<f64>,
    pub error: Option<String>,
}

/// Means over the per-item records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub accuracy: f64,
    pub mean_steps: Option<f64>,
    pub mean_rho: Option<f64>,
    pub mean_tokens: Option<f64>,
    pub mean_nll: Option<f64>,
}

/// Configuration echo recorded alongside every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub layer: Option<usize>,
    pub lambda: Option<f64>,
    pub vector_file: Option<String>,
    pub model_fingerprint: String,
    pub max_new_tokens: usize,
    pub prompt_style: PromptStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfigEcho,
    pub aggregates: EvalAggregates,
    pub items: Vec<ItemRecord>,
}

/// Recompute aggregates from per-item records: accuracy over all items,
/// metric means over the items that carry that metric.
pub fn compute_aggregates(records: &[ItemRecord]) -> EvalAggregates {
    let n = records.len() as f64;
    let correct = records.iter().filter(|r| r.correct).count() as f64;
    fn mean_of(values: Vec<f64>) -> Option<f64> {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
    EvalAggregates {
        accuracy: correct / n,
        mean_steps: mean_of(
            records
                .iter()
                .filter_map(|r| r.n_steps.map(|v| v as f64))
                .collect(),
        ),
        mean_rho: mean_of(records.iter().filter_map(|r| r.rho).collect()),
        mean_tokens: mean_of(
            records
                .iter()
                .filter_map(|r| r.n_tokens.map(|v| v as f64))
                .collect(),
        ),
        mean_nll: mean_of(records.iter().filter_map(|r| r.mean_nll).collect()),
    }
}

fn evaluate_item(
    model: &impl Backend,
    item: &EvalItem,
    hook: Option<&InjectionHook>,
    opts: &EvalOptions,
) -> ItemRecord {
    let mut record = ItemRecord {
        question_id: item.question_id.clone(),
        prediction: None,
        correct: false,
        n_steps: None,
        rho: None,
        n_tokens: None,
        mean_nll: None,
        error: None,
    };
    let prompt = format_prompt(opts.prompt_style, &item.question);
    let prompt_ids = model.tokenizer().tokenize(&prompt);

    let generated = match model.greedy_generate(&prompt_ids, opts.max_new_tokens, hook) {
        Ok(g) => g,
        Err(e) => {
            record.error = Some(format!("generation: {e}"));
            return record;
        }
    };
    let text = model.tokenizer().detokenize(&generated);
    record.prediction = extract_boxed_answer(&text);
    record.correct = record
        .prediction
        .as_deref()
        .map(|p| answers_match(p, &item.gold_answer))
        .unwrap_or(false);

    let trace = ReasoningTrace::new(&item.question, &text, model.tokenizer());
    match density(&trace) {
        Ok(d) => {
            record.n_steps = Some(d.n_steps);
            record.rho = Some(d.rho);
            record.n_tokens = Some(d.n_tokens);
        }
        Err(e) => record.error = Some(format!("metrics: {e}")),
    }

    if !generated.is_empty() {
        // NLL of the steered trace is always measured under the unhooked model.
        match token_nll(model, &prompt_ids, &generated) {
            Ok(nll) => record.mean_nll = Some(nll.mean_nll),
            Err(e) => record.error = Some(format!("scoring: {e}")),
        }
    }
    record
}

/// Greedy-generate and grade every item, optionally under an injection hook.
///
/// Items run concurrently; records come back in input order and per-item
/// failures are recorded (as incorrect, with an error tag) rather than
/// aborting the run.
pub fn evaluate(
    model: &impl Backend,
    items: &[EvalItem],
    hook: Option<&InjectionHook>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(CoreError::EmptySet("evaluation over no items".into()));
    }
    let records = map_ordered(items, |item| evaluate_item(model, item, hook, opts));
    let aggregates = compute_aggregates(&records);
    Ok(EvalReport {
        config: EvalConfigEcho {
            layer: hook.map(|h| h.layer),
            lambda: hook.map(|h| h.lambda),
            vector_file: opts.vector_file.clone(),
            model_fingerprint: model.fingerprint().to_string(),
            max_new_tokens: opts.max_new_tokens,
            prompt_style: opts.prompt_style,
        },
        aggregates,
        items: records,
    })
}

/// Deterministic seeded split into (validation, rest), preserving the input
/// order inside each part. The validation size is `floor(n * val_fraction)`.
pub fn validation_split(
    items: &[EvalItem],
    val_fraction: f64,
    seed: u64,
) -> (Vec<EvalItem>, Vec<EvalItem>) {
    let n = items.len();
    let take = ((n as f64) * val_fraction.clamp(0.0, 1.0)).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
    let chosen: std::collections::HashSet<usize> = indices.into_iter().take(take).collect();
    let mut val = Vec::with_capacity(take);
    let mut rest = Vec::with_capacity(n - take);
    for (i, item) in items.iter().enumerate() {
        if chosen.contains(&i) {
            val.push(item.clone());
        } else {
            rest.push(item.clone());
        }
    }
    (val, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_micro_model, MicroModel, ModelConfig, PositionPolicy};
    use crate::tokenizer::Tokenizer;

    fn small_model() -> MicroModel {
        init_micro_model(&ModelConfig {
            max_seq_len: 320,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn line(q: &str, a: &str) -> String {
        serde_json::json!({"question": q, "answer": a}).to_string()
    }

    #[test]
    fn gsm8k_gold_follows_final_marker() {
        let data = format!(
            "{}\n{}\n",
            line("q1", "Work.\n#### 42"),
            line("q2", "#### 7\nmore #### 1,234")
        );
        let items = ingest_dataset(data.as_bytes(), DatasetFormat::Gsm8kJsonl).unwrap();
        assert_eq!(items[0].gold_answer, "42");
        assert_eq!(items[1].gold_answer, "1234");
    }

    #[test]
    fn missing_marker_is_reported() {
        let data = line("q", "no marker here");
        let err = ingest_dataset(data.as_bytes(), DatasetFormat::Gsm8kJsonl).unwrap_err();
        assert!(matches!(err, CoreError::MissingGold { line: 1 }));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let mut data = String::new();
        for _ in 0..16 {
            data.push_str(&line("q", "#### 1"));
            data.push('\n');
        }
        data.push_str("not json\n");
        let err = ingest_dataset(data.as_bytes(), DatasetFormat::Gsm8kJsonl).unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 17),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn plain_format_reads_answer_directly() {
        let data = line("q", "Paris");
        let items = ingest_dataset(data.as_bytes(), DatasetFormat::PlainJsonl).unwrap();
        assert_eq!(items[0].gold_answer, "paris");
        assert_eq!(items[0].question_id, "q000001");
    }

    #[test]
    fn boxed_extraction_cases() {
        assert_eq!(
            extract_boxed_answer("Final Answer: \\boxed{42}").as_deref(),
            Some("42")
        );
        assert_eq!(
            extract_boxed_answer("\\boxed{\\frac{1}{2}}").as_deref(),
            Some("\\frac{1}{2}")
        );
        assert_eq!(
            extract_boxed_answer("\\boxed{1} then \\boxed{2}").as_deref(),
            Some("2")
        );
        assert_eq!(extract_boxed_answer("nothing here"), None);
        // Unbalanced final span falls back to the last balanced one.
        assert_eq!(
            extract_boxed_answer("\\boxed{ok} \\boxed{broken").as_deref(),
            Some("ok")
        );
    }

    #[test]
    fn normalization_and_matching() {
        assert!(answers_match("1,234", "1234"));
        assert!(answers_match("42.0", "42"));
        assert!(answers_match("$5", "5"));
        assert!(!answers_match("0.50", "1/2"));
        assert!(answers_match("YES", "yes"));
        assert!(!answers_match("41", "42"));
    }

    #[test]
    fn zero_lambda_hook_report_equals_hookless() {
        let model = small_model();
        let items: Vec<EvalItem> = (0..4)
            .map(|i| EvalItem {
                question_id: format!("q{i}"),
                question: format!("What is {i}+{i}?"),
                gold_answer: format!("{}", 2 * i),
            })
            .collect();
        let opts = EvalOptions {
            max_new_tokens: 24,
            ..EvalOptions::default()
        };
        let hook = InjectionHook {
            layer: 1,
            vector: vec![0.25; model.d_model()],
            lambda: 0.0,
            policy: PositionPolicy::GeneratedOnly,
        };
        let base = evaluate(&model, &items, None, &opts).unwrap();
        let hooked = evaluate(&model, &items, Some(&hook), &opts).unwrap();
        assert_eq!(base.items, hooked.items);
        assert_eq!(base.aggregates, hooked.aggregates);
    }

    /// Backend that always emits one canned completion; logits are uniform.
    struct CannedBackend {
        text: String,
        tokenizer: crate::tokenizer::ByteTokenizer,
    }

    impl Backend for CannedBackend {
        fn n_layers(&self) -> usize {
            1
        }
        fn d_model(&self) -> usize {
            4
        }
        fn max_seq_len(&self) -> usize {
            8192
        }
        fn vocab_size(&self) -> usize {
            259
        }
        fn fingerprint(&self) -> &str {
            "canned"
        }
        fn tokenizer(&self) -> &dyn crate::tokenizer::Tokenizer {
            &self.tokenizer
        }
        fn eos_id(&self) -> Option<u32> {
            None
        }
        fn forward(
            &self,
            tokens: &[u32],
            _hook: Option<&InjectionHook>,
        ) -> Result<crate::model::ForwardOutput> {
            Ok(crate::model::ForwardOutput {
                logits: vec![vec![0.0; self.vocab_size()]; tokens.len()],
                states: crate::model::HiddenStates::zeros(1, tokens.len(), 4),
            })
        }
        fn greedy_generate(
            &self,
            _prompt: &[u32],
            _max_new_tokens: usize,
            _hook: Option<&InjectionHook>,
        ) -> Result<Vec<u32>> {
            Ok(self.tokenizer.tokenize(&self.text))
        }
    }

    #[test]
    fn item_whose_output_contains_gold_box_is_correct() {
        let backend = CannedBackend {
            text: "2+2 = 4\n\nFinal Answer: \\boxed{4}".into(),
            tokenizer: crate::tokenizer::ByteTokenizer,
        };
        let item = EvalItem {
            question_id: "probe".into(),
            question: "What is 2+2?".into(),
            gold_answer: "4".into(),
        };
        let opts = EvalOptions {
            max_new_tokens: 64,
            ..EvalOptions::default()
        };
        let report = evaluate(&backend, &[item], None, &opts).unwrap();
        assert_eq!(report.aggregates.accuracy, 1.0);
        assert_eq!(report.items[0].prediction.as_deref(), Some("4"));
        assert_eq!(report.items[0].n_steps, Some(2));
        // Uniform logits: the scored NLL is exactly ln(vocab).
        let expected = (259f64).ln();
        assert!((report.items[0].mean_nll.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn model_without_boxed_output_scores_incorrect() {
        let model = small_model();
        let probe = EvalItem {
            question_id: "probe".into(),
            question: "What is 2+2?".into(),
            gold_answer: "4".into(),
        };
        let opts = EvalOptions {
            max_new_tokens: 24,
            ..EvalOptions::default()
        };
        let report = evaluate(&model, &[probe], None, &opts).unwrap();
        // The random micro model emits no boxed span here.
        assert!(report.items[0].prediction.is_none());
        assert!(!report.items[0].correct);
    }

    #[test]
    fn per_item_errors_do_not_abort() {
        let model = small_model();
        let items = vec![
            EvalItem {
                question_id: "ok".into(),
                question: "small".into(),
                gold_answer: "1".into(),
            },
            EvalItem {
                question_id: "too-long".into(),
                question: "x".repeat(4 * model.max_seq_len()),
                gold_answer: "1".into(),
            },
        ];
        let opts = EvalOptions {
            max_new_tokens: 8,
            ..EvalOptions::default()
        };
        let report = evaluate(&model, &items, None, &opts).unwrap();
        assert_eq!(report.items.len(), 2);
        assert!(report.items[0].error.is_none());
        assert!(report.items[1]
            .error
            .as_deref()
            .unwrap()
            .contains("generation"));
        assert!(!report.items[1].correct);
    }

    #[test]
    fn aggregates_recompute_from_records() {
        let model = small_model();
        let items: Vec<EvalItem> = (0..6)
            .map(|i| EvalItem {
                question_id: format!("q{i}"),
                question: format!("Question {i}?"),
                gold_answer: "7".into(),
            })
            .collect();
        let opts = EvalOptions {
            max_new_tokens: 16,
            ..EvalOptions::default()
        };
        let report = evaluate(&model, &items, None, &opts).unwrap();
        assert_eq!(report.aggregates, compute_aggregates(&report.items));
    }

    #[test]
    fn evaluation_is_deterministic_and_order_invariant_on_accuracy() {
        let model = small_model();
        let mut items: Vec<EvalItem> = (0..5)
            .map(|i| EvalItem {
                question_id: format!("q{i}"),
                question: format!("Compute {i}*2"),
                gold_answer: format!("{}", i * 2),
            })
            .collect();
        let opts = EvalOptions {
            max_new_tokens: 16,
            ..EvalOptions::default()
        };
        let a = evaluate(&model, &items, None, &opts).unwrap();
        let b = evaluate(&model, &items, None, &opts).unwrap();
        assert_eq!(a, b);
        items.reverse();
        let c = evaluate(&model, &items, None, &opts).unwrap();
        assert_eq!(a.aggregates.accuracy, c.aggregates.accuracy);
    }

    #[test]
    fn hookless_mean_nll_equals_self_likelihood_baseline() {
        let model = small_model();
        let items: Vec<EvalItem> = (0..5)
            .map(|i| EvalItem {
                question_id: format!("q{i}"),
                question: format!("Add {i} and {}.", i + 3),
                gold_answer: "9".into(),
            })
            .collect();
        let budget = 24;
        let opts = EvalOptions {
            max_new_tokens: budget,
            ..EvalOptions::default()
        };
        let report = evaluate(&model, &items, None, &opts).unwrap();

        let prompts: Vec<Vec<u32>> = items
            .iter()
            .map(|item| {
                model
                    .tokenizer()
                    .tokenize(&format_prompt(PromptStyle::Cot, &item.question))
            })
            .collect();
        let baseline = crate::scoring::self_likelihood_baseline(&model, &prompts, budget).unwrap();
        assert!((report.aggregates.mean_nll.unwrap() - baseline).abs() < 1e-9);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let items: Vec<EvalItem> = (0..20)
            .map(|i| EvalItem {
                question_id: format!("q{i}"),
                question: "q".into(),
                gold_answer: "1".into(),
            })
            .collect();
        let (val1, rest1) = validation_split(&items, 0.25, 9);
        let (val2, rest2) = validation_split(&items, 0.25, 9);
        assert_eq!(val1, val2);
        assert_eq!(rest1, rest2);
        assert_eq!(val1.len(), 5);
        assert_eq!(val1.len() + rest1.len(), items.len());
        let (val3, _) = validation_split(&items, 0.25, 10);
        assert_ne!(val1, val3);
    }
}
