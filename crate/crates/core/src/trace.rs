//! Reasoning traces and their structural metrics.
//!
//! A trace is a question plus a step-segmented solution. Steps are delimited
//! by blank lines: any run of two or more newlines, possibly with
//! whitespace-only lines in between, is one boundary. Density is tokens per
//! step; the density-alignment score combines density with model NLL.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tokenizer::Tokenizer;

/// Canonical delimiter used when joining steps back into a solution.
pub const STEP_DELIMITER: &str = "\n\n";

/// Split solution text into reasoning steps.
///
/// Boundaries are runs of >= 2 newline characters (whitespace-only lines
/// count as blank). Each returned step is trimmed; empty segments are
/// dropped; order is preserved. Re-segmenting the joined output is a fixed
/// point: `segment(join(segment(x))) == segment(x)`.
pub fn segment_steps(text: &str) -> Vec<String> {
    let mut steps = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            flush_step(&mut current, &mut steps);
        } else {
            current.push(line);
        }
    }
    flush_step(&mut current, &mut steps);
    steps
}

fn flush_step(lines: &mut Vec<&str>, steps: &mut Vec<String>) {
    if lines.is_empty() {
        return;
    }
    let step = lines.join("\n").trim().to_string();
    if !step.is_empty() {
        steps.push(step);
    }
    lines.clear();
}

/// Join steps with the canonical delimiter.
pub fn join_steps(steps: &[String]) -> String {
    steps.join(STEP_DELIMITER)
}

/// A question plus its step-segmented solution, tokenized under the active
/// tokenizer. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub question: String,
    pub solution: String,
    pub steps: Vec<String>,
    pub token_ids: Vec<u32>,
}

impl ReasoningTrace {
    pub fn new(question: &str, solution: &str, tokenizer: &dyn Tokenizer) -> Self {
        Self {
            question: question.to_string(),
            solution: solution.to_string(),
            steps: segment_steps(solution),
            token_ids: tokenizer.tokenize(solution),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solution.trim().is_empty()
    }
}

/// Tokens-per-step density of one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMetrics {
    pub rho: f64,
    pub n_tokens: usize,
    pub n_steps: usize,
}

/// Compute the reasoning density rho = n_tokens / n_steps.
///
/// Errors with [`CoreError::EmptyTrace`] on whitespace-only solutions, where
/// the ratio is undefined.
pub fn density(trace: &ReasoningTrace) -> Result<DensityMetrics> {
    if trace.is_empty() {
        return Err(CoreError::EmptyTrace);
    }
    let n_tokens = trace.n_tokens();
    let n_steps = trace.n_steps();
    debug_assert!(n_steps >= 1);
    Ok(DensityMetrics {
        rho: n_tokens as f64 / n_steps as f64,
        n_tokens,
        n_steps,
    })
}

/// Density-alignment score: `ln(rho) - nll`, both in nats.
///
/// Increasing in density, decreasing in NLL. `rho` must be positive.
pub fn das(rho: f64, nll: f64) -> Result<f64> {
    if rho <= 0.0 {
        return Err(CoreError::Domain(format!(
            "density-alignment score undefined for rho = {rho}"
        )));
    }
    Ok(rho.ln() - nll)
}

/// Per-trace structural measurements grouped by question.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStats {
    pub question_id: String,
    pub n_steps: usize,
    pub n_tokens: usize,
    pub rho: f64,
}

impl TraceStats {
    pub fn from_trace(question_id: &str, trace: &ReasoningTrace) -> Result<Self> {
        let d = density(trace)?;
        Ok(Self {
            question_id: question_id.to_string(),
            n_steps: d.n_steps,
            n_tokens: d.n_tokens,
            rho: d.rho,
        })
    }
}

/// Corpus-level means with standard errors over question-level averages.
///
/// The SEM fields are `None` when fewer than two distinct questions are
/// present (the means are still reported).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_questions: usize,
    pub n_traces: usize,
    pub mean_steps: f64,
    pub mean_rho: f64,
    pub mean_tokens: f64,
    pub sem_steps: Option<f64>,
    pub sem_rho: Option<f64>,
    pub sem_tokens: Option<f64>,
}

/// Aggregate trace statistics: per-question means first, then mean and SEM
/// across questions. SEM uses the sample standard deviation (n-1) divided by
/// sqrt(n). Values are accumulated in sorted order per question, so the
/// result is exactly invariant under permutations of the input.
pub fn corpus_stats(stats: &[TraceStats]) -> Result<CorpusStats> {
    if stats.is_empty() {
        return Err(CoreError::EmptySet("corpus_stats over no traces".into()));
    }
    let mut per_question: BTreeMap<&str, Vec<&TraceStats>> = BTreeMap::new();
    for s in stats {
        per_question.entry(&s.question_id).or_default().push(s);
    }

    fn sorted_mean(mut values: Vec<f64>) -> f64 {
        values.sort_by(f64::total_cmp);
        values.iter().sum::<f64>() / values.len() as f64
    }

    let q_means: Vec<[f64; 3]> = per_question
        .values()
        .map(|group| {
            [
                sorted_mean(group.iter().map(|s| s.n_steps as f64).collect()),
                sorted_mean(group.iter().map(|s| s.rho).collect()),
                sorted_mean(group.iter().map(|s| s.n_tokens as f64).collect()),
            ]
        })
        .collect();

    let nq = q_means.len();
    let mean = |k: usize| q_means.iter().map(|m| m[k]).sum::<f64>() / nq as f64;
    let means = [mean(0), mean(1), mean(2)];
    let sem = |k: usize| -> Option<f64> {
        if nq < 2 {
            return None;
        }
        let var = q_means
            .iter()
            .map(|m| (m[k] - means[k]).powi(2))
            .sum::<f64>()
            / (nq as f64 - 1.0);
        Some(var.sqrt() / (nq as f64).sqrt())
    };

    Ok(CorpusStats {
        n_questions: nq,
        n_traces: stats.len(),
        mean_steps: means[0],
        mean_rho: means[1],
        mean_tokens: means[2],
        sem_steps: sem(0),
        sem_rho: sem(1),
        sem_tokens: sem(2),
    })
}

/// One line of a trace corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub question: String,
    pub solution: String,
    pub sample_index: u32,
}

impl TraceRecord {
    pub fn to_trace(&self, tokenizer: &dyn Tokenizer) -> ReasoningTrace {
        ReasoningTrace::new(&self.question, &self.solution, tokenizer)
    }
}

/// Read a JSON-Lines trace corpus (UTF-8, one record per line).
pub fn read_trace_records(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write a trace corpus as JSON Lines with LF newlines.
pub fn write_trace_records(mut writer: impl Write, records: &[TraceRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ByteTokenizer;

    fn trace(solution: &str) -> ReasoningTrace {
        ReasoningTrace::new("q", solution, &ByteTokenizer)
    }

    #[test]
    fn segments_on_double_newline() {
        assert_eq!(segment_steps("a\n\nb\n\nc"), vec!["a", "b", "c"]);
    }

    #[test]
    fn discards_empty_segments() {
        assert_eq!(segment_steps("a\n\n\n\nb"), vec!["a", "b"]);
    }

    #[test]
    fn no_delimiter_is_one_step() {
        assert_eq!(segment_steps("single line"), vec!["single line"]);
    }

    #[test]
    fn whitespace_only_lines_count_as_blank() {
        assert_eq!(segment_steps("a\n   \nb"), vec!["a", "b"]);
        assert_eq!(segment_steps("a\n\t\r\nb"), vec!["a", "b"]);
    }

    #[test]
    fn single_newline_keeps_lines_in_one_step() {
        assert_eq!(segment_steps("a\nb"), vec!["a\nb"]);
    }

    #[test]
    fn empty_input_yields_no_steps() {
        assert!(segment_steps("").is_empty());
        assert!(segment_steps("  \n \n\n ").is_empty());
    }

    #[test]
    fn segmentation_is_idempotent_on_fixture() {
        let text = "  first\nstill first\n\n\n second \n\n third\n";
        let once = segment_steps(text);
        let twice = segment_steps(&join_steps(&once));
        assert_eq!(once, twice);
    }

    #[test]
    fn density_direct_formula() {
        // 5 steps totalling 192 step bytes + 4 two-byte delimiters = 200 tokens
        let steps = [40, 40, 40, 36, 36].map(|n| "x".repeat(n)).to_vec();
        let t = trace(&join_steps(&steps));
        let d = density(&t).unwrap();
        assert_eq!(d.n_tokens, 200);
        assert_eq!(d.n_steps, 5);
        assert_eq!(d.rho, 40.0);
    }

    #[test]
    fn density_single_step_equals_token_count() {
        let t = trace("7 chars");
        let d = density(&t).unwrap();
        assert_eq!(d.n_steps, 1);
        assert_eq!(d.rho, 7.0);
    }

    #[test]
    fn density_of_empty_trace_is_an_error() {
        let t = trace("  \n ");
        assert!(matches!(density(&t), Err(CoreError::EmptyTrace)));
    }

    #[test]
    fn das_at_known_points() {
        assert!((das(std::f64::consts::E, 1.0).unwrap()).abs() < 1e-12);
        assert!((das(1.0, 0.0).unwrap()).abs() < 1e-12);
        // 40-token-per-step trace scored at 2.5 nats
        let expected = 40.0f64.ln() - 2.5;
        assert!((das(40.0, 2.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn das_rejects_nonpositive_density() {
        assert!(matches!(das(0.0, 1.0), Err(CoreError::Domain(_))));
        assert!(matches!(das(-3.0, 1.0), Err(CoreError::Domain(_))));
    }

    #[test]
    fn das_monotonic_in_both_arguments() {
        let base = das(10.0, 2.0).unwrap();
        assert!(das(11.0, 2.0).unwrap() > base);
        assert!(das(10.0, 1.5).unwrap() > base);
    }

    #[test]
    fn two_question_sem() {
        // per-question mean steps {4, 6} -> mean 5, sem = stddev/sqrt(2) = sqrt(2)/sqrt(2) = 1
        let stats = vec![
            TraceStats {
                question_id: "a".into(),
                n_steps: 4,
                n_tokens: 40,
                rho: 10.0,
            },
            TraceStats {
                question_id: "b".into(),
                n_steps: 6,
                n_tokens: 60,
                rho: 10.0,
            },
        ];
        let cs = corpus_stats(&stats).unwrap();
        assert_eq!(cs.mean_steps, 5.0);
        assert!((cs.sem_steps.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_question_has_no_sem() {
        let stats = vec![
            TraceStats {
                question_id: "a".into(),
                n_steps: 4,
                n_tokens: 40,
                rho: 10.0,
            },
            TraceStats {
                question_id: "a".into(),
                n_steps: 8,
                n_tokens: 40,
                rho: 5.0,
            },
        ];
        let cs = corpus_stats(&stats).unwrap();
        assert_eq!(cs.mean_steps, 6.0);
        assert!(cs.sem_steps.is_none());
        assert!(cs.sem_rho.is_none());
        assert!(cs.sem_tokens.is_none());
    }

    #[test]
    fn eight_by_ten_matches_spreadsheet_style_oracle() {
        // 8 samples for each of 10 questions, aggregated independently:
        // per-question means first, then mean and sample-stddev/sqrt(n).
        let stats: Vec<TraceStats> = (0..80)
            .map(|i| {
                let q = i / 8;
                let steps = 2 + (i * 3 + q) % 7;
                let tokens = 40 + (i * 11) % 90;
                TraceStats {
                    question_id: format!("q{q}"),
                    n_steps: steps,
                    n_tokens: tokens,
                    rho: tokens as f64 / steps as f64,
                }
            })
            .collect();
        let cs = corpus_stats(&stats).unwrap();

        let mut q_step_means = Vec::new();
        let mut q_rho_means = Vec::new();
        let mut q_token_means = Vec::new();
        for q in 0..10 {
            let group: Vec<&TraceStats> = stats
                .iter()
                .filter(|s| s.question_id == format!("q{q}"))
                .collect();
            assert_eq!(group.len(), 8);
            let n = group.len() as f64;
            q_step_means.push(group.iter().map(|s| s.n_steps as f64).sum::<f64>() / n);
            q_rho_means.push(group.iter().map(|s| s.rho).sum::<f64>() / n);
            q_token_means.push(group.iter().map(|s| s.n_tokens as f64).sum::<f64>() / n);
        }
        let oracle = |values: &[f64]| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt() / n.sqrt())
        };
        let (m, s) = oracle(&q_step_means);
        assert!((cs.mean_steps - m).abs() < 1e-12);
        assert!((cs.sem_steps.unwrap() - s).abs() < 1e-12);
        let (m, s) = oracle(&q_rho_means);
        assert!((cs.mean_rho - m).abs() < 1e-12);
        assert!((cs.sem_rho.unwrap() - s).abs() < 1e-12);
        let (m, s) = oracle(&q_token_means);
        assert!((cs.mean_tokens - m).abs() < 1e-12);
        assert!((cs.sem_tokens.unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn corpus_stats_permutation_invariant() {
        let mut stats: Vec<TraceStats> = (0..24)
            .map(|i| TraceStats {
                question_id: format!("q{}", i % 6),
                n_steps: 3 + i % 5,
                n_tokens: 50 + 7 * i,
                rho: (50 + 7 * i) as f64 / (3 + i % 5) as f64,
            })
            .collect();
        let forward = corpus_stats(&stats).unwrap();
        stats.reverse();
        stats.swap(0, 10);
        let shuffled = corpus_stats(&stats).unwrap();
        assert_eq!(forward, shuffled);
    }

    #[test]
    fn trace_record_round_trip() {
        let records = vec![
            TraceRecord {
                question_id: "q1".into(),
                question: "what is 2+2?".into(),
                solution: "2+2 = <<2+2=4>>4\n\nFinal Answer: \\boxed{4}".into(),
                sample_index: 0,
            },
            TraceRecord {
                question_id: "q2".into(),
                question: "unicode ×".into(),
                solution: "3 × 3 = 9".into(),
                sample_index: 1,
            },
        ];
        let mut buffer = Vec::new();
        write_trace_records(&mut buffer, &records).unwrap();
        let back = read_trace_records(buffer.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn read_reports_bad_line_number() {
        let data = b"{\"question_id\":\"a\",\"question\":\"q\",\"solution\":\"s\",\"sample_index\":0}\nnot json\n";
        let err = read_trace_records(&data[..]).unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
