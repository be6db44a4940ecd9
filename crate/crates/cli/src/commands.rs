//! Subcommand implementations.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use densesteer_core::eval::{
    self, evaluate, ingest_dataset, DatasetFormat, EvalItem, EvalOptions, PromptStyle,
};
use densesteer_core::model::{
    init_micro_model, load_weights, Backend, MicroModel, ModelConfig, PositionPolicy,
};
use densesteer_core::pairgen::{
    self, audit, build_pairs, BuildPairsOptions, ExternalRewriterConfig, PairQuestion, PairRecord,
    RewriterMode, RuleRewriteConfig,
};
use densesteer_core::parallel::{map_ordered, run_with_workers};
use densesteer_core::scoring::{nll_histogram, token_nll, write_histogram_csv};
use densesteer_core::steering::{
    extract_vector, load_vector, make_hook, vector_to_bytes, ExtractOptions,
};
use densesteer_core::sweep::{
    lambda_grid, sweep, weighted_average, write_sensitivity_csv, ModelCellEvaluator,
};
use densesteer_core::tokenizer::ByteTokenizer;
use densesteer_core::trace::{density, read_trace_records, write_trace_records, TraceRecord};

use crate::cli::{Cli, Command, DatasetArgs, FormatArg, PolicyArg, PromptArg, RewriterArg};
use crate::runctx::{resolve_config, LayeredConfig, Resolved, RunContext, REPORT_SCHEMA_VERSION};

/// Flag-level misuse: exits with the usage code instead of the domain code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage error: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl From<FormatArg> for DatasetFormat {
    fn from(value: FormatArg) -> Self {
        match value {
            FormatArg::Gsm8kJsonl => DatasetFormat::Gsm8kJsonl,
            FormatArg::PlainJsonl => DatasetFormat::PlainJsonl,
        }
    }
}

impl From<PolicyArg> for PositionPolicy {
    fn from(value: PolicyArg) -> Self {
        match value {
            PolicyArg::GeneratedOnly => PositionPolicy::GeneratedOnly,
            PolicyArg::AllPositions => PositionPolicy::AllPositions,
        }
    }
}

impl From<PromptArg> for PromptStyle {
    fn from(value: PromptArg) -> Self {
        match value {
            PromptArg::Cot => PromptStyle::Cot,
            PromptArg::Dense => PromptStyle::Dense,
        }
    }
}

fn load_backend(resolved: &Resolved, ctx: &mut RunContext, path: &Path) -> Result<MicroModel> {
    if resolved.backend != "micro" {
        return Err(usage(format!(
            "unknown backend {:?}; available: micro",
            resolved.backend
        )));
    }
    ctx.input(path)?;
    Ok(load_weights(path)?)
}

fn read_items(ctx: &mut RunContext, args: &DatasetArgs) -> Result<Vec<EvalItem>> {
    ctx.input(&args.dataset)?;
    let file = File::open(&args.dataset)
        .with_context(|| format!("opening dataset {}", args.dataset.display()))?;
    let mut items = ingest_dataset(BufReader::new(file), args.format.into())?;
    if let Some(limit) = args.limit {
        items.truncate(limit);
    }
    Ok(items)
}

fn read_pairs_file(ctx: &mut RunContext, path: &Path) -> Result<Vec<PairRecord>> {
    ctx.input(path)?;
    let file = File::open(path).with_context(|| format!("opening pairs {}", path.display()))?;
    Ok(pairgen::read_pair_records(BufReader::new(file))?)
}

fn read_traces_file(ctx: &mut RunContext, path: &Path) -> Result<Vec<TraceRecord>> {
    ctx.input(path)?;
    let file = File::open(path).with_context(|| format!("opening traces {}", path.display()))?;
    Ok(read_trace_records(BufReader::new(file))?)
}

fn config_echo(resolved: &Resolved, command: &Command) -> serde_json::Value {
    json!({
        "resolved": resolved,
        "command": format!("{command:?}"),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let flags = LayeredConfig {
        backend: cli.backend.clone(),
        workers: cli.workers,
        max_new_tokens: None,
    };
    let resolved = resolve_config(cli.config.as_deref(), flags)?;
    let workers = resolved.workers;
    run_with_workers(workers, move || dispatch(cli, resolved))
}

fn dispatch(cli: Cli, resolved: Resolved) -> Result<()> {
    let command = cli.command;
    let mut ctx = RunContext::new(subcommand_name(&command), config_echo(&resolved, &command));
    match command {
        Command::InitModel {
            out,
            layers,
            d_model,
            heads,
            d_ff,
            vocab,
            max_seq_len,
            seed,
        } => {
            let config = ModelConfig {
                n_layers: layers,
                d_model,
                n_heads: heads,
                d_ff,
                vocab_size: vocab,
                max_seq_len,
                seed,
            };
            let model = init_micro_model(&config)?;
            ctx.write_output(&out, &model.to_container_bytes())?;
            log::info!("wrote model {} ({})", out.display(), model.fingerprint());
        }

        Command::Generate {
            model,
            dataset,
            out,
            max_new_tokens,
            samples_per_question,
            prompt,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let items = read_items(&mut ctx, &dataset)?;
            let budget = max_new_tokens.unwrap_or(resolved.max_new_tokens);
            let style: PromptStyle = prompt.into();
            let outcomes = map_ordered(&items, |item| {
                let prompt_ids = model
                    .tokenizer()
                    .tokenize(&eval::format_prompt(style, &item.question));
                model
                    .greedy_generate(&prompt_ids, budget, None)
                    .map(|ids| model.tokenizer().detokenize(&ids))
            });
            let mut records = Vec::new();
            for (item, outcome) in items.iter().zip(outcomes) {
                match outcome {
                    Ok(solution) => {
                        for sample_index in 0..samples_per_question.max(1) {
                            records.push(TraceRecord {
                                question_id: item.question_id.clone(),
                                question: item.question.clone(),
                                solution: solution.clone(),
                                sample_index,
                            });
                        }
                    }
                    Err(e) => log::warn!("generation failed for {}: {e}", item.question_id),
                }
            }
            let mut buf = Vec::new();
            write_trace_records(&mut buf, &records)?;
            ctx.write_output(&out, &buf)?;
        }

        Command::BuildPairs {
            model,
            dataset,
            out,
            rewriter,
            n_pairs,
            max_new_tokens,
            short_step_tokens,
            max_merges,
            merge_seed,
            endpoint,
            model_name,
            credential_env,
            cache_dir,
            offline,
            require_gold_match,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let items = read_items(&mut ctx, &dataset)?;
            let questions: Vec<PairQuestion> = items
                .iter()
                .map(|i| PairQuestion {
                    id: i.question_id.clone(),
                    text: i.question.clone(),
                    gold_answer: Some(i.gold_answer.clone()),
                })
                .collect();
            let mode = match rewriter {
                RewriterArg::Rule => RewriterMode::RuleBased(RuleRewriteConfig {
                    short_step_max_tokens: short_step_tokens,
                    max_merges_per_trace: max_merges,
                }),
                RewriterArg::Random => RewriterMode::RandomCompression {
                    merge_seed,
                    max_merges,
                },
                RewriterArg::External => {
                    let endpoint = endpoint
                        .ok_or_else(|| usage("--endpoint is required with --rewriter external"))?;
                    let model_name = model_name.ok_or_else(|| {
                        usage("--model-name is required with --rewriter external")
                    })?;
                    let cache_dir = cache_dir
                        .ok_or_else(|| usage("--cache-dir is required with --rewriter external"))?;
                    let mut config = ExternalRewriterConfig::new(&endpoint, &model_name, cache_dir);
                    config.credential_env = credential_env;
                    config.offline = offline;
                    RewriterMode::External(config)
                }
            };
            let options = BuildPairsOptions {
                n_pairs,
                max_new_tokens: max_new_tokens.unwrap_or(resolved.max_new_tokens),
                require_gold_match,
                samples_per_question: 1,
            };
            let built = build_pairs(&model, &questions, &mode, &options)?;
            log::info!(
                "built {} pairs ({} exclusions)",
                built.pairs.len(),
                built.exclusions.len()
            );
            let mut buf = Vec::new();
            pairgen::write_pair_records(&mut buf, &built.to_records())?;
            ctx.write_output(&out, &buf)?;
        }

        Command::AuditPairs { pairs, out } => {
            let records = read_pairs_file(&mut ctx, &pairs)?;
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record([
                "question_id",
                "steps_neg",
                "steps_pos",
                "density_neg",
                "density_pos",
                "edit_similarity",
                "adjacent_merge_ratio",
                "answer_preserved",
                "markers_preserved",
            ])?;
            for record in &records {
                let report = audit(&record.to_pair(&ByteTokenizer));
                writer.write_record([
                    record.question_id.clone(),
                    report.steps_neg.to_string(),
                    report.steps_pos.to_string(),
                    report.density_neg.to_string(),
                    report.density_pos.to_string(),
                    report.edit_similarity.to_string(),
                    report.adjacent_merge_ratio.to_string(),
                    report.answer_preserved.to_string(),
                    report.markers_preserved.to_string(),
                ])?;
            }
            let buf = writer.into_inner().context("flushing audit csv")?;
            ctx.write_output(&out, &buf)?;
        }

        Command::ExtractVector {
            model,
            pairs,
            layer,
            out,
            bare_question,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let records = read_pairs_file(&mut ctx, &pairs)?;
            let pairs: Vec<_> = records
                .iter()
                .map(|r| r.to_pair(model.tokenizer()))
                .collect();
            let opts = ExtractOptions {
                use_cot_template: !bare_question,
            };
            let vector = extract_vector(&model, &pairs, layer, opts)?;
            ctx.write_output(&out, &vector_to_bytes(&vector))?;
        }

        Command::SteerGenerate {
            model,
            vector,
            lambda,
            dataset,
            out,
            max_new_tokens,
            policy,
            force_fingerprint,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            ctx.input(&vector)?;
            let vector = load_vector(&vector)?;
            let hook = make_hook(&vector, &model, lambda, policy.into(), force_fingerprint)?;
            let items = read_items(&mut ctx, &dataset)?;
            let budget = max_new_tokens.unwrap_or(resolved.max_new_tokens);
            let outcomes = map_ordered(&items, |item| {
                let prompt_ids = model
                    .tokenizer()
                    .tokenize(&eval::format_prompt(PromptStyle::Cot, &item.question));
                model
                    .greedy_generate(&prompt_ids, budget, Some(&hook))
                    .map(|ids| model.tokenizer().detokenize(&ids))
            });
            let mut records = Vec::new();
            for (item, outcome) in items.iter().zip(outcomes) {
                match outcome {
                    Ok(solution) => records.push(TraceRecord {
                        question_id: item.question_id.clone(),
                        question: item.question.clone(),
                        solution,
                        sample_index: 0,
                    }),
                    Err(e) => log::warn!("generation failed for {}: {e}", item.question_id),
                }
            }
            let mut buf = Vec::new();
            write_trace_records(&mut buf, &records)?;
            ctx.write_output(&out, &buf)?;
        }

        Command::ScoreNll {
            model,
            traces,
            out,
            histogram,
            bin_width,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let records = read_traces_file(&mut ctx, &traces)?;
            let scored = map_ordered(&records, |record| {
                let prompt_ids = model
                    .tokenizer()
                    .tokenize(&eval::format_prompt(PromptStyle::Cot, &record.question));
                let trace_ids = model.tokenizer().tokenize(&record.solution);
                token_nll(&model, &prompt_ids, &trace_ids)
            });
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(["question_id", "sample_index", "t_count", "mean_nll"])?;
            let mut means = Vec::new();
            for (record, result) in records.iter().zip(scored) {
                let result = result?;
                means.push(result.mean_nll);
                writer.write_record([
                    record.question_id.clone(),
                    record.sample_index.to_string(),
                    result.t_count.to_string(),
                    result.mean_nll.to_string(),
                ])?;
            }
            let buf = writer.into_inner().context("flushing nll csv")?;
            ctx.write_output(&out, &buf)?;
            if let Some(histogram_path) = histogram {
                let h = nll_histogram(&means, bin_width)?;
                let mut hbuf = Vec::new();
                write_histogram_csv(&h, &mut hbuf)?;
                ctx.write_output(&histogram_path, &hbuf)?;
            }
        }

        Command::Density { traces, out } => {
            let records = read_traces_file(&mut ctx, &traces)?;
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(["question_id", "n_steps", "n_tokens", "rho"])?;
            for record in &records {
                let trace = record.to_trace(&ByteTokenizer);
                let d = density(&trace)
                    .map_err(|e| anyhow::anyhow!("record {}: {e}", record.question_id))?;
                writer.write_record([
                    record.question_id.clone(),
                    d.n_steps.to_string(),
                    d.n_tokens.to_string(),
                    d.rho.to_string(),
                ])?;
            }
            let buf = writer.into_inner().context("flushing density csv")?;
            ctx.write_output(&out, &buf)?;
        }

        Command::Das { rho, nll, out } => {
            let value = densesteer_core::trace::das(rho, nll)?;
            match out {
                Some(path) => {
                    let body = serde_json::to_vec_pretty(&json!({
                        "rho": rho,
                        "nll": nll,
                        "das": value,
                    }))?;
                    ctx.write_output(&path, &body)?;
                }
                None => println!("{value}"),
            }
        }

        Command::Evaluate {
            model,
            dataset,
            vector,
            lambda,
            layer,
            max_new_tokens,
            out,
            prompt,
            policy,
            force_fingerprint,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let items = read_items(&mut ctx, &dataset)?;
            let hook = match &vector {
                Some(path) => {
                    ctx.input(path)?;
                    let v = load_vector(path)?;
                    let mut hook =
                        make_hook(&v, &model, lambda, policy.into(), force_fingerprint)?;
                    if let Some(layer) = layer {
                        hook.layer = layer;
                        hook.validate(model.n_layers(), model.d_model())?;
                    }
                    Some(hook)
                }
                None => None,
            };
            let opts = EvalOptions {
                max_new_tokens: max_new_tokens.unwrap_or(resolved.max_new_tokens),
                prompt_style: prompt.into(),
                vector_file: vector.as_ref().map(|p| p.display().to_string()),
            };
            let report = evaluate(&model, &items, hook.as_ref(), &opts)?;
            let body = serde_json::to_vec_pretty(&json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "report": &report,
            }))?;
            ctx.write_output(&out, &body)?;
            log::info!("accuracy {:.4}", report.aggregates.accuracy);
        }

        Command::Sweep {
            model,
            pairs,
            dataset,
            layers,
            lambda_min,
            lambda_max,
            lambda_step,
            max_new_tokens,
            out,
            sensitivity_csv,
            val_fraction,
            split_seed,
            policy,
            bare_question,
        } => {
            let model = load_backend(&resolved, &mut ctx, &model)?;
            let records = read_pairs_file(&mut ctx, &pairs)?;
            let pair_set: Vec<_> = records
                .iter()
                .map(|r| r.to_pair(model.tokenizer()))
                .collect();
            let mut items = read_items(&mut ctx, &dataset)?;
            if let Some(fraction) = val_fraction {
                let (val, _) = eval::validation_split(&items, fraction, split_seed);
                items = val;
            }
            let layers = if layers.is_empty() {
                (0..model.n_layers()).collect()
            } else {
                layers
            };
            let lambdas = lambda_grid(lambda_min, lambda_max, lambda_step)?;
            let opts = EvalOptions {
                max_new_tokens: max_new_tokens.unwrap_or(resolved.max_new_tokens),
                prompt_style: PromptStyle::Cot,
                vector_file: Some(pairs.display().to_string()),
            };
            let evaluator = ModelCellEvaluator::new(
                &model,
                &pair_set,
                &layers,
                &items,
                opts,
                policy.into(),
                ExtractOptions {
                    use_cot_template: !bare_question,
                },
            )?;
            let result = sweep(&evaluator, &layers, &lambdas)?;
            let mut csv_buf = Vec::new();
            write_sensitivity_csv(&result.cells, &mut csv_buf)?;
            ctx.write_output(&sensitivity_csv, &csv_buf)?;
            let body = serde_json::to_vec_pretty(&json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "sweep": &result,
            }))?;
            ctx.write_output(&out, &body)?;
            log::info!(
                "selected layer {} lambda {}",
                result.selected_layer,
                result.selected_lambda
            );
        }

        Command::Avg {
            accuracies,
            sizes,
            reports,
            out,
        } => {
            let entries: Vec<(f64, usize)> = if !reports.is_empty() {
                let mut entries = Vec::new();
                for path in &reports {
                    ctx.input(path)?;
                    let value: serde_json::Value =
                        serde_json::from_reader(BufReader::new(File::open(path)?))?;
                    let accuracy = value["report"]["aggregates"]["accuracy"]
                        .as_f64()
                        .ok_or_else(|| {
                            anyhow::anyhow!("{}: missing report accuracy", path.display())
                        })?;
                    let n = value["report"]["items"]
                        .as_array()
                        .map(|a| a.len())
                        .unwrap_or(0);
                    entries.push((accuracy, n));
                }
                entries
            } else {
                if accuracies.is_empty() || accuracies.len() != sizes.len() {
                    return Err(usage(
                        "--accuracies and --sizes must be non-empty and equal length",
                    ));
                }
                accuracies.into_iter().zip(sizes).collect()
            };
            let value = weighted_average(&entries)?;
            match out {
                Some(path) => {
                    let body = serde_json::to_vec_pretty(&json!({
                        "entries": entries,
                        "weighted_average": value,
                    }))?;
                    ctx.write_output(&path, &body)?;
                }
                None => println!("{value}"),
            }
        }
    }
    ctx.finish()
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::InitModel { .. } => "init-model",
        Command::Generate { .. } => "generate",
        Command::BuildPairs { .. } => "build-pairs",
        Command::AuditPairs { .. } => "audit-pairs",
        Command::ExtractVector { .. } => "extract-vector",
        Command::SteerGenerate { .. } => "steer-generate",
        Command::ScoreNll { .. } => "score-nll",
        Command::Density { .. } => "density",
        Command::Das { .. } => "das",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
        Command::Avg { .. } => "avg",
    }
}
