//! Layer/lambda grid sweeps, sensitivity tables, and selection.
//!
//! Selection is a pure function of the grid metrics: highest accuracy, then
//! lowest mean NLL, then smallest |lambda|, then lowest layer index.
//! Re-running selection over a persisted sensitivity CSV reproduces the
//! chosen cell.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::{evaluate, EvalItem, EvalOptions, EvalReport};
use crate::model::{Backend, PositionPolicy};
use crate::steering::{extract_vector, make_hook, ContrastivePair, ExtractOptions, SteeringVector};

/// Metrics for one (layer, lambda) grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub lambda: f64,
    pub accuracy: f64,
    pub mean_steps: Option<f64>,
    pub mean_rho: Option<f64>,
    pub mean_tokens: Option<f64>,
    pub mean_nll: Option<f64>,
}

impl SweepCell {
    pub fn from_report(layer: usize, lambda: f64, report: &EvalReport) -> Self {
        Self {
            layer,
            lambda,
            accuracy: report.aggregates.accuracy,
            mean_steps: report.aggregates.mean_steps,
            mean_rho: report.aggregates.mean_rho,
            mean_tokens: report.aggregates.mean_tokens,
            mean_nll: report.aggregates.mean_nll,
        }
    }
}

/// Grid results plus the selected cell and how ties were broken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub selected_layer: usize,
    pub selected_lambda: f64,
    pub tie_break_trail: Vec<String>,
}

/// Anything that can score one grid cell. The production evaluator extracts
/// a vector per layer and runs a full evaluation; tests may rig the grid.
pub trait CellEvaluator: Sync {
    fn evaluate_cell(&self, layer: usize, lambda: f64) -> Result<EvalReport>;
}

fn cmp_opt_ascending(a: Option<f64>, b: Option<f64>) -> Ordering {
    // Missing metrics lose against present ones.
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Select the winning cell: accuracy desc, mean NLL asc, |lambda| asc,
/// layer asc. Returns the index into `cells` and the narrowing trail.
pub fn select_cell(cells: &[SweepCell]) -> Result<(usize, Vec<String>)> {
    if cells.is_empty() {
        return Err(CoreError::EmptyGrid);
    }
    let mut trail = Vec::new();
    let mut candidates: Vec<usize> = (0..cells.len()).collect();

    let stages: [(&str, fn(&SweepCell, &SweepCell) -> Ordering); 4] = [
        ("accuracy", |a, b| b.accuracy.total_cmp(&a.accuracy)),
        ("mean_nll", |a, b| cmp_opt_ascending(a.mean_nll, b.mean_nll)),
        ("abs_lambda", |a, b| {
            a.lambda.abs().total_cmp(&b.lambda.abs())
        }),
        ("layer", |a, b| a.layer.cmp(&b.layer)),
    ];
    for (name, cmp) in stages {
        if candidates.len() == 1 {
            break;
        }
        let best = candidates
            .iter()
            .copied()
            .min_by(|&i, &j| cmp(&cells[i], &cells[j]))
            .unwrap();
        let before = candidates.len();
        candidates.retain(|&i| cmp(&cells[i], &cells[best]) == Ordering::Equal);
        trail.push(format!(
            "{name}: {before} -> {} candidates",
            candidates.len()
        ));
    }
    Ok((candidates[0], trail))
}

/// Evaluate every (layer, lambda) cell and select the winner.
pub fn sweep(
    evaluator: &impl CellEvaluator,
    layers: &[usize],
    lambdas: &[f64],
) -> Result<SweepResult> {
    if layers.is_empty() || lambdas.is_empty() {
        return Err(CoreError::EmptyGrid);
    }
    let grid: Vec<(usize, f64)> = layers
        .iter()
        .flat_map(|&l| lambdas.iter().map(move |&x| (l, x)))
        .collect();
    let mut cells = Vec::with_capacity(grid.len());
    for &(layer, lambda) in &grid {
        let report = evaluator.evaluate_cell(layer, lambda)?;
        cells.push(SweepCell::from_report(layer, lambda, &report));
    }
    let (selected, tie_break_trail) = select_cell(&cells)?;
    Ok(SweepResult {
        selected_layer: cells[selected].layer,
        selected_lambda: cells[selected].lambda,
        cells,
        tie_break_trail,
    })
}

/// Default lambda grid: the swept range [-20, 20] at the given step.
pub fn lambda_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || max < min {
        return Err(CoreError::Domain(format!(
            "invalid lambda grid [{min}, {max}] step {step}"
        )));
    }
    let mut out = Vec::new();
    let n = ((max - min) / step).round() as i64;
    for k in 0..=n {
        let v = min + k as f64 * step;
        if v <= max + 1e-9 {
            out.push(v);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Production cell evaluator
// ---------------------------------------------------------------------------

/// Cell evaluator backed by a real model: one vector per candidate layer is
/// extracted up front from the same pair set, then each cell evaluates the
/// validation items under `h~ = h + lambda * v`.
pub struct ModelCellEvaluator<'a, B: Backend + Sync> {
    model: &'a B,
    vectors: BTreeMap<usize, SteeringVector>,
    items: &'a [EvalItem],
    opts: EvalOptions,
    policy: PositionPolicy,
}

impl<'a, B: Backend + Sync> ModelCellEvaluator<'a, B> {
    pub fn new(
        model: &'a B,
        pairs: &[ContrastivePair],
        layers: &[usize],
        items: &'a [EvalItem],
        opts: EvalOptions,
        policy: PositionPolicy,
        extract_opts: ExtractOptions,
    ) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for &layer in layers {
            vectors.insert(layer, extract_vector(model, pairs, layer, extract_opts)?);
        }
        Ok(Self {
            model,
            vectors,
            items,
            opts,
            policy,
        })
    }

    pub fn vector(&self, layer: usize) -> Option<&SteeringVector> {
        self.vectors.get(&layer)
    }
}

impl<B: Backend + Sync> CellEvaluator for ModelCellEvaluator<'_, B> {
    fn evaluate_cell(&self, layer: usize, lambda: f64) -> Result<EvalReport> {
        let vector = self
            .vectors
            .get(&layer)
            .ok_or_else(|| CoreError::Config(format!("no vector extracted for layer {layer}")))?;
        let hook = make_hook(vector, self.model, lambda, self.policy, false)?;
        evaluate(self.model, self.items, Some(&hook), &self.opts)
    }
}

// ---------------------------------------------------------------------------
// Sensitivity CSV
// ---------------------------------------------------------------------------

const SENSITIVITY_HEADER: [&str; 7] = [
    "layer",
    "lambda",
    "accuracy",
    "mean_steps",
    "mean_rho",
    "mean_tokens",
    "mean_nll",
];

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the per-cell sensitivity table.
pub fn write_sensitivity_csv(cells: &[SweepCell], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SENSITIVITY_HEADER)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    for c in cells {
        w.write_record([
            c.layer.to_string(),
            c.lambda.to_string(),
            c.accuracy.to_string(),
            opt_field(c.mean_steps),
            opt_field(c.mean_rho),
            opt_field(c.mean_tokens),
            opt_field(c.mean_nll),
        ])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a sensitivity table back; selection over the parsed cells reproduces
/// the original choice.
pub fn read_sensitivity_csv(reader: impl BufRead) -> Result<Vec<SweepCell>> {
    let mut r = csv::Reader::from_reader(reader);
    let parse_opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|e| CoreError::Parse {
                line,
                msg: e.to_string(),
            })
        }
    };
    let mut cells = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let record = record.map_err(|e| CoreError::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != SENSITIVITY_HEADER.len() {
            return Err(CoreError::Parse {
                line,
                msg: format!("expected {} columns", SENSITIVITY_HEADER.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        cells.push(SweepCell {
            layer: field(0).parse().map_err(|e| CoreError::Parse {
                line,
                msg: format!("layer: {e}"),
            })?,
            lambda: field(1).parse().map_err(|e| CoreError::Parse {
                line,
                msg: format!("lambda: {e}"),
            })?,
            accuracy: field(2).parse().map_err(|e| CoreError::Parse {
                line,
                msg: format!("accuracy: {e}"),
            })?,
            mean_steps: parse_opt(field(3), line)?,
            mean_rho: parse_opt(field(4), line)?,
            mean_tokens: parse_opt(field(5), line)?,
            mean_nll: parse_opt(field(6), line)?,
        });
    }
    Ok(cells)
}

/// Sample-weighted mean of per-set accuracies: sum(acc_i * n_i) / sum(n_i).
pub fn weighted_average(entries: &[(f64, usize)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(CoreError::EmptySet("weighted average over no sets".into()));
    }
    let total: usize = entries.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(CoreError::EmptySet(
            "weighted average over zero items".into(),
        ));
    }
    Ok(entries.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / total as f64)
}
