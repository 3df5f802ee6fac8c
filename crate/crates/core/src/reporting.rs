//! Aggregation of pruning traces into analysis tables, and their emission as
//! CSV and JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Importance;
use crate::model::size_gb_at;
use crate::pruning::{PruningTrace, RandomizationResult, StepLog, StrategySpec};
use crate::signals::{signal_index, SIGNAL_NAMES};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("ranking needs at least 2 strategies, got {0}")]
    TooFewStrategies(usize),
    #[error("strategy {0} listed twice")]
    DuplicateStrategy(String),
    #[error("baseline accuracy must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("model size must be positive")]
    ZeroSize,
    #[error("traces disagree on layer count: {expected} vs {found}")]
    InconsistentLayers { expected: usize, found: usize },
    #[error("trace {strategy}/{seed} has no baseline step")]
    EmptyTrace { strategy: String, seed: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Ranks `S` strategies by accuracy: the best gets `S`, the worst 1. Equal
/// accuracies are ordered by name, so the alphabetically first of a tied
/// group takes the higher rank and the result is always a permutation.
pub fn rank_strategies(accuracies: &[(String, f64)]) -> Result<Vec<(String, usize)>> {
    if accuracies.len() < 2 {
        return Err(ReportError::TooFewStrategies(accuracies.len()));
    }
    let mut names: Vec<&String> = accuracies.iter().map(|a| &a.0).collect();
    names.sort();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(ReportError::DuplicateStrategy(w[0].clone()));
    }
    let mut sorted: Vec<&(String, f64)> = accuracies.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let s = sorted.len();
    let ranked: Vec<(String, usize)> = sorted
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), s - i))
        .collect();
    Ok(ranked)
}

/// Percent change of `max` relative to `baseline`.
pub fn accuracy_change_vs_baseline(max: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(ReportError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (max - baseline) / baseline)
}

/// Percent improvement of the accuracy-to-size ratio of a compressed model
/// over the base model, with sizes at 32-bit weights.
pub fn accuracy_to_size_improvement(acc_c: f64, params_c: u64, acc_b: f64, params_b: u64) -> Result<f64> {
    accuracy_to_size_improvement_at(acc_c, params_c, acc_b, params_b, 4)
}

pub fn accuracy_to_size_improvement_at(
    acc_c: f64,
    params_c: u64,
    acc_b: f64,
    params_b: u64,
    bytes_per_param: u64,
) -> Result<f64> {
    Ok(100.0 * (accuracy_to_size_factor(acc_c, params_c, acc_b, params_b, bytes_per_param)? - 1.0))
}

fn accuracy_to_size_factor(acc_c: f64, params_c: u64, acc_b: f64, params_b: u64, bytes: u64) -> Result<f64> {
    let (size_c, size_b) = (size_gb_at(params_c, bytes), size_gb_at(params_b, bytes));
    if size_c <= 0.0 || size_b <= 0.0 {
        return Err(ReportError::ZeroSize);
    }
    Ok((acc_c / size_c) / (acc_b / size_b))
}

/// Mean pruning rank of every layer, per strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n_layers: usize,
    /// Sorted strategy names, one row of `mean_rank` each.
    pub strategies: Vec<String>,
    pub mean_rank: Vec<Vec<f64>>,
    pub n_traces: Vec<usize>,
}

/// A layer pruned first has rank 1. Layers a trace never pruned get
/// `steps + 1`, so every mean lies in `[1, steps + 1]`.
pub fn prune_order_heatmap(traces: &[&PruningTrace]) -> Result<Heatmap> {
    let n_layers = traces.first().map_or(0, |t| t.n_layers);
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for t in traces {
        if t.n_layers != n_layers {
            return Err(ReportError::InconsistentLayers {
                expected: n_layers,
                found: t.n_layers,
            });
        }
        if t.steps.is_empty() {
            return Err(ReportError::EmptyTrace {
                strategy: t.strategy.clone(),
                seed: t.seed,
            });
        }
        let never = t.steps.len() as f64;
        let mut rank = vec![never; n_layers];
        for (k, &layer) in t.prune_order.iter().enumerate() {
            rank[layer] = (k + 1) as f64;
        }
        let entry = sums.entry(&t.strategy).or_insert_with(|| (vec![0.0; n_layers], 0));
        for (s, r) in entry.0.iter_mut().zip(rank) {
            *s += r;
        }
        entry.1 += 1;
    }
    let mut heatmap = Heatmap {
        n_layers,
        strategies: Vec::new(),
        mean_rank: Vec::new(),
        n_traces: Vec::new(),
    };
    for (name, (sum, n)) in sums {
        heatmap.strategies.push(name.to_string());
        heatmap.mean_rank.push(sum.iter().map(|s| s / n as f64).collect());
        heatmap.n_traces.push(n);
    }
    Ok(heatmap)
}

/// Everything one pruning run contributes to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub trace: PruningTrace,
    pub log: Vec<StepLog>,
    pub importance: Option<Importance>,
}

/// The informed run and the random repeats it is compared against, for one
/// dataset and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRecord {
    pub dataset: String,
    pub seed: u64,
    pub forest_max_accuracy: f64,
    pub forest_prune_order: Vec<usize>,
    pub results: Vec<RandomizationResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub dataset: String,
    pub seed: u64,
    pub acc_original: f64,
    pub acc_compressed: f64,
    pub acc_distilled: f64,
    pub original_params: u64,
    pub params: u64,
    pub size_gb: f64,
    /// Accuracy-to-size ratio of the distilled model as a multiple of the
    /// original model's ratio.
    pub accuracy_to_size_ratio: f64,
}

impl DistillRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dataset: &str,
        seed: u64,
        acc_original: f64,
        original_params: u64,
        acc_compressed: f64,
        params: u64,
        acc_distilled: f64,
    ) -> Result<Self> {
        Ok(DistillRow {
            dataset: dataset.to_string(),
            seed,
            acc_original,
            acc_compressed,
            acc_distilled,
            original_params,
            params,
            size_gb: size_gb_at(params, 4),
            accuracy_to_size_ratio: accuracy_to_size_factor(acc_distilled, params, acc_original, original_params, 4)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub baseline_params: u64,
    pub max_accuracy: Option<f64>,
    pub argmax_step: Option<usize>,
    pub params_at_max: Option<u64>,
    pub prune_order: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub param_counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxAccuracyRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub max_accuracy: f64,
    pub argmax_step: usize,
    pub prune_order: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub dataset: String,
    pub seed: u64,
    pub strategy: String,
    pub max_accuracy: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccChangeRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub max_accuracy: f64,
    pub change_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccSizeRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub baseline_accuracy: f64,
    pub baseline_params: u64,
    pub max_accuracy: f64,
    pub params: u64,
    pub improvement_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub signal: String,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub dataset: String,
    pub strategy: String,
    pub layer: usize,
    pub mean_prune_rank: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRow {
    pub dataset: String,
    pub seed: u64,
    pub kind: String,
    pub repeat: usize,
    pub max_accuracy: f64,
    pub prune_order: String,
}

/// Where the layer a run chose sits among the attention entropies of the
/// layers still live at that step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyExtremeRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub step: usize,
    pub chosen_layer: usize,
    pub chosen_entropy: f64,
    pub min_entropy: f64,
    pub max_entropy: f64,
    pub at_min: bool,
    pub at_max: bool,
}

/// Cross-seed aggregates per dataset and strategy. Standard deviations are
/// sample deviations (divisor `n - 1`), zero for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub strategy: String,
    pub n_seeds: usize,
    pub mean_max_accuracy: f64,
    pub std_max_accuracy: f64,
    pub mean_rank: Option<f64>,
    pub mean_change_percent: f64,
    pub mean_size_improvement_percent: f64,
    /// Share of selections that hit the lowest or highest attention entropy
    /// among live layers, when signals were logged.
    pub entropy_extreme_share: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Whether max accuracy also considers the unpruned step.
    pub include_baseline: bool,
    pub runs: Vec<RunSummary>,
    pub max_accuracy: Vec<MaxAccuracyRow>,
    pub ranks: Vec<RankRow>,
    pub acc_change: Vec<AccChangeRow>,
    pub acc_size_improvement: Vec<AccSizeRow>,
    pub importances: Vec<ImportanceRow>,
    pub prune_order_heatmap: Vec<HeatmapRow>,
    pub randomization_tests: Vec<RandomizationRow>,
    pub distill: Vec<DistillRow>,
    pub attention_entropy_extremes: Vec<EntropyExtremeRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn strategy_order(name: &str) -> usize {
    StrategySpec::registry()
        .iter()
        .position(|s| s.name == name)
        .unwrap_or(usize::MAX)
}

fn join(order: &[usize]) -> String {
    order.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn entropy_rows(run: &RunRecord) -> Vec<EntropyExtremeRow> {
    let col = signal_index("attention_entropy").expect("canonical signal");
    let mut rows = Vec::new();
    for rec in &run.log {
        let Some(signals) = &rec.signals else { continue };
        let Some(pos) = rec.live_layers.iter().position(|&l| l == rec.chosen) else {
            continue;
        };
        let values: Vec<f64> = signals.iter().map(|r| r[col]).collect();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(EntropyExtremeRow {
            dataset: run.dataset.clone(),
            strategy: run.trace.strategy.clone(),
            seed: run.trace.seed,
            step: rec.step,
            chosen_layer: rec.chosen,
            chosen_entropy: values[pos],
            min_entropy: min,
            max_entropy: max,
            at_min: values[pos] == min,
            at_max: values[pos] == max,
        });
    }
    rows
}

/// Builds every table. Rows are ordered by dataset, then strategy in
/// registry order, then seed, whatever the order of the inputs.
pub fn build_report(
    runs: &[RunRecord],
    randomization: &[RandomizationRecord],
    distill: &[DistillRow],
    include_baseline: bool,
) -> Result<ExperimentReport> {
    let mut runs: Vec<&RunRecord> = runs.iter().collect();
    runs.sort_by(|a, b| {
        (&a.dataset, strategy_order(&a.trace.strategy), &a.trace.strategy, a.trace.seed).cmp(&(
            &b.dataset,
            strategy_order(&b.trace.strategy),
            &b.trace.strategy,
            b.trace.seed,
        ))
    });
    let mut report = ExperimentReport {
        include_baseline,
        ..ExperimentReport::default()
    };

    for run in &runs {
        let t = &run.trace;
        let Some(base) = t.steps.first() else {
            return Err(ReportError::EmptyTrace {
                strategy: t.strategy.clone(),
                seed: t.seed,
            });
        };
        let best = t.max_accuracy(include_baseline);
        let params_at_max = best.map(|(k, _)| t.steps[k].param_count);
        report.runs.push(RunSummary {
            dataset: run.dataset.clone(),
            strategy: t.strategy.clone(),
            seed: t.seed,
            baseline_accuracy: base.test_accuracy,
            baseline_params: base.param_count,
            max_accuracy: best.map(|b| b.1),
            argmax_step: best.map(|b| b.0),
            params_at_max,
            prune_order: t.prune_order.clone(),
            accuracies: t.steps.iter().map(|s| s.test_accuracy).collect(),
            param_counts: t.steps.iter().map(|s| s.param_count).collect(),
        });
        if let (Some((step, acc)), Some(params)) = (best, params_at_max) {
            report.max_accuracy.push(MaxAccuracyRow {
                dataset: run.dataset.clone(),
                strategy: t.strategy.clone(),
                seed: t.seed,
                baseline_accuracy: base.test_accuracy,
                max_accuracy: acc,
                argmax_step: step,
                prune_order: join(&t.prune_order),
            });
            report.acc_change.push(AccChangeRow {
                dataset: run.dataset.clone(),
                strategy: t.strategy.clone(),
                seed: t.seed,
                baseline_accuracy: base.test_accuracy,
                max_accuracy: acc,
                change_percent: accuracy_change_vs_baseline(acc, base.test_accuracy)?,
            });
            report.acc_size_improvement.push(AccSizeRow {
                dataset: run.dataset.clone(),
                strategy: t.strategy.clone(),
                seed: t.seed,
                baseline_accuracy: base.test_accuracy,
                baseline_params: base.param_count,
                max_accuracy: acc,
                params,
                improvement_percent: accuracy_to_size_improvement(acc, params, base.test_accuracy, base.param_count)?,
            });
        }
        if let Some(imp) = &run.importance {
            for (j, name) in SIGNAL_NAMES.iter().enumerate() {
                report.importances.push(ImportanceRow {
                    dataset: run.dataset.clone(),
                    strategy: t.strategy.clone(),
                    seed: t.seed,
                    signal: name.to_string(),
                    raw: imp.raw[j],
                    normalized: imp.normalized[j],
                });
            }
        }
        report.attention_entropy_extremes.extend(entropy_rows(run));
    }

    // ranks within each (dataset, seed)
    let mut groups: BTreeMap<(&str, u64), Vec<(String, f64)>> = BTreeMap::new();
    for row in &report.max_accuracy {
        groups
            .entry((&row.dataset, row.seed))
            .or_default()
            .push((row.strategy.clone(), row.max_accuracy));
    }
    let mut ranks = Vec::new();
    for ((dataset, seed), accs) in &groups {
        if accs.len() < 2 {
            continue;
        }
        for (strategy, rank) in rank_strategies(accs)? {
            let max_accuracy = accs.iter().find(|a| a.0 == strategy).map_or(f64::NAN, |a| a.1);
            ranks.push(RankRow {
                dataset: dataset.to_string(),
                seed: *seed,
                strategy,
                max_accuracy,
                rank,
            });
        }
    }
    report.ranks = ranks;

    let datasets: Vec<&str> = {
        let mut d: Vec<&str> = runs.iter().map(|r| r.dataset.as_str()).collect();
        d.dedup();
        d
    };
    for dataset in &datasets {
        let traces: Vec<&PruningTrace> = runs.iter().filter(|r| r.dataset == *dataset).map(|r| &r.trace).collect();
        let heatmap = prune_order_heatmap(&traces)?;
        let mut rows: Vec<HeatmapRow> = Vec::new();
        for (i, name) in heatmap.strategies.iter().enumerate() {
            for layer in 0..heatmap.n_layers {
                rows.push(HeatmapRow {
                    dataset: dataset.to_string(),
                    strategy: name.clone(),
                    layer,
                    mean_prune_rank: heatmap.mean_rank[i][layer],
                    n_seeds: heatmap.n_traces[i],
                });
            }
        }
        rows.sort_by_key(|r| (strategy_order(&r.strategy), r.layer));
        report.prune_order_heatmap.extend(rows);
    }

    let mut keys: Vec<(&str, &str)> = report
        .runs
        .iter()
        .map(|r| (r.dataset.as_str(), r.strategy.as_str()))
        .collect();
    keys.dedup();
    for (dataset, strategy) in keys {
        let pick = |r: &&MaxAccuracyRow| r.dataset == dataset && r.strategy == strategy;
        let maxima: Vec<f64> = report.max_accuracy.iter().filter(pick).map(|r| r.max_accuracy).collect();
        if maxima.is_empty() {
            continue;
        }
        let rank_values: Vec<f64> = report
            .ranks
            .iter()
            .filter(|r| r.dataset == dataset && r.strategy == strategy)
            .map(|r| r.rank as f64)
            .collect();
        let changes: Vec<f64> = report
            .acc_change
            .iter()
            .filter(|r| r.dataset == dataset && r.strategy == strategy)
            .map(|r| r.change_percent)
            .collect();
        let sizes: Vec<f64> = report
            .acc_size_improvement
            .iter()
            .filter(|r| r.dataset == dataset && r.strategy == strategy)
            .map(|r| r.improvement_percent)
            .collect();
        let extremes: Vec<f64> = report
            .attention_entropy_extremes
            .iter()
            .filter(|r| r.dataset == dataset && r.strategy == strategy)
            .map(|r| f64::from(u8::from(r.at_min || r.at_max)))
            .collect();
        report.aggregates.push(AggregateRow {
            dataset: dataset.to_string(),
            strategy: strategy.to_string(),
            n_seeds: maxima.len(),
            mean_max_accuracy: mean(&maxima),
            std_max_accuracy: sample_std(&maxima),
            mean_rank: (!rank_values.is_empty()).then(|| mean(&rank_values)),
            mean_change_percent: mean(&changes),
            mean_size_improvement_percent: mean(&sizes),
            entropy_extreme_share: (!extremes.is_empty()).then(|| mean(&extremes)),
        });
    }

    let mut randomization: Vec<&RandomizationRecord> = randomization.iter().collect();
    randomization.sort_by(|a, b| (&a.dataset, a.seed).cmp(&(&b.dataset, b.seed)));
    for rec in randomization {
        report.randomization_tests.push(RandomizationRow {
            dataset: rec.dataset.clone(),
            seed: rec.seed,
            kind: "forest_fusion".into(),
            repeat: 0,
            max_accuracy: rec.forest_max_accuracy,
            prune_order: join(&rec.forest_prune_order),
        });
        for result in &rec.results {
            for r in &result.repeats {
                report.randomization_tests.push(RandomizationRow {
                    dataset: rec.dataset.clone(),
                    seed: rec.seed,
                    kind: result.kind.clone(),
                    repeat: r.repeat,
                    max_accuracy: r.max_accuracy,
                    prune_order: join(&r.prune_order),
                });
            }
        }
    }

    let mut distill = distill.to_vec();
    distill.sort_by(|a, b| (&a.dataset, a.seed).cmp(&(&b.dataset, b.seed)));
    report.distill = distill;
    Ok(report)
}

fn write_table<T: Serialize>(dir: &Path, file: &str, header: &[&str], rows: &[T]) -> Result<()> {
    let path = dir.join(file);
    let csv_err = |source| ReportError::Csv { path: path.clone(), source };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io { path: path.clone(), source })
}

/// File names written by [`emit_report`], in write order.
pub const REPORT_FILES: [&str; 10] = [
    "max_accuracy.csv",
    "ranks.csv",
    "acc_change.csv",
    "acc_size_improvement.csv",
    "importances.csv",
    "prune_order_heatmap.csv",
    "randomization_tests.csv",
    "distill_report.csv",
    "attention_entropy_extremes.csv",
    "report.json",
];

const DISTILL_HEADER: [&str; 9] = [
    "dataset",
    "seed",
    "acc_original",
    "acc_compressed",
    "acc_distilled",
    "original_params",
    "params",
    "size_gb",
    "accuracy_to_size_ratio",
];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `distill_report.csv` alone.
pub fn emit_distill_report(rows: &[DistillRow], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_table(dir, REPORT_FILES[7], &DISTILL_HEADER, rows)
}

/// Writes every table as CSV plus `report.json` bundling all of them.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_table(
        dir,
        REPORT_FILES[0],
        &["dataset", "strategy", "seed", "baseline_accuracy", "max_accuracy", "argmax_step", "prune_order"],
        &report.max_accuracy,
    )?;
    write_table(
        dir,
        REPORT_FILES[1],
        &["dataset", "seed", "strategy", "max_accuracy", "rank"],
        &report.ranks,
    )?;
    write_table(
        dir,
        REPORT_FILES[2],
        &["dataset", "strategy", "seed", "baseline_accuracy", "max_accuracy", "change_percent"],
        &report.acc_change,
    )?;
    write_table(
        dir,
        REPORT_FILES[3],
        &[
            "dataset",
            "strategy",
            "seed",
            "baseline_accuracy",
            "baseline_params",
            "max_accuracy",
            "params",
            "improvement_percent",
        ],
        &report.acc_size_improvement,
    )?;
    write_table(
        dir,
        REPORT_FILES[4],
        &["dataset", "strategy", "seed", "signal", "raw", "normalized"],
        &report.importances,
    )?;
    write_table(
        dir,
        REPORT_FILES[5],
        &["dataset", "strategy", "layer", "mean_prune_rank", "n_seeds"],
        &report.prune_order_heatmap,
    )?;
    write_table(
        dir,
        REPORT_FILES[6],
        &["dataset", "seed", "kind", "repeat", "max_accuracy", "prune_order"],
        &report.randomization_tests,
    )?;
    write_table(
        dir,
        REPORT_FILES[7],
        &DISTILL_HEADER,
        &report.distill,
    )?;
    write_table(
        dir,
        REPORT_FILES[8],
        &[
            "dataset",
            "strategy",
            "seed",
            "step",
            "chosen_layer",
            "chosen_entropy",
            "min_entropy",
            "max_entropy",
            "at_min",
            "at_max",
        ],
        &report.attention_entropy_extremes,
    )?;
    let path = dir.join(REPORT_FILES[9]);
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|source| ReportError::Io { path, source })
}
