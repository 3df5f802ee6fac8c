//! Sequential prune, fine-tune, evaluate loop over a registry of layer
//! selection strategies, and the layer-randomization tests.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, Corpus, Sample, TokenBatch};
use crate::fusion::{
    extract_importance, fit_forest, fit_linear, measure_impacts, select_layer, ForestParams, FusionError,
    FusionModel, Importance, DEFAULT_RIDGE,
};
use crate::model::{size_gb, ModelError, ModelState, ParamDims};
use crate::signals::{signal_index, SignalError, SignalMatrix, SIGNAL_NAMES};
use crate::train::{fine_tune, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("{steps} steps requested but only {available} layers can be pruned")]
    TooManySteps { steps: usize, available: usize },
    #[error("random10 needs at least 3 layers, model has {0}")]
    TooFewLayers(usize),
    #[error("invalid pruning config: {0}")]
    InvalidConfig(String),
    #[error("signal matrix has no rows")]
    EmptyMatrix,
    #[error("non-finite {signal} signal for layer {layer}")]
    NonFiniteSignal { signal: &'static str, layer: usize },
    #[error("{0} is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PruneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PruneMinFirst,
    PruneMaxFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Signal,
    LinearFusion,
    ForestFusion,
    Random,
    Random12,
    Random10,
}

/// A named layer-selection rule. Signal strategies carry the column they read
/// and the direction fixed by the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: &'static str,
    pub kind: StrategyKind,
    pub direction: Option<Direction>,
}

const MAX_FIRST: [&str; 2] = ["weight_sparsity", "attention_entropy"];

impl StrategySpec {
    pub fn parse(name: &str) -> Result<Self> {
        if let Some(i) = signal_index(name) {
            let direction = if MAX_FIRST.contains(&name) {
                Direction::PruneMaxFirst
            } else {
                Direction::PruneMinFirst
            };
            return Ok(StrategySpec {
                name: SIGNAL_NAMES[i],
                kind: StrategyKind::Signal,
                direction: Some(direction),
            });
        }
        let (name, kind) = match name {
            "linear_fusion" => ("linear_fusion", StrategyKind::LinearFusion),
            "forest_fusion" => ("forest_fusion", StrategyKind::ForestFusion),
            "random" => ("random", StrategyKind::Random),
            "random12" => ("random12", StrategyKind::Random12),
            "random10" => ("random10", StrategyKind::Random10),
            _ => return Err(PruneError::UnknownStrategy(name.to_string())),
        };
        Ok(StrategySpec {
            name,
            kind,
            direction: None,
        })
    }

    /// The 12 signal strategies, both fusions and the random baseline.
    pub fn registry() -> Vec<StrategySpec> {
        SIGNAL_NAMES
            .iter()
            .chain(&["linear_fusion", "forest_fusion", "random"])
            .map(|n| StrategySpec::parse(n).expect("registry names parse"))
            .collect()
    }

    pub fn is_random(&self) -> bool {
        matches!(self.kind, StrategyKind::Random | StrategyKind::Random12 | StrategyKind::Random10)
    }

    pub fn is_fusion(&self) -> bool {
        matches!(self.kind, StrategyKind::LinearFusion | StrategyKind::ForestFusion)
    }

    /// Layers this strategy may ever pick in a model with `n_layers` layers.
    pub fn candidates(&self, n_layers: usize) -> Result<Vec<usize>> {
        if self.kind == StrategyKind::Random10 {
            if n_layers < 3 {
                return Err(PruneError::TooFewLayers(n_layers));
            }
            return Ok((1..n_layers - 1).collect());
        }
        Ok((0..n_layers).collect())
    }
}

/// Extremum of the strategy's column in the registry direction; ties go to
/// the lowest layer index.
pub fn next_layer_single_signal(spec: &StrategySpec, matrix: &SignalMatrix) -> Result<usize> {
    let (StrategyKind::Signal, Some(direction)) = (spec.kind, spec.direction) else {
        return Err(PruneError::UnknownStrategy(spec.name.to_string()));
    };
    let column = matrix
        .column(spec.name)
        .ok_or_else(|| PruneError::UnknownStrategy(spec.name.to_string()))?;
    if column.is_empty() {
        return Err(PruneError::EmptyMatrix);
    }
    if let Some(r) = column.iter().position(|v| !v.is_finite()) {
        return Err(PruneError::NonFiniteSignal {
            signal: spec.name,
            layer: matrix.layers[r],
        });
    }
    let better = |a: f64, b: f64| match direction {
        Direction::PruneMinFirst => a < b,
        Direction::PruneMaxFirst => a > b,
    };
    let mut best = 0;
    for r in 1..column.len() {
        let tie = column[r] == column[best] && matrix.layers[r] < matrix.layers[best];
        if better(column[r], column[best]) || tie {
            best = r;
        }
    }
    Ok(matrix.layers[best])
}

/// Everything a pruning run needs besides the model and the strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub steps: usize,
    pub fine_tune: TrainConfig,
    /// Leading samples of the training split used for every fine-tune.
    pub fine_tune_subset: usize,
    pub probe_batches: usize,
    pub probe_batch_size: usize,
    pub ridge: f64,
    pub forest: ForestParams,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            steps: 11,
            fine_tune: TrainConfig::default(),
            fine_tune_subset: 128,
            probe_batches: 4,
            probe_batch_size: 32,
            ridge: DEFAULT_RIDGE,
            forest: ForestParams::default(),
        }
    }
}

impl PruneConfig {
    pub fn fine_tune_samples<'a>(&self, corpus: &'a Corpus) -> &'a [Sample] {
        &corpus.train[..self.fine_tune_subset.min(corpus.train.len())]
    }

    pub fn probes(&self, corpus: &Corpus) -> Vec<TokenBatch> {
        let n = (self.probe_batches * self.probe_batch_size).min(corpus.val.len());
        batches(&corpus.val[..n], self.probe_batch_size.max(1))
    }
}

/// Derives independent seeds for the purposes a run needs from one base
/// seed, so that e.g. fine-tuning at step 3 does not depend on the strategy.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

const STREAM_FINE_TUNE: u64 = 1;
const STREAM_RANDOM: u64 = 2;
const STREAM_REPEAT: u64 = 3;
const STREAM_FOREST: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// `None` for the baseline entry.
    pub pruned_layer: Option<usize>,
    pub test_accuracy: f64,
    pub param_count: u64,
    pub size_gb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningTrace {
    pub strategy: String,
    pub seed: u64,
    pub n_layers: usize,
    pub steps: Vec<TraceStep>,
    pub prune_order: Vec<usize>,
}

impl PruningTrace {
    pub fn baseline_accuracy(&self) -> f64 {
        self.steps[0].test_accuracy
    }

    /// Best test accuracy and the step it occurred at. The first maximum
    /// wins. `None` when the baseline is excluded and nothing was pruned.
    pub fn max_accuracy(&self, include_baseline: bool) -> Option<(usize, f64)> {
        let skip = usize::from(!include_baseline);
        self.steps
            .iter()
            .skip(skip)
            .fold(None, |best: Option<(usize, f64)>, s| match best {
                Some((_, a)) if a >= s.test_accuracy => best,
                _ => Some((s.step, s.test_accuracy)),
            })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,pruned_layer,test_accuracy,param_count,size_gb")?;
        for s in &self.steps {
            let layer = s.pruned_layer.map(|l| l.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{:e}", s.step, layer, s.test_accuracy, s.param_count, s.size_gb)?;
        }
        Ok(())
    }
}

/// One record of the run log, enough to replay every selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub live_layers: Vec<usize>,
    /// Signal rows of `live_layers`, in canonical column order.
    pub signals: Option<Vec<[f64; 12]>>,
    pub impacts: Option<Vec<f64>>,
    pub predicted: Option<Vec<f64>>,
    pub chosen: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

impl StepLog {
    pub fn signal_matrix(&self) -> Option<SignalMatrix> {
        let rows = self.signals.as_ref()?;
        Some(SignalMatrix {
            layers: self.live_layers.clone(),
            rows: rows.iter().map(|r| crate::signals::SignalVector::from_array(*r)).collect(),
        })
    }
}

pub fn write_log<W: Write>(mut out: W, log: &[StepLog]) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

pub struct RunOutcome {
    pub trace: PruningTrace,
    pub log: Vec<StepLog>,
    /// Regressor importances from the first fusion fit.
    pub importance: Option<Importance>,
    /// Model at the best pruned step, or the input model when `steps = 0`.
    pub best_model: ModelState,
}

impl RunOutcome {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut trace = Vec::new();
        self.trace.write_csv(&mut trace)?;
        std::fs::write(dir.join(format!("{stem}_trace.csv")), trace)?;
        let mut log = Vec::new();
        write_log(&mut log, &self.log)?;
        std::fs::write(dir.join(format!("{stem}_log.jsonl")), log)?;
        Ok(())
    }
}

fn trace_step(step: usize, layer: Option<usize>, acc: f64, model: &ModelState) -> TraceStep {
    let params = model.param_count();
    TraceStep {
        step,
        pruned_layer: layer,
        test_accuracy: acc,
        param_count: params,
        size_gb: size_gb(params),
    }
}

/// Parameters removed by pruning one layer of `model`.
pub fn per_layer_params(model: &ModelState) -> u64 {
    ParamDims::from_config(&model.config).per_layer_params()
}

/// Prunes `config.steps` layers of `model0` one at a time with `spec`,
/// fine-tuning after each removal and scoring the test split.
///
/// Fine-tuning seeds depend only on `seed` and the step, so every strategy
/// sees the same fine-tuning protocol. Random strategies draw their order
/// from `seed`; the caller derives distinct seeds for repeats.
pub fn run_strategy(
    spec: &StrategySpec,
    model0: &ModelState,
    corpus: &Corpus,
    config: &PruneConfig,
    seed: u64,
) -> Result<RunOutcome> {
    for (name, split) in [("train split", &corpus.train), ("val split", &corpus.val), ("test split", &corpus.test)] {
        if split.is_empty() {
            return Err(PruneError::EmptySplit(name));
        }
    }
    let candidates = spec.candidates(model0.n_layers())?;
    let available: Vec<usize> = candidates.into_iter().filter(|&l| !model0.is_pruned(l)).collect();
    if config.steps > available.len() {
        return Err(PruneError::TooManySteps {
            steps: config.steps,
            available: available.len(),
        });
    }

    let mut model = model0.clone();
    let train = config.fine_tune_samples(corpus);
    let probes = if spec.is_random() { Vec::new() } else { config.probes(corpus) };
    let mut random_order = available.clone();
    random_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_RANDOM, 0)));

    let base_acc = model.accuracy(&corpus.test)?;
    let mut trace = PruningTrace {
        strategy: spec.name.to_string(),
        seed,
        n_layers: model0.n_layers(),
        steps: vec![trace_step(0, None, base_acc, &model)],
        prune_order: Vec::new(),
    };
    let mut log = Vec::new();
    let mut importance = None;
    let mut best: Option<(f64, ModelState)> = None;

    for step in 1..=config.steps {
        let live = model.live_layers();
        let mut rec = StepLog {
            step,
            live_layers: live.clone(),
            signals: None,
            impacts: None,
            predicted: None,
            chosen: 0,
            train_loss: 0.0,
            test_accuracy: 0.0,
        };
        let chosen = if spec.is_random() {
            random_order[step - 1]
        } else {
            let matrix = crate::signals::build_signal_matrix(&model, &probes)?;
            rec.signals = Some(matrix.features());
            match spec.kind {
                StrategyKind::Signal => next_layer_single_signal(spec, &matrix)?,
                _ => {
                    let impacts = measure_impacts(&model, &corpus.val)?;
                    let x = matrix.features();
                    let fitted = match spec.kind {
                        StrategyKind::LinearFusion => FusionModel::Linear(fit_linear(&x, &impacts.delta, config.ridge)?),
                        _ => {
                            let params = ForestParams {
                                seed: derive_seed(seed, STREAM_FOREST, step as u64),
                                ..config.forest.clone()
                            };
                            FusionModel::Forest(fit_forest(&x, &impacts.delta, &params)?)
                        }
                    };
                    let predicted = fitted.predict_all(&x);
                    if importance.is_none() {
                        importance = Some(extract_importance(&fitted));
                    }
                    let chosen = select_layer(&live, &predicted)?;
                    rec.impacts = Some(impacts.delta);
                    rec.predicted = Some(predicted);
                    chosen
                }
            }
        };

        model.prune_layer(chosen)?;
        let ft = TrainConfig {
            seed: derive_seed(seed, STREAM_FINE_TUNE, step as u64),
            ..config.fine_tune.clone()
        };
        let report = fine_tune(&mut model, train, &ft)?;
        let acc = model.accuracy(&corpus.test)?;

        rec.chosen = chosen;
        rec.train_loss = report.final_loss().unwrap_or(f64::NAN);
        rec.test_accuracy = acc;
        log.push(rec);
        trace.prune_order.push(chosen);
        trace.steps.push(trace_step(step, Some(chosen), acc, &model));
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, model.clone()));
        }
    }

    Ok(RunOutcome {
        trace,
        log,
        importance,
        best_model: best.map(|(_, m)| m).unwrap_or_else(|| model0.clone()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub max_accuracy: f64,
    pub prune_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationResult {
    pub kind: String,
    pub master_seed: u64,
    pub repeats: Vec<RepeatResult>,
    pub mean_max_accuracy: f64,
}

/// `repeats` full random runs, each with a seed derived from `master_seed`
/// and the repeat index. random10 never touches the first and last layers
/// and so prunes at most `n_layers - 2` of them.
pub fn randomization_test(
    kind: &str,
    repeats: usize,
    master_seed: u64,
    model0: &ModelState,
    corpus: &Corpus,
    config: &PruneConfig,
) -> Result<RandomizationResult> {
    let spec = StrategySpec::parse(kind)?;
    if !matches!(spec.kind, StrategyKind::Random12 | StrategyKind::Random10) {
        return Err(PruneError::UnknownStrategy(kind.to_string()));
    }
    if repeats == 0 {
        return Err(PruneError::InvalidConfig("repeats must be positive".into()));
    }
    let available = spec.candidates(model0.n_layers())?.len();
    let config = PruneConfig {
        steps: config.steps.min(available),
        ..config.clone()
    };
    let results: Vec<RepeatResult> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(master_seed, STREAM_REPEAT, r as u64);
            let out = run_strategy(&spec, model0, corpus, &config, seed)?;
            let max_accuracy = out
                .trace
                .max_accuracy(config.steps == 0)
                .map(|(_, a)| a)
                .unwrap_or(f64::NAN);
            Ok(RepeatResult {
                repeat: r,
                seed,
                max_accuracy,
                prune_order: out.trace.prune_order,
            })
        })
        .collect::<Result<_>>()?;
    let mean_max_accuracy = results.iter().map(|r| r.max_accuracy).sum::<f64>() / results.len() as f64;
    Ok(RandomizationResult {
        kind: spec.name.to_string(),
        master_seed,
        repeats: results,
        mean_max_accuracy,
    })
}

/// The uncompressed starting point of every run: a fresh model trained on
/// the full training split.
pub fn train_baseline(model: &mut ModelState, corpus: &Corpus, config: &TrainConfig) -> Result<f64> {
    let report = fine_tune(model, &corpus.train, config)?;
    Ok(report.final_loss().unwrap_or(f64::NAN))
}
