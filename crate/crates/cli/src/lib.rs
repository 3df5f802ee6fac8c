//! Orchestration behind the `prunefuse` binary. Every command is a plain
//! function so tests can drive the full pipeline without a subprocess.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use prunefuse::data::{generate_corpus, tokenize_batch, Corpus, DatasetSpec, MAX_LEN};
use prunefuse::distill::{distill_train, kd_loss};
use prunefuse::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use prunefuse::pruning::{randomization_test, run_strategy, train_baseline, RunOutcome, StrategySpec};
use prunefuse::reporting::{
    build_report, emit_distill_report, emit_report, DistillRow, ExperimentReport, RandomizationRecord, RunRecord,
};
use prunefuse::signals::build_signal_matrix;
use prunefuse::train::TrainConfig;

pub mod config;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input files.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

const FOREST: &str = "forest_fusion";
const RANDOMIZATION_KINDS: [&str; 2] = ["random12", "random10"];
const DEFAULT_REPEATS: usize = 10;

pub fn unit_dir(out: &Path, dataset: &str, seed: u64) -> PathBuf {
    out.join("runs").join(dataset).join(format!("seed{seed}"))
}

/// What one (dataset, seed) cell of the grid produced.
#[derive(Debug, Default)]
pub struct UnitOutput {
    pub runs: Vec<RunRecord>,
    pub randomization: Option<RandomizationRecord>,
    pub distill: Option<DistillRow>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(runtime(path.display()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(runtime(path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(runtime(path.display()))?;
    serde_json::from_slice(&bytes).map_err(runtime(path.display()))
}

/// The model every run of `seed` starts from. The seed replaces both the
/// model initialization seed and the training shuffle seed.
pub fn baseline_model(cfg: &RunConfig, corpus: &Corpus, seed: u64) -> Result<ModelState, CliError> {
    let mut model = ModelState::new(ModelConfig {
        seed,
        ..cfg.model.clone()
    })
    .map_err(runtime("model"))?;
    let train = TrainConfig {
        seed,
        ..cfg.baseline.clone()
    };
    train_baseline(&mut model, corpus, &train).map_err(runtime("baseline training"))?;
    Ok(model)
}

fn record(dataset: &str, out: &RunOutcome) -> RunRecord {
    RunRecord {
        dataset: dataset.to_string(),
        trace: out.trace.clone(),
        log: out.log.clone(),
        importance: out.importance.clone(),
    }
}

/// Runs one grid cell and writes its traces, logs, records and checkpoints
/// under [`unit_dir`].
pub fn run_unit(
    cfg: &RunConfig,
    spec: &DatasetSpec,
    corpus: &Corpus,
    seed: u64,
    strategies: &[String],
    repeats: usize,
) -> Result<UnitOutput, CliError> {
    let dir = unit_dir(&cfg.out_dir, &spec.name, seed);
    std::fs::create_dir_all(&dir).map_err(runtime(dir.display()))?;
    info!("{} seed {seed}: training baseline", spec.name);
    let baseline = baseline_model(cfg, corpus, seed)?;
    save_checkpoint(&baseline, &dir.join("baseline.ckpt")).map_err(runtime("baseline checkpoint"))?;

    let mut names: Vec<String> = strategies.to_vec();
    if repeats > 0 && !names.iter().any(|n| n == FOREST) {
        names.push(FOREST.to_string());
    }
    let outcomes: Vec<(String, RunOutcome)> = names
        .par_iter()
        .map(|name| {
            let strategy = StrategySpec::parse(name).map_err(|e| CliError::Usage(e.to_string()))?;
            info!("{} seed {seed}: {name}", spec.name);
            let out = run_strategy(&strategy, &baseline, corpus, &cfg.prune, seed)
                .map_err(runtime(format!("{name} on {} seed {seed}", spec.name)))?;
            Ok((name.clone(), out))
        })
        .collect::<Result<_, CliError>>()?;

    let mut output = UnitOutput::default();
    for (name, out) in &outcomes {
        out.save(&dir, name).map_err(runtime(dir.display()))?;
        // a forest run made only for the randomization tests is not a grid run
        if strategies.contains(name) {
            let rec = record(&spec.name, out);
            write_json(&dir.join(format!("{name}.json")), &rec)?;
            output.runs.push(rec);
        }
    }

    if let Some((_, forest)) = outcomes.iter().find(|(n, _)| n == FOREST) {
        save_checkpoint(&forest.best_model, &dir.join("forest_fusion_best.ckpt"))
            .map_err(runtime("forest checkpoint"))?;
        if cfg.run_distill && strategies.iter().any(|n| n == FOREST) {
            let row = distill_pair(cfg, spec, corpus, seed, &baseline, &forest.best_model)?.0;
            write_json(&dir.join("distill.json"), &row)?;
            output.distill = Some(row);
        }
        if repeats > 0 {
            let mut results = Vec::new();
            for kind in RANDOMIZATION_KINDS {
                info!("{} seed {seed}: {kind} x {repeats}", spec.name);
                results.push(
                    randomization_test(kind, repeats, seed, &baseline, corpus, &cfg.prune)
                        .map_err(runtime(format!("{kind} on {} seed {seed}", spec.name)))?,
                );
            }
            let rec = RandomizationRecord {
                dataset: spec.name.clone(),
                seed,
                forest_max_accuracy: forest
                    .trace
                    .max_accuracy(cfg.prune.steps == 0)
                    .map_or(f64::NAN, |m| m.1),
                forest_prune_order: forest.trace.prune_order.clone(),
                results,
            };
            write_json(&dir.join("randomization.json"), &rec)?;
            output.randomization = Some(rec);
        }
    }
    Ok(output)
}

/// Distills `student` from `teacher` and returns the report row together
/// with the distillation loss on the first batch before any update.
fn distill_pair(
    cfg: &RunConfig,
    spec: &DatasetSpec,
    corpus: &Corpus,
    seed: u64,
    teacher: &ModelState,
    student: &ModelState,
) -> Result<(DistillRow, f64), CliError> {
    let samples = cfg.prune.fine_tune_samples(corpus);
    let first = tokenize_batch(&samples[..samples.len().min(cfg.distill.train.batch_size)], MAX_LEN);
    let logits = |m: &ModelState| m.forward(&first, false).map(|f| f.logits).map_err(runtime("forward"));
    let initial_kd =
        kd_loss(&logits(teacher)?, &logits(student)?, cfg.distill.temperature).map_err(runtime("kd loss"))?;

    let mut distilled = student.clone();
    let mut dcfg = cfg.distill.clone();
    dcfg.train.seed = seed;
    info!("{} seed {seed}: distilling", spec.name);
    distill_train(teacher, &mut distilled, samples, &dcfg).map_err(runtime("distillation"))?;
    let acc = |m: &ModelState| m.accuracy(&corpus.test).map_err(runtime("accuracy"));
    let row = DistillRow::new(
        &spec.name,
        seed,
        acc(teacher)?,
        teacher.param_count(),
        acc(student)?,
        student.param_count(),
        acc(&distilled)?,
    )
    .map_err(runtime("distill report"))?;
    Ok((row, initial_kd))
}

fn corpora(cfg: &RunConfig) -> Result<Vec<Corpus>, CliError> {
    cfg.datasets
        .iter()
        .map(|d| generate_corpus(d).map_err(runtime(format!("dataset {}", d.name))))
        .collect()
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(runtime("thread pool"))
}

/// Runs every (dataset, seed) cell, then builds and emits the report. A
/// failed cell is logged to `errors.log`; the others still reach the report
/// and the command fails afterwards.
fn run_grid(cfg: &RunConfig, strategies: &[String], repeats: usize) -> Result<ExperimentReport, CliError> {
    let corpora = corpora(cfg)?;
    let cells: Vec<(usize, u64)> = (0..cfg.datasets.len())
        .flat_map(|d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results: Vec<Result<UnitOutput, CliError>> = pool(cfg.jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(d, seed)| run_unit(cfg, &cfg.datasets[d], &corpora[d], seed, strategies, repeats))
            .collect()
    });

    let (mut runs, mut randomization, mut distill, mut errors) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (&(d, seed), result) in cells.iter().zip(results) {
        match result {
            Ok(out) => {
                runs.extend(out.runs);
                randomization.extend(out.randomization);
                distill.extend(out.distill);
            }
            Err(e) => errors.push(format!("{} seed {seed}: {e}", cfg.datasets[d].name)),
        }
    }
    let report = build_report(&runs, &randomization, &distill, cfg.include_baseline).map_err(runtime("report"))?;
    emit_report(&report, &cfg.out_dir).map_err(runtime("report"))?;
    if !errors.is_empty() {
        let path = cfg.out_dir.join("errors.log");
        std::fs::write(&path, errors.join("\n") + "\n").map_err(runtime(path.display()))?;
        return Err(CliError::Runtime(format!(
            "{} of {} runs failed, see {}",
            errors.len(),
            cells.len(),
            path.display()
        )));
    }
    Ok(report)
}

/// The dataset x strategy x seed grid.
pub fn cmd_run(cfg: &RunConfig) -> Result<ExperimentReport, CliError> {
    if cfg.strategies.is_empty() {
        return Err(CliError::Usage("no strategies to run".into()));
    }
    run_grid(cfg, &cfg.strategies, cfg.randomization_repeats)
}

/// forest_fusion once and Random12/Random10 repeated per seed.
pub fn cmd_randomization_test(cfg: &RunConfig) -> Result<ExperimentReport, CliError> {
    if cfg.model.n_layers != 12 {
        return Err(CliError::Usage(format!(
            "randomization tests need a 12-layer model, config has {}",
            cfg.model.n_layers
        )));
    }
    let repeats = match cfg.randomization_repeats {
        0 => DEFAULT_REPEATS,
        n => n,
    };
    let cfg = RunConfig {
        run_distill: false,
        ..cfg.clone()
    };
    run_grid(&cfg, &[FOREST.to_string()], repeats)
}

fn load_model(path: &Path, expected: &ModelConfig) -> Result<ModelState, CliError> {
    let model = load_checkpoint(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if !model.config.same_family(expected) {
        return Err(CliError::Usage(format!(
            "{}: checkpoint architecture does not match the configured model",
            path.display()
        )));
    }
    Ok(model)
}

/// Writes the signal matrix of the checkpoint's live layers to `output`.
pub fn cmd_signals(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&str>,
    output: &Path,
) -> Result<usize, CliError> {
    let spec = cfg.dataset(dataset)?;
    let model = load_model(checkpoint, &cfg.model)?;
    let corpus = generate_corpus(spec).map_err(runtime(format!("dataset {}", spec.name)))?;
    let matrix = build_signal_matrix(&model, &cfg.prune.probes(&corpus)).map_err(runtime("signals"))?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(runtime(parent.display()))?;
    }
    matrix.save_csv(output).map_err(runtime(output.display()))?;
    Ok(matrix.n_rows())
}

pub struct DistillOutcome {
    pub row: DistillRow,
    pub initial_kd: f64,
}

/// Distills the compressed checkpoint from the teacher checkpoint and writes
/// `distill_report.csv` to the output directory.
pub fn cmd_distill(
    cfg: &RunConfig,
    student: &Path,
    teacher: &Path,
    dataset: Option<&str>,
) -> Result<DistillOutcome, CliError> {
    let spec = cfg.dataset(dataset)?;
    let teacher = load_model(teacher, &cfg.model)?;
    let student = load_model(student, &cfg.model)?;
    let corpus = generate_corpus(spec).map_err(runtime(format!("dataset {}", spec.name)))?;
    let (row, initial_kd) = distill_pair(cfg, spec, &corpus, cfg.seeds[0], &teacher, &student)?;
    emit_distill_report(std::slice::from_ref(&row), &cfg.out_dir).map_err(runtime("distill report"))?;
    Ok(DistillOutcome { row, initial_kd })
}

/// Rebuilds the report from the records a previous `run` left in `out_dir`.
pub fn cmd_report(out_dir: &Path, include_baseline: bool) -> Result<ExperimentReport, CliError> {
    let runs_dir = out_dir.join("runs");
    let (mut runs, mut randomization, mut distill) = (Vec::new(), Vec::new(), Vec::new());
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>, CliError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(runtime(p.display()))?;
        v.sort();
        Ok(v)
    };
    for dataset in read_dir(&runs_dir)? {
        for cell in read_dir(&dataset)? {
            for file in read_dir(&cell)? {
                if file.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                match file.file_stem().and_then(|s| s.to_str()) {
                    Some("randomization") => randomization.push(read_json::<RandomizationRecord>(&file)?),
                    Some("distill") => distill.push(read_json::<DistillRow>(&file)?),
                    _ => runs.push(read_json::<RunRecord>(&file)?),
                }
            }
        }
    }
    let report = build_report(&runs, &randomization, &distill, include_baseline).map_err(runtime("report"))?;
    emit_report(&report, out_dir).map_err(runtime("report"))?;
    Ok(report)
}
