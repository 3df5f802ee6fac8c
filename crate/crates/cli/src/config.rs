//! The experiment configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prunefuse::data::DatasetSpec;
use prunefuse::distill::DistillConfig;
use prunefuse::model::ModelConfig;
use prunefuse::pruning::{PruneConfig, StrategySpec};
use prunefuse::train::TrainConfig;

use crate::CliError;

/// Environment variable that replaces the configured output directory.
pub const OUT_ENV: &str = "PRUNEFUSE_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSpec>,
    pub model: ModelConfig,
    /// Training of the uncompressed model every run starts from.
    pub baseline: TrainConfig,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub prune: PruneConfig,
    pub distill: DistillConfig,
    /// Distill the best forest_fusion model of each run into a student.
    pub run_distill: bool,
    /// Random12 and Random10 repeats per seed. `run` skips them when 0.
    pub randomization_repeats: usize,
    /// Count the unpruned model when taking maximum accuracies.
    pub include_baseline: bool,
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: vec![DatasetSpec::default()],
            model: ModelConfig::default(),
            baseline: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            strategies: StrategySpec::registry().iter().map(|s| s.name.to_string()).collect(),
            seeds: (0..10).collect(),
            prune: PruneConfig::default(),
            distill: DistillConfig::default(),
            run_distill: true,
            randomization_repeats: 0,
            include_baseline: false,
            jobs: 1,
            out_dir: PathBuf::from("prunefuse-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub steps: Option<usize>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies the environment and
    /// `overrides`, and validates the result. The output directory comes
    /// from `--out-dir`, then `PRUNEFUSE_OUT`, then the file.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if !o.strategies.is_empty() {
            self.strategies = o.strategies.clone();
        }
        if let Some(steps) = o.steps {
            self.prune.steps = steps;
        }
        if let Some(jobs) = o.jobs {
            self.jobs = jobs;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return usage("seeds must not be empty".into());
        }
        if self.datasets.is_empty() {
            return usage("datasets must not be empty".into());
        }
        if self.jobs == 0 {
            return usage("jobs must be at least 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.strategies {
            StrategySpec::parse(s).map_err(|e| CliError::Usage(e.to_string()))?;
            if !seen.insert(s) {
                return usage(format!("strategy {s} listed twice"));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return usage("seeds must be distinct".into());
        }
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.prune.steps > self.model.n_layers {
            return usage(format!(
                "steps = {} exceeds the {} layers of the model",
                self.prune.steps, self.model.n_layers
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.datasets {
            d.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let ok = !d.name.is_empty()
                && d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return usage(format!("dataset name {:?} must be non-empty [A-Za-z0-9_-]", d.name));
            }
            if !names.insert(&d.name) {
                return usage(format!("dataset {} listed twice", d.name));
            }
            if d.n_classes != self.model.n_classes || d.vocab_size > self.model.vocab_size {
                return usage(format!(
                    "dataset {} ({} classes, vocab {}) does not fit the model ({} classes, vocab {})",
                    d.name, d.n_classes, d.vocab_size, self.model.n_classes, self.model.vocab_size
                ));
            }
        }
        for (what, t) in [
            ("baseline", &self.baseline),
            ("prune.fine_tune", &self.prune.fine_tune),
        ] {
            t.validate().map_err(|e| CliError::Usage(format!("{what}: {e}")))?;
        }
        self.distill.validate().map_err(|e| CliError::Usage(format!("distill: {e}")))?;
        Ok(())
    }

    pub fn dataset(&self, name: Option<&str>) -> Result<&DatasetSpec, CliError> {
        match name {
            None => Ok(&self.datasets[0]),
            Some(n) => self
                .datasets
                .iter()
                .find(|d| d.name == n)
                .ok_or_else(|| CliError::Usage(format!("no dataset named {n}"))),
        }
    }
}
