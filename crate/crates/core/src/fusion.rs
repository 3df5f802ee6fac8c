//! Accuracy impact of ablating each layer, the linear and forest regressors
//! that predict it from signals, and importance extraction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{ModelError, ModelState};
use crate::signals::SIGNAL_NAMES;

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("model has no live layers")]
    NoLiveLayers,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("{rows} feature rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// `delta[i] = base_accuracy - accuracy with layers[i] ablated`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactVector {
    pub layers: Vec<usize>,
    pub base_accuracy: f64,
    pub delta: Vec<f64>,
}

/// Ablate every live layer in turn (no fine-tuning) and record the drop in
/// accuracy on `eval`.
pub fn measure_impacts(model: &ModelState, eval: &[Sample]) -> Result<ImpactVector> {
    if eval.is_empty() {
        return Err(FusionError::EmptyEvalSet);
    }
    let layers = model.live_layers();
    if layers.is_empty() {
        return Err(FusionError::NoLiveLayers);
    }
    let base_accuracy = model.accuracy(eval)?;
    let accs: Vec<f64> = layers
        .par_iter()
        .map(|&l| {
            let mut ablated = model.clone();
            ablated.prune_layer(l)?;
            ablated.accuracy(eval)
        })
        .collect::<std::result::Result<_, ModelError>>()?;
    Ok(ImpactVector {
        delta: accs.iter().map(|a| base_accuracy - a).collect(),
        layers,
        base_accuracy,
    })
}

fn check_xy(x: &[[f64; 12]], y: &[f64], need: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(FusionError::LengthMismatch {
            rows: x.len(),
            targets: y.len(),
        });
    }
    if x.len() < need {
        return Err(FusionError::TooFewRows {
            need,
            got: x.len(),
        });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite("training data"));
    }
    Ok(())
}

/// Ridge regression on z-scored features. `weights` live in standardized
/// space; zero-variance columns get weight 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub lambda: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64; 12]) -> f64 {
        let mut out = self.bias;
        for j in 0..12 {
            if self.scales[j] > 0.0 {
                out += self.weights[j] * (x[j] - self.means[j]) / self.scales[j];
            }
        }
        out
    }
}

/// Minimizes `mean((y - b - Z w)^2) + lambda |w|^2`. Using the mean rather
/// than the sum makes the fit invariant to duplicating every row. With
/// `lambda = 0` a rank-deficient system gets the minimum-norm solution.
pub fn fit_linear(x: &[[f64; 12]], y: &[f64], lambda: f64) -> Result<LinearModel> {
    check_xy(x, y, 2)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FusionError::InvalidParams(format!("ridge lambda {lambda}")));
    }
    let n = x.len() as f64;
    let mut means = vec![0.0; 12];
    let mut scales = vec![0.0; 12];
    for j in 0..12 {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        means[j] = m;
        scales[j] = var.sqrt();
        // Columns constant up to rounding carry no usable signal.
        if scales[j] <= 1e-12 * m.abs().max(1e-300) {
            scales[j] = 0.0;
        }
    }
    let active: Vec<usize> = (0..12).filter(|&j| scales[j] > 0.0).collect();
    let bias = y.iter().sum::<f64>() / n;
    let mut weights = vec![0.0; 12];
    if !active.is_empty() {
        let k = active.len();
        let z = DMatrix::from_fn(x.len(), k, |i, c| {
            let j = active[c];
            (x[i][j] - means[j]) / scales[j]
        });
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - bias));
        let mut gram = z.transpose() * &z / n;
        for d in 0..k {
            gram[(d, d)] += lambda;
        }
        let rhs = z.transpose() * yc / n;
        let svd = gram.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max();
        let w = svd.solve(&rhs, tol).map_err(|e| FusionError::Solve(e.to_string()))?;
        for (c, &j) in active.iter().enumerate() {
            weights[j] = w[c];
        }
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(FusionError::NonFinite("linear weights"));
    }
    Ok(LinearModel {
        weights,
        bias,
        means,
        scales,
        lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub feature_frac: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            min_leaf: 2,
            feature_frac: 1.0 / 3.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in preorder; node 0 is the root. Queries go left when
/// `x[feature] <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64; 12]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub trees: Vec<Tree>,
    /// Total squared-error reduction per feature, normalized to sum to 1
    /// (all zeros when no tree split).
    pub importance: Vec<f64>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64; 12]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

struct TreeBuilder<'a> {
    x: &'a [[f64; 12]],
    y: &'a [f64],
    min_leaf: usize,
    n_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    gain: [f64; 12],
}

impl TreeBuilder<'_> {
    fn sse(&self, idx: &[usize]) -> f64 {
        let m = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (self.y[i] - m).powi(2)).sum()
    }

    fn grow(&mut self, idx: Vec<usize>) -> usize {
        let at = self.nodes.len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        if idx.len() < 2 * self.min_leaf {
            return at;
        }
        let parent = self.sse(&idx);
        if parent <= 0.0 {
            return at;
        }
        let mut features = sample(&mut self.rng, 12, self.n_features).into_vec();
        features.sort_unstable();

        // (gain, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            let mut order = idx.clone();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let n = order.len();
            let total: f64 = order.iter().map(|&i| self.y[i]).sum();
            let total_sq: f64 = order.iter().map(|&i| self.y[i] * self.y[i]).sum();
            let (mut ls, mut lsq) = (0.0, 0.0);
            for k in 1..n {
                let yi = self.y[order[k - 1]];
                ls += yi;
                lsq += yi * yi;
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if k < self.min_leaf || n - k < self.min_leaf || lo == hi {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let rs = total - ls;
                let rsq = total_sq - lsq;
                let child = (lsq - ls * ls / nl) + (rsq - rs * rs / nr);
                let gain = parent - child;
                if gain > 1e-12 * parent && best.is_none_or(|b| gain > b.0) {
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some((gain, f, mid));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        // Recompute the reduction exactly rather than from running sums.
        self.gain[feature] += (parent - self.sse(&l) - self.sse(&r)).max(0.0);
        let left = self.grow(l);
        let right = self.grow(r);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Bagged CART regression trees. Tree `t` draws from its own ChaCha stream
/// `t` of `seed`, so the fit does not depend on how trees are scheduled.
pub fn fit_forest(x: &[[f64; 12]], y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    check_xy(x, y, 2)?;
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(FusionError::InvalidParams("n_trees and min_leaf must be positive".into()));
    }
    if !(params.feature_frac > 0.0 && params.feature_frac <= 1.0) {
        return Err(FusionError::InvalidParams(format!(
            "feature_frac {} outside (0, 1]",
            params.feature_frac
        )));
    }
    let n_features = ((params.feature_frac * 12.0).ceil() as usize).clamp(1, 12);
    let fitted: Vec<(Tree, [f64; 12])> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let n = x.len();
            let idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = TreeBuilder {
                x,
                y,
                min_leaf: params.min_leaf,
                n_features,
                rng,
                nodes: Vec::new(),
                gain: [0.0; 12],
            };
            b.grow(idx);
            (Tree { nodes: b.nodes }, b.gain)
        })
        .collect();
    let mut importance = vec![0.0; 12];
    for (_, g) in &fitted {
        for j in 0..12 {
            importance[j] += g[j];
        }
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        importance.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ForestModel {
        params: params.clone(),
        trees: fitted.into_iter().map(|(t, _)| t).collect(),
        importance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionModel {
    Linear(LinearModel),
    Forest(ForestModel),
}

impl FusionModel {
    pub fn predict(&self, x: &[f64; 12]) -> f64 {
        match self {
            FusionModel::Linear(m) => m.predict(x),
            FusionModel::Forest(m) => m.predict(x),
        }
    }

    pub fn predict_all(&self, x: &[[f64; 12]]) -> Vec<f64> {
        x.iter().map(|r| self.predict(r)).collect()
    }

    /// Weights or tree arrays as pretty JSON, for auditing a fit.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("fusion models serialize")
    }
}

/// Layer with the lowest predicted impact; ties go to the lowest layer index.
pub fn select_layer(layers: &[usize], predicted: &[f64]) -> Result<usize> {
    if layers.is_empty() {
        return Err(FusionError::NoLiveLayers);
    }
    if layers.len() != predicted.len() {
        return Err(FusionError::LengthMismatch {
            rows: layers.len(),
            targets: predicted.len(),
        });
    }
    if predicted.iter().any(|p| !p.is_finite()) {
        return Err(FusionError::NonFinite("predicted impacts"));
    }
    let mut best = 0;
    for i in 1..layers.len() {
        let (p, b) = (predicted[i], predicted[best]);
        if p < b || (p == b && layers[i] < layers[best]) {
            best = i;
        }
    }
    Ok(layers[best])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub degenerate: bool,
}

/// Divide by the largest magnitude so values land in `[-1, 1]`.
pub fn rescale_by_max_abs(v: &[f64]) -> (Vec<f64>, bool) {
    let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m == 0.0 {
        return (vec![0.0; v.len()], true);
    }
    (v.iter().map(|x| x / m).collect(), false)
}

/// Standardized linear weights, or forest impurity importances, each
/// rescaled by their maximum magnitude.
pub fn extract_importance(model: &FusionModel) -> Importance {
    let raw = match model {
        FusionModel::Linear(m) => m.weights.clone(),
        FusionModel::Forest(m) => m.importance.clone(),
    };
    let (normalized, degenerate) = rescale_by_max_abs(&raw);
    Importance {
        raw,
        normalized,
        degenerate,
    }
}

impl Importance {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "strategy,raw,normalized")?;
        for (j, name) in SIGNAL_NAMES.iter().enumerate() {
            writeln!(out, "{name},{:e},{:e}", self.raw[j], self.normalized[j])?;
        }
        Ok(())
    }
}
