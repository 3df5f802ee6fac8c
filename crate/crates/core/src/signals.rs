//! The twelve per-layer scalar signals used to rank layers for pruning.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TokenBatch;
use crate::model::{AttentionTensor, ModelError, ModelState};

/// Canonical column order of a [`SignalMatrix`].
pub const SIGNAL_NAMES: [&str; 12] = [
    "inhibition",
    "intensity",
    "energy",
    "task_mi",
    "flow_mi",
    "grad_magnitude",
    "grad_fisher",
    "weight_norm",
    "weight_sparsity",
    "weight_entropy",
    "attention_weight",
    "attention_entropy",
];

pub const MI_BINS: usize = 8;
pub const MIN_MI_SAMPLES: usize = 16;
pub const SPARSITY_TAU: f64 = 1e-8;
pub const LOG_EPS: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: need at least {need} samples, got {got}")]
    TooFewSamples {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("task_mi: need at least 2 distinct labels")]
    TooFewLabels,
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("attention row (sample {sample}, head {head}, query {query}) sums to {sum}")]
    NotStochastic {
        sample: usize,
        head: usize,
        query: usize,
        sum: f64,
    },
    #[error("no gradients for layer {0}")]
    MissingGradients(usize),
    #[error("model has no live layers")]
    NoLiveLayers,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalVector {
    pub inhibition: f64,
    pub intensity: f64,
    pub energy: f64,
    pub task_mi: f64,
    pub flow_mi: f64,
    pub grad_magnitude: f64,
    pub grad_fisher: f64,
    pub weight_norm: f64,
    pub weight_sparsity: f64,
    pub weight_entropy: f64,
    pub attention_weight: f64,
    pub attention_entropy: f64,
}

impl SignalVector {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.inhibition,
            self.intensity,
            self.energy,
            self.task_mi,
            self.flow_mi,
            self.grad_magnitude,
            self.grad_fisher,
            self.weight_norm,
            self.weight_sparsity,
            self.weight_entropy,
            self.attention_weight,
            self.attention_entropy,
        ]
    }

    pub fn from_array(v: [f64; 12]) -> Self {
        SignalVector {
            inhibition: v[0],
            intensity: v[1],
            energy: v[2],
            task_mi: v[3],
            flow_mi: v[4],
            grad_magnitude: v[5],
            grad_fisher: v[6],
            weight_norm: v[7],
            weight_sparsity: v[8],
            weight_entropy: v[9],
            attention_weight: v[10],
            attention_entropy: v[11],
        }
    }

    /// Value of the signal called `name`, if it is one of [`SIGNAL_NAMES`].
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = signal_index(name)?;
        Some(self.to_array()[i])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn signal_index(name: &str) -> Option<usize> {
    SIGNAL_NAMES.iter().position(|&n| n == name)
}

/// One row per live layer, in layer order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalMatrix {
    pub layers: Vec<usize>,
    pub rows: Vec<SignalVector>,
}

impl SignalMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Row-major feature matrix.
    pub fn features(&self) -> Vec<[f64; 12]> {
        self.rows.iter().map(SignalVector::to_array).collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = signal_index(name)?;
        Some(self.rows.iter().map(|r| r.to_array()[i]).collect())
    }

    pub fn row_for(&self, layer: usize) -> Option<&SignalVector> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        Some(&self.rows[i])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "layer,{}", SIGNAL_NAMES.join(","))?;
        for (l, row) in self.layers.iter().zip(&self.rows) {
            let cells: Vec<String> = row.to_array().iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{l},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationSignals {
    pub inhibition: f64,
    pub intensity: f64,
    pub energy: f64,
}

pub fn activation_signals(values: &[f64]) -> Result<ActivationSignals> {
    if values.is_empty() {
        return Err(SignalError::Empty("activation_signals"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("activation_signals"));
    }
    let n = values.len() as f64;
    let (mut s, mut a, mut e) = (0.0, 0.0, 0.0);
    for &v in values {
        s += v;
        a += v.abs();
        e += v * v;
    }
    Ok(ActivationSignals {
        inhibition: s / n,
        intensity: a / n,
        energy: e / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    /// Every summary landed in the same bin.
    pub degenerate: bool,
}

/// Quantile bin index of every value. Interior edges are the order
/// statistics at `b * n / bins`; a value's bin is the number of edges it
/// reaches, so ties always share a bin.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|b| sorted[b * n / bins]).collect();
    values
        .iter()
        .map(|&v| edges.iter().filter(|&&e| v >= e).count())
        .collect()
}

/// Plug-in mutual information (nats) of two discrete sequences.
pub fn plugin_mi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; na * nb];
    let mut pa = vec![0usize; na];
    let mut pb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (pa[x] as f64 * pb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI between per-sample activation summaries and labels.
pub fn task_relevance_mi(summaries: &[f64], labels: &[usize]) -> Result<MiEstimate> {
    if summaries.len() != labels.len() {
        return Err(SignalError::LengthMismatch {
            op: "task_mi",
            left: summaries.len(),
            right: labels.len(),
        });
    }
    if summaries.len() < MIN_MI_SAMPLES {
        return Err(SignalError::TooFewSamples {
            op: "task_mi",
            need: MIN_MI_SAMPLES,
            got: summaries.len(),
        });
    }
    if summaries.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("task_mi"));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(SignalError::TooFewLabels);
    }
    let bins = quantile_bins(summaries, MI_BINS);
    if bins.iter().all(|&b| b == bins[0]) {
        return Ok(MiEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(MiEstimate {
        value: plugin_mi(&bins, labels),
        degenerate: false,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Variance of `s` explained by a least-squares fit on `next`:
/// `Var(s) - Var(residual)`, which is `Cov(s, next)^2 / Var(next)`.
pub fn flow_relevance_mi(s: &[f64], next: &[f64]) -> Result<f64> {
    if s.len() != next.len() {
        return Err(SignalError::LengthMismatch {
            op: "flow_mi",
            left: s.len(),
            right: next.len(),
        });
    }
    if s.len() < 3 {
        return Err(SignalError::TooFewSamples {
            op: "flow_mi",
            need: 3,
            got: s.len(),
        });
    }
    if s.iter().chain(next).any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("flow_mi"));
    }
    let (ms, mn) = (mean(s), mean(next));
    let n = s.len() as f64;
    let cov = s.iter().zip(next).map(|(a, b)| (a - ms) * (b - mn)).sum::<f64>() / n;
    let var_next = next.iter().map(|b| (b - mn).powi(2)).sum::<f64>() / n;
    if var_next <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov * cov / var_next).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSignals {
    pub magnitude: f64,
    pub fisher: f64,
}

/// Mean `|g|` and mean `g^2` per batch, averaged over batches.
pub fn gradient_signals(batches: &[&[f64]]) -> Result<GradientSignals> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(SignalError::Empty("gradient_signals"));
    }
    let (mut mag, mut fisher) = (0.0, 0.0);
    for b in batches {
        let p = b.len() as f64;
        mag += b.iter().map(|g| g.abs()).sum::<f64>() / p;
        fisher += b.iter().map(|g| g * g).sum::<f64>() / p;
    }
    let k = batches.len() as f64;
    Ok(GradientSignals {
        magnitude: mag / k,
        fisher: fisher / k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightSignals {
    pub norm: f64,
    pub sparsity: f64,
    pub entropy: f64,
    pub degenerate: bool,
}

/// Norm, sparsity and entropy of all matrices taken as one flat vector.
pub fn weight_signals(matrices: &[&[f64]]) -> Result<WeightSignals> {
    let count: usize = matrices.iter().map(|m| m.len()).sum();
    if count == 0 {
        return Err(SignalError::Empty("weight_signals"));
    }
    let all = || matrices.iter().flat_map(|m| m.iter().copied());
    if all().any(|w| !w.is_finite()) {
        return Err(SignalError::NonFinite("weight_signals"));
    }
    let norm = all().map(|w| w * w).sum::<f64>().sqrt();
    let zeros = all().filter(|w| w.abs() <= SPARSITY_TAU).count();
    let sparsity = zeros as f64 / count as f64;
    let l1: f64 = all().map(f64::abs).sum();
    if l1 == 0.0 {
        return Ok(WeightSignals {
            norm,
            sparsity,
            entropy: 0.0,
            degenerate: true,
        });
    }
    let entropy = -all()
        .map(|w| {
            let p = w.abs() / l1;
            p * (p + LOG_EPS).ln()
        })
        .sum::<f64>();
    Ok(WeightSignals {
        norm,
        sparsity,
        entropy: entropy.max(0.0),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSignals {
    pub weight: f64,
    pub entropy: f64,
}

/// Mean attention probability and summed entropy over real query/key pairs,
/// per sample, then averaged over samples.
pub fn attention_signals(att: &AttentionTensor) -> Result<AttentionSignals> {
    if att.n_samples() == 0 || att.heads == 0 {
        return Err(SignalError::Empty("attention_signals"));
    }
    let h = att.heads;
    let (mut weight, mut entropy) = (0.0, 0.0);
    for s in 0..att.n_samples() {
        let l = att.lengths[s];
        if l == 0 {
            return Err(SignalError::Empty("attention_signals"));
        }
        let alpha = att.sample(s);
        let (mut sw, mut se) = (0.0, 0.0);
        for k in 0..h {
            for i in 0..l {
                let row = &alpha[(k * l + i) * l..(k * l + i + 1) * l];
                let sum: f64 = row.iter().sum();
                if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(SignalError::NotStochastic {
                        sample: s,
                        head: k,
                        query: i,
                        sum,
                    });
                }
                sw += sum;
                se -= row.iter().map(|&a| a * (a + LOG_EPS).ln()).sum::<f64>();
            }
        }
        weight += sw / (h * l * l) as f64;
        entropy += se / h as f64;
    }
    let n = att.n_samples() as f64;
    Ok(AttentionSignals {
        weight: weight / n,
        entropy: (entropy / n).max(0.0),
    })
}

/// Signals of every live layer over the probe batches.
///
/// Activation, MI and attention signals are computed per batch and averaged;
/// gradient signals use one gradient per batch. The flow successor of a layer
/// is the next live layer, or the pooler output for the last one.
pub fn build_signal_matrix(model: &ModelState, probes: &[TokenBatch]) -> Result<SignalMatrix> {
    if probes.is_empty() {
        return Err(SignalError::Empty("build_signal_matrix"));
    }
    let live = model.live_layers();
    if live.is_empty() {
        return Err(SignalError::NoLiveLayers);
    }
    let n = live.len();
    let mut sums = vec![[0.0f64; 12]; n];
    let mut grads: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(probes.len()); n];

    for batch in probes {
        let mut out = model.loss_and_grads(batch, true)?;
        let caches = out.caches.take().expect("captured");
        let summaries: Vec<Vec<f64>> = caches
            .layers
            .iter()
            .map(|c| c.activations.sample_summaries())
            .collect();
        let pooled = caches.pooled.sample_summaries();
        for (r, cache) in caches.layers.iter().enumerate() {
            let act = activation_signals(cache.activations.values.data())?;
            let task = task_relevance_mi(&summaries[r], &caches.labels)?;
            let next = summaries.get(r + 1).unwrap_or(&pooled);
            let flow = flow_relevance_mi(&summaries[r], next)?;
            let attn = attention_signals(&cache.attention)?;
            let row = &mut sums[r];
            row[0] += act.inhibition;
            row[1] += act.intensity;
            row[2] += act.energy;
            row[3] += task.value;
            row[4] += flow;
            row[10] += attn.weight;
            row[11] += attn.entropy;
            let g = out
                .layer_grads
                .remove(&cache.layer)
                .ok_or(SignalError::MissingGradients(cache.layer))?;
            grads[r].push(g.values);
        }
    }

    let k = probes.len() as f64;
    let mut rows = Vec::with_capacity(n);
    for (r, &l) in live.iter().enumerate() {
        let mut v = sums[r];
        for i in [0, 1, 2, 3, 4, 10, 11] {
            v[i] /= k;
        }
        let views: Vec<&[f64]> = grads[r].iter().map(Vec::as_slice).collect();
        let g = gradient_signals(&views)?;
        v[5] = g.magnitude;
        v[6] = g.fisher;
        let mats: Vec<&[f64]> = model.layers[l]
            .weight_matrices()
            .iter()
            .map(|t| t.data())
            .collect();
        let w = weight_signals(&mats)?;
        v[7] = w.norm;
        v[8] = w.sparsity;
        v[9] = w.entropy;
        rows.push(SignalVector::from_array(v));
    }
    Ok(SignalMatrix { layers: live, rows })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{batches, generate_corpus, DatasetSpec};
    use crate::model::ModelConfig;

    #[test]
    fn activation_examples() {
        let z = activation_signals(&[0.0; 6]).unwrap();
        assert_eq!((z.inhibition, z.intensity, z.energy), (0.0, 0.0, 0.0));
        let s = activation_signals(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!((s.inhibition, s.intensity, s.energy), (0.0, 1.0, 1.0));
        // (3 - 4) / 2, (3 + 4) / 2, (9 + 16) / 2
        let a = activation_signals(&[3.0, -4.0]).unwrap();
        assert_eq!((a.inhibition, a.intensity, a.energy), (-0.5, 3.5, 12.5));
        assert!(matches!(activation_signals(&[]), Err(SignalError::Empty(_))));
        assert!(activation_signals(&[f64::NAN]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn activation_moment_inequalities(v in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let a = activation_signals(&v).unwrap();
            prop_assert!(a.inhibition.abs() <= a.intensity * (1.0 + 1e-12));
            prop_assert!(a.intensity * a.intensity <= a.energy * (1.0 + 1e-12));
            prop_assert!(a.intensity >= 0.0 && a.energy >= 0.0);
        }
    }

    #[test]
    fn perfect_binary_dependence_is_log_two() {
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let s: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let mi = task_relevance_mi(&s, &labels).unwrap();
        assert!(!mi.degenerate);
        assert!((mi.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn four_sample_joint_table() {
        // joint counts: (0,0)=2, (1,0)=1, (1,1)=1 over n = 4
        // p(a) = (1/2, 1/2), p(y) = (3/4, 1/4)
        // MI = 1/2 ln((1/2)/(3/8)) + 1/4 ln((1/4)/(3/8)) + 1/4 ln((1/4)/(1/8))
        let want = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
        let got = plugin_mi(&[0, 0, 1, 1], &[0, 0, 0, 1]);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn constant_summary_is_degenerate_zero() {
        let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        let mi = task_relevance_mi(&[0.7; 32], &labels).unwrap();
        assert_eq!(mi, MiEstimate { value: 0.0, degenerate: true });
    }

    #[test]
    fn task_mi_preconditions() {
        assert!(matches!(
            task_relevance_mi(&[0.0; 8], &[0, 1, 0, 1, 0, 1, 0, 1]),
            Err(SignalError::TooFewSamples { .. })
        ));
        let s: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(matches!(task_relevance_mi(&s, &[2; 20]), Err(SignalError::TooFewLabels)));
    }

    #[test]
    fn quantile_bins_are_balanced_on_distinct_values() {
        let v: Vec<f64> = (0..64).rev().map(f64::from).collect();
        let bins = quantile_bins(&v, 8);
        for b in 0..8 {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 8);
        }
        assert_eq!(bins[0], 7);
        assert_eq!(bins[63], 0);
    }

    /// Brute-force histogram MI with equal-count bins assigned by rank.
    fn brute_mi(s: &[f64], y: &[usize]) -> f64 {
        let n = s.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        let mut bin = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            bin[i] = rank * 8 / n;
        }
        let mut mi = 0.0;
        for a in 0..8 {
            for c in 0..4 {
                let pab = (0..n).filter(|&i| bin[i] == a && y[i] == c).count() as f64 / n as f64;
                let pa = (0..n).filter(|&i| bin[i] == a).count() as f64 / n as f64;
                let pc = (0..n).filter(|&i| y[i] == c).count() as f64 / n as f64;
                if pab > 0.0 {
                    mi += pab * (pab / (pa * pc)).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn shuffled_labels_carry_little_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut below = 0;
        let trials = 100;
        for _ in 0..trials {
            let s: Vec<f64> = (0..512).map(|_| rng.gen::<f64>()).collect();
            let mut y: Vec<usize> = (0..512).map(|i| i % 4).collect();
            y.shuffle(&mut rng);
            let mi = task_relevance_mi(&s, &y).unwrap().value;
            assert!((mi - brute_mi(&s, &y)).abs() < 1e-12);
            if mi < 0.05 {
                below += 1;
            }
        }
        assert!(below >= 95, "{below}/{trials}");
    }

    #[test]
    fn flow_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..512).map(|_| rng.gen::<f64>()).collect();
        let var = s.iter().map(|x| (x - mean(&s)).powi(2)).sum::<f64>() / 512.0;
        assert!((flow_relevance_mi(&s, &s).unwrap() - var).abs() < 1e-12);

        let noise: Vec<f64> = (0..512).map(|_| rng.gen::<f64>()).collect();
        assert!(flow_relevance_mi(&s, &noise).unwrap() < 0.05 * var);

        assert_eq!(flow_relevance_mi(&[2.0; 10], &noise[..10]).unwrap(), 0.0);
        assert!(matches!(
            flow_relevance_mi(&[1.0, 2.0], &[1.0, 2.0]),
            Err(SignalError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn flow_matches_residual_variance_of_explicit_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let next: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let s: Vec<f64> = next.iter().map(|x| 2.0 * x + 0.3 * rng.gen::<f64>()).collect();
        // slope and intercept from the normal equations, then residual variance
        let (mx, my) = (mean(&next), mean(&s));
        let sxy: f64 = next.iter().zip(&s).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = next.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let icpt = my - slope * mx;
        let resid: Vec<f64> = next.iter().zip(&s).map(|(x, y)| y - icpt - slope * x).collect();
        let var = |v: &[f64]| v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>() / v.len() as f64;
        let want = var(&s) - var(&resid);
        assert!((flow_relevance_mi(&s, &next).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let g = gradient_signals(&[&[2.0, -2.0, 2.0]]).unwrap();
        assert_eq!((g.magnitude, g.fisher), (2.0, 4.0));
        let z = gradient_signals(&[&[0.0, 0.0]]).unwrap();
        assert_eq!((z.magnitude, z.fisher), (0.0, 0.0));
        // batches [1] and [3]: mean |g| = 2, mean g^2 = (1 + 9) / 2
        let two = gradient_signals(&[&[1.0], &[3.0]]).unwrap();
        assert_eq!((two.magnitude, two.fisher), (2.0, 5.0));
        assert!(gradient_signals(&[]).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = weight_signals(&[&[3.0, 4.0, 0.0, 0.0]]).unwrap();
        assert_eq!((w.norm, w.sparsity), (5.0, 0.5));
        let u = weight_signals(&[&[0.5, -0.5], &[0.5, -0.5]]).unwrap();
        assert!((u.entropy - 4f64.ln()).abs() < 1e-10);
        let p = weight_signals(&[&[0.0, 7.0, 0.0, 0.0]]).unwrap();
        assert!(p.entropy.abs() < 1e-10);
        let z = weight_signals(&[&[0.0; 4]]).unwrap();
        assert_eq!((z.norm, z.sparsity, z.entropy, z.degenerate), (0.0, 1.0, 0.0, true));
    }

    proptest! {
        #[test]
        fn sparsity_grows_as_entries_are_zeroed(
            mut w in proptest::collection::vec(-1.0f64..1.0, 1..40),
            order in proptest::collection::vec(any::<prop::sample::Index>(), 1..40),
        ) {
            let mut last = weight_signals(&[&w]).unwrap().sparsity;
            for ix in order {
                let i = ix.index(w.len());
                w[i] = 0.0;
                let s = weight_signals(&[&w]).unwrap();
                prop_assert!(s.sparsity >= last);
                prop_assert!((0.0..=1.0).contains(&s.sparsity) && s.entropy >= 0.0);
                last = s.sparsity;
            }
        }
    }

    fn attention_from_rows(n: usize, h: usize, mut rows: impl FnMut(usize, usize) -> Vec<f64>) -> AttentionTensor {
        let mut probs = Vec::new();
        for k in 0..h {
            for i in 0..n {
                probs.extend(rows(k, i));
            }
        }
        AttentionTensor::new(h, vec![n], probs)
    }

    #[test]
    fn attention_examples() {
        let uniform = attention_from_rows(2, 1, |_, _| vec![0.5, 0.5]);
        let a = attention_signals(&uniform).unwrap();
        assert!((a.entropy - 2.0 * 2f64.ln()).abs() < 1e-10);
        assert_eq!(a.weight, 0.5);

        let onehot = attention_from_rows(5, 2, |_, i| {
            let mut r = vec![0.0; 5];
            r[(i + 1) % 5] = 1.0;
            r
        });
        assert!(attention_signals(&onehot).unwrap().entropy.abs() < 1e-10);

        let bad = attention_from_rows(2, 1, |_, _| vec![0.5, 0.6]);
        assert!(matches!(attention_signals(&bad), Err(SignalError::NotStochastic { .. })));
    }

    proptest! {
        #[test]
        fn attention_weight_is_inverse_length(n in 1usize..12, h in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let att = attention_from_rows(n, h, |_, _| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            });
            let a = attention_signals(&att).unwrap();
            prop_assert!((a.weight - 1.0 / n as f64).abs() < 1e-12);
            prop_assert!(a.entropy >= 0.0);
        }
    }

    fn probes(n: usize) -> Vec<TokenBatch> {
        let spec = DatasetSpec { n_train: 0, n_val: n, n_test: 0, ..DatasetSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        batches(&c.val, 32)
    }

    #[test]
    fn signal_matrix_shape_determinism_and_idempotence() {
        let model = ModelState::new(ModelConfig { seed: 3, ..ModelConfig::default() }).unwrap();
        let p = probes(32);
        let m = build_signal_matrix(&model, &p).unwrap();
        assert_eq!(m.n_rows(), 12);
        assert_eq!(m.layers, (0..12).collect::<Vec<_>>());
        let again = build_signal_matrix(&model, &p).unwrap();
        assert_eq!(m, again);
        let twice = build_signal_matrix(&model, &[p[0].clone(), p[0].clone()]).unwrap();
        assert_eq!(m, twice);
    }

    #[test]
    fn pruned_layers_have_no_rows_and_all_signals_are_valid() {
        let mut model = ModelState::new(ModelConfig { seed: 4, ..ModelConfig::default() }).unwrap();
        model.prune_layer(0).unwrap();
        model.prune_layer(7).unwrap();
        model.layers[3] = crate::model::EncoderLayer::zero_effect(&model.config);
        let m = build_signal_matrix(&model, &probes(64)).unwrap();
        assert_eq!(m.layers, vec![1, 2, 3, 4, 5, 6, 8, 9, 10, 11]);
        for r in &m.rows {
            assert!(r.is_finite());
            assert!(r.intensity >= 0.0 && r.energy >= 0.0);
            assert!(r.inhibition.abs() <= r.intensity);
            assert!(r.intensity * r.intensity <= r.energy * (1.0 + 1e-12));
            assert!((0.0..=1.0).contains(&r.weight_sparsity));
            assert!(r.weight_entropy >= 0.0 && r.task_mi >= 0.0 && r.attention_entropy >= 0.0);
        }
        let z = m.row_for(3).unwrap();
        assert_eq!((z.weight_norm, z.weight_sparsity, z.weight_entropy), (0.0, 1.0, 0.0));
    }

    #[test]
    fn csv_has_canonical_header() {
        let m = SignalMatrix {
            layers: vec![2],
            rows: vec![SignalVector::from_array([1.5; 12])],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,inhibition,intensity,energy,task_mi,flow_mi,grad_magnitude,grad_fisher,\
             weight_norm,weight_sparsity,weight_entropy,attention_weight,attention_entropy"
        );
        assert!(lines.next().unwrap().starts_with("2,1.5e0,"));
    }
}
