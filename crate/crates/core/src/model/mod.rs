//! BERT-shaped encoder classifier with a per-layer prune mask.
//!
//! Post-layernorm residual blocks; the pooled representation is a tanh dense
//! layer over the first position (`[CLS]`). Sequences are processed without
//! padding: the real tokens of every sample are stacked into one matrix and
//! attention is restricted to each sample's own rows, which is equivalent to
//! masking padded keys.

mod checkpoint;
mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, TokenBatch, MAX_LEN};
use crate::tensor::{Gradients, Graph, NodeId, Segment, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{param_count, size_gb, size_gb_at, ParamDims};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} in sample {sample} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { sample: usize, id: usize, vocab: usize },
    #[error("sample {0} has no real tokens")]
    EmptySequence(usize),
    #[error("batch width {width} exceeds max_seq_len {max}")]
    SequenceTooLong { width: usize, max: usize },
    #[error("label {label} is outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("layer {0} is out of range")]
    LayerOutOfRange(usize),
    #[error("layer {0} is already pruned")]
    AlreadyPruned(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            max_seq_len: MAX_LEN,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 12,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers < 2 {
            return bad(format!("n_layers = {} (need at least 2)", self.n_layers));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 || self.n_classes < 2 {
            return bad("vocab_size, max_seq_len, d_ff must be positive and n_classes >= 2".into());
        }
        Ok(())
    }

    /// True when the two configs describe the same architecture (seed aside).
    pub fn same_family(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: 0, ..self.clone() } == ModelConfig { seed: 0, ..other.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1: LayerNormParams,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2: LayerNormParams,
}

pub const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.gamma", "ln1.beta", "w1", "b1", "w2",
    "b2", "ln2.gamma", "ln2.beta",
];

impl EncoderLayer {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        EncoderLayer {
            wq: trunc_normal(&[d, d], rng),
            bq: Tensor::zeros(&[d]),
            wk: trunc_normal(&[d, d], rng),
            bk: Tensor::zeros(&[d]),
            wv: trunc_normal(&[d, d], rng),
            bv: Tensor::zeros(&[d]),
            wo: trunc_normal(&[d, d], rng),
            bo: Tensor::zeros(&[d]),
            ln1: LayerNormParams::identity(d),
            w1: trunc_normal(&[d, f], rng),
            b1: Tensor::zeros(&[f]),
            w2: trunc_normal(&[f, d], rng),
            b2: Tensor::zeros(&[d]),
            ln2: LayerNormParams::identity(d),
        }
    }

    /// Every tensor of the layer, in [`LAYER_FIELDS`] order.
    pub fn fields(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2.gamma,
            &self.ln2.beta,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
        ]
    }

    /// The attention and feed-forward weight matrices (no biases, no
    /// layernorm parameters).
    pub fn weight_matrices(&self) -> [&Tensor; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    /// A layer whose attention and FFN branches output exactly zero and whose
    /// layernorms are identity-affine.
    pub fn zero_effect(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        EncoderLayer {
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1: LayerNormParams::identity(d),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
            ln2: LayerNormParams::identity(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub token: Tensor,
    pub position: Tensor,
    pub ln: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub head: ClassifierHead,
    pub prune_mask: Vec<bool>,
}

fn trunc_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Per-sample attention probabilities of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    pub heads: usize,
    pub lengths: Vec<usize>,
    offsets: Vec<usize>,
    probs: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(heads: usize, lengths: Vec<usize>, probs: Vec<f64>) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += heads * l * l;
        }
        assert_eq!(acc, probs.len(), "attention buffer does not match lengths");
        AttentionTensor {
            heads,
            lengths,
            offsets,
            probs,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.lengths.len()
    }

    /// `alpha[head][query][key]` over the real tokens of sample `s`.
    pub fn sample(&self, s: usize) -> &[f64] {
        let l = self.lengths[s];
        &self.probs[self.offsets[s]..self.offsets[s] + self.heads * l * l]
    }

    /// Sample `s` as an `n x n x h` array (`[query][key][head]`) over the
    /// padded width `n`; padded queries and keys are zero.
    pub fn padded(&self, s: usize, n: usize) -> Vec<f64> {
        let l = self.lengths[s];
        let h = self.heads;
        let src = self.sample(s);
        let mut out = vec![0.0; n * n * h];
        for k in 0..h {
            for i in 0..l {
                for j in 0..l {
                    out[(i * n + j) * h + k] = src[k * l * l + i * l + j];
                }
            }
        }
        out
    }
}

/// Token-level activations `A` (`n_tokens x d`) with the sample each row
/// belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub values: Tensor,
    pub lengths: Vec<usize>,
}

impl ActivationMatrix {
    pub fn n_samples(&self) -> usize {
        self.lengths.len()
    }

    /// Mean over each sample's block of rows and columns.
    pub fn sample_summaries(&self) -> Vec<f64> {
        let d = self.values.cols();
        let mut out = Vec::with_capacity(self.lengths.len());
        let mut start = 0;
        for &l in &self.lengths {
            let block = &self.values.data()[start * d..(start + l) * d];
            out.push(block.iter().sum::<f64>() / block.len() as f64);
            start += l;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub layer: usize,
    pub activations: ActivationMatrix,
    pub attention: AttentionTensor,
}

/// Captured internals of one forward pass over live layers in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCaches {
    pub layers: Vec<LayerCache>,
    /// Pooler output, one row per sample.
    pub pooled: ActivationMatrix,
    pub labels: Vec<usize>,
    pub max_len: usize,
}

impl LayerCaches {
    pub fn get(&self, layer: usize) -> Option<&LayerCache> {
        self.layers.iter().find(|c| c.layer == layer)
    }
}

/// Concatenated gradient of every parameter of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub layer: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub logits: Tensor,
    pub layer_grads: BTreeMap<usize, LayerGradients>,
    pub grads: Gradients,
    pub caches: Option<LayerCaches>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub caches: Option<LayerCaches>,
}

struct Built {
    graph: Graph,
    logits: NodeId,
    loss: Option<NodeId>,
    layer_out: Vec<(usize, NodeId, NodeId)>,
    pooled: NodeId,
    lengths: Vec<usize>,
}

pub(crate) fn layer_param_name(layer: usize, field: &str) -> String {
    format!("layers.{layer}.{field}")
}

impl ModelState {
    /// Randomly initialized model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embeddings = Embeddings {
            token: trunc_normal(&[config.vocab_size, d], &mut rng),
            position: trunc_normal(&[config.max_seq_len, d], &mut rng),
            ln: LayerNormParams::identity(d),
        };
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(&config, &mut rng))
            .collect();
        let head = ClassifierHead {
            pooler_w: trunc_normal(&[d, d], &mut rng),
            pooler_b: Tensor::zeros(&[d]),
            classifier_w: trunc_normal(&[d, config.n_classes], &mut rng),
            classifier_b: Tensor::zeros(&[config.n_classes]),
        };
        Ok(ModelState {
            prune_mask: vec![false; config.n_layers],
            config,
            embeddings,
            layers,
            head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn live_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| !self.prune_mask[l]).collect()
    }

    pub fn is_pruned(&self, layer: usize) -> bool {
        self.prune_mask.get(layer).copied().unwrap_or(false)
    }

    /// Marks `layer` as pruned: it becomes an identity in forward and drops
    /// out of the parameter count and gradient bundles.
    pub fn prune_layer(&mut self, layer: usize) -> Result<()> {
        match self.prune_mask.get(layer) {
            None => Err(ModelError::LayerOutOfRange(layer)),
            Some(true) => Err(ModelError::AlreadyPruned(layer)),
            Some(false) => {
                self.prune_mask[layer] = true;
                Ok(())
            }
        }
    }

    pub fn param_count(&self) -> u64 {
        param_count(&ParamDims::from_config(&self.config), &self.prune_mask)
    }

    /// Every tensor in declaration order, pruned layers included.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.embeddings.token),
            ("embeddings.position".to_string(), &self.embeddings.position),
            ("embeddings.ln.gamma".to_string(), &self.embeddings.ln.gamma),
            ("embeddings.ln.beta".to_string(), &self.embeddings.ln.beta),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((layer_param_name(l, field), t));
            }
        }
        out.extend([
            ("head.pooler_w".to_string(), &self.head.pooler_w),
            ("head.pooler_b".to_string(), &self.head.pooler_b),
            ("head.classifier_w".to_string(), &self.head.classifier_w),
            ("head.classifier_b".to_string(), &self.head.classifier_b),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.embeddings.token),
            ("embeddings.position".to_string(), &mut self.embeddings.position),
            ("embeddings.ln.gamma".to_string(), &mut self.embeddings.ln.gamma),
            ("embeddings.ln.beta".to_string(), &mut self.embeddings.ln.beta),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((layer_param_name(l, field), t));
            }
        }
        out.extend([
            ("head.pooler_w".to_string(), &mut self.head.pooler_w),
            ("head.pooler_b".to_string(), &mut self.head.pooler_b),
            ("head.classifier_w".to_string(), &mut self.head.classifier_w),
            ("head.classifier_b".to_string(), &mut self.head.classifier_b),
        ]);
        out
    }

    /// Trainable tensors of the live model (pruned layers excluded).
    pub fn live_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mask = self.prune_mask.clone();
        self.named_tensors_mut()
            .into_iter()
            .filter(|(name, _)| match layer_of(name) {
                Some(l) => !mask[l],
                None => true,
            })
            .collect()
    }

    fn build(&self, batch: &TokenBatch, with_loss: bool) -> Result<Built> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.max_len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                width: batch.max_len,
                max: self.config.max_seq_len,
            });
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        let mut lengths = Vec::with_capacity(batch.len());
        for s in 0..batch.len() {
            let start = ids.len();
            let row = batch.row_ids(s);
            let mask = &batch.mask[s * batch.max_len..(s + 1) * batch.max_len];
            for (p, (&id, &m)) in row.iter().zip(mask).enumerate() {
                if m == 0 {
                    continue;
                }
                if id >= self.config.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        sample: s,
                        id,
                        vocab: self.config.vocab_size,
                    });
                }
                ids.push(id);
                positions.push(p);
            }
            let len = ids.len() - start;
            if len == 0 {
                return Err(ModelError::EmptySequence(s));
            }
            segments.push(Segment { start, len });
            lengths.push(len);
        }
        if with_loss {
            if let Some(&label) = batch.labels.iter().find(|&&y| y >= self.config.n_classes) {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    classes: self.config.n_classes,
                });
            }
        }

        let mut g = Graph::new();
        let e = &self.embeddings;
        let tok_table = g.param("embeddings.token", e.token.clone());
        let pos_table = g.param("embeddings.position", e.position.clone());
        let eg = g.param("embeddings.ln.gamma", e.ln.gamma.clone());
        let eb = g.param("embeddings.ln.beta", e.ln.beta.clone());
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let tok = g.embedding(tok_table, ids);
        let pos = g.embedding(pos_table, positions);
        let x = g.add(tok, pos);
        let mut x = g.layer_norm(x, eg, eb, LAYER_NORM_EPS);

        let mut layer_out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if self.prune_mask[l] {
                continue;
            }
            let p: Vec<NodeId> = LAYER_FIELDS
                .iter()
                .zip(layer.fields())
                .map(|(f, t)| g.param(&layer_param_name(l, f), t.clone()))
                .collect();
            let q = g.matmul(x, p[0]);
            let q = g.add_row(q, p[1]);
            let k = g.matmul(x, p[2]);
            let k = g.add_row(k, p[3]);
            let v = g.matmul(x, p[4]);
            let v = g.add_row(v, p[5]);
            let att = g.attention(q, k, v, segments.clone(), self.config.n_heads);
            let o = g.matmul(att, p[6]);
            let o = g.add_row(o, p[7]);
            let r1 = g.add(x, o);
            let x1 = g.layer_norm(r1, p[8], p[9], LAYER_NORM_EPS);
            let f = g.matmul(x1, p[10]);
            let f = g.add_row(f, p[11]);
            let f = g.gelu(f);
            let f = g.matmul(f, p[12]);
            let f = g.add_row(f, p[13]);
            let r2 = g.add(x1, f);
            x = g.layer_norm(r2, p[14], p[15], LAYER_NORM_EPS);
            layer_out.push((l, x, att));
        }

        let h = &self.head;
        let pw = g.param("head.pooler_w", h.pooler_w.clone());
        let pb = g.param("head.pooler_b", h.pooler_b.clone());
        let cw = g.param("head.classifier_w", h.classifier_w.clone());
        let cb = g.param("head.classifier_b", h.classifier_b.clone());
        let cls = g.gather_rows(x, cls_rows);
        let pooled = g.matmul(cls, pw);
        let pooled = g.add_row(pooled, pb);
        let pooled = g.tanh(pooled);
        let logits = g.matmul(pooled, cw);
        let logits = g.add_row(logits, cb);
        let loss = with_loss.then(|| g.cross_entropy(logits, batch.labels.clone()));
        Ok(Built {
            graph: g,
            logits,
            loss,
            layer_out,
            pooled,
            lengths,
        })
    }

    fn collect_caches(&self, built: &Built, batch: &TokenBatch) -> Result<LayerCaches> {
        let g = &built.graph;
        let mut layers = Vec::with_capacity(built.layer_out.len());
        for &(l, out, att) in &built.layer_out {
            let probs = g.attention_probs(att).ok_or(TensorError::NotEvaluated)?.to_vec();
            layers.push(LayerCache {
                layer: l,
                activations: ActivationMatrix {
                    values: g.value(out)?.clone(),
                    lengths: built.lengths.clone(),
                },
                attention: AttentionTensor::new(self.config.n_heads, built.lengths.clone(), probs),
            });
        }
        Ok(LayerCaches {
            layers,
            pooled: ActivationMatrix {
                values: g.value(built.pooled)?.clone(),
                lengths: vec![1; batch.len()],
            },
            labels: batch.labels.clone(),
            max_len: batch.max_len,
        })
    }

    /// Logits (`batch x n_classes`) and, when `capture` is set, the caches of
    /// every live layer.
    pub fn forward(&self, batch: &TokenBatch, capture: bool) -> Result<ForwardOutput> {
        let mut built = self.build(batch, false)?;
        built.graph.forward()?;
        let caches = if capture {
            Some(self.collect_caches(&built, batch)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            logits: built.graph.value(built.logits)?.clone(),
            caches,
        })
    }

    /// Mean cross-entropy over the batch and its gradient, grouped per layer.
    pub fn loss_and_grads(&self, batch: &TokenBatch, capture: bool) -> Result<LossAndGrads> {
        let mut built = self.build(batch, true)?;
        built.graph.forward()?;
        let loss_node = built.loss.expect("built with loss");
        let grads = built.graph.backward(loss_node)?;
        let mut layer_grads = BTreeMap::new();
        for &(l, _, _) in &built.layer_out {
            let mut values = Vec::new();
            for f in LAYER_FIELDS {
                let t = grads
                    .get(&layer_param_name(l, f))
                    .expect("live layer params are in the graph");
                values.extend_from_slice(t.data());
            }
            layer_grads.insert(l, LayerGradients { layer: l, values });
        }
        let caches = if capture {
            Some(self.collect_caches(&built, batch)?)
        } else {
            None
        };
        Ok(LossAndGrads {
            loss: built.graph.value(loss_node)?.item(),
            logits: built.graph.value(built.logits)?.clone(),
            layer_grads,
            grads,
            caches,
        })
    }

    /// Gradient of a custom objective. `objective` receives the graph, the
    /// logits node and the mean cross-entropy node, and returns a scalar
    /// loss node.
    pub fn objective_and_grads<F>(&self, batch: &TokenBatch, objective: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&mut Graph, NodeId, NodeId) -> NodeId,
    {
        let mut built = self.build(batch, true)?;
        let ce = built.loss.expect("built with loss");
        let loss = objective(&mut built.graph, built.logits, ce);
        built.graph.forward()?;
        let grads = built.graph.backward(loss)?;
        Ok((built.graph.value(loss)?.item(), grads))
    }

    /// Mean cross-entropy without a backward pass.
    pub fn loss(&self, batch: &TokenBatch) -> Result<f64> {
        let mut built = self.build(batch, true)?;
        built.graph.forward()?;
        Ok(built.graph.value(built.loss.expect("built with loss"))?.item())
    }

    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let logits = self.forward(batch, false)?.logits;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Fraction of `samples` classified correctly.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut hits = 0usize;
        for batch in crate::data::batches(samples, EVAL_BATCH) {
            let pred = self.predict(&batch)?;
            hits += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}

/// Layer index encoded in a parameter name, if any.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
