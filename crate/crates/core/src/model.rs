//! Transformer encoder over frame embeddings with one classification head per
//! question.
//!
//! Pipeline per episode: input projection, positional encoding, `n_layers`
//! pre-norm blocks (masked multi-head self-attention and a GELU feed-forward
//! network, each with a residual connection), pooling over real frames, then
//! six independent two-layer heads. Padded frames are excluded from the
//! attention keys and from pooling, so they never affect a logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::dataset::QuestionId;
use crate::sequence::EpisodeSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence {key} is {found:?} but the model expects {expected:?}")]
    Dimension {
        key: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint does not match model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Sinusoidal,
    Learned,
    /// No positional signal; the encoder is then order-invariant.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MaskedMean,
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_attention_heads: usize,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub max_len: usize,
    pub n_questions: usize,
    pub n_classes: usize,
    pub positional_encoding: PositionalEncoding,
    pub pooling: Pooling,
    /// L2-normalize each real frame embedding before the input projection.
    pub normalize_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 512,
            d_model: 128,
            n_layers: 2,
            n_attention_heads: 4,
            ffn_dim: 256,
            head_hidden: 64,
            max_len: 100,
            n_questions: QuestionId::COUNT,
            n_classes: 5,
            positional_encoding: PositionalEncoding::Sinusoidal,
            pooling: Pooling::MaskedMean,
            normalize_inputs: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("n_attention_heads", self.n_attention_heads),
            ("ffn_dim", self.ffn_dim),
            ("head_hidden", self.head_hidden),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_attention_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_attention_heads {}",
                self.d_model, self.n_attention_heads
            )));
        }
        if self.n_questions != QuestionId::COUNT {
            return Err(ModelError::Config(format!(
                "n_questions must be {}, got {}",
                QuestionId::COUNT,
                self.n_questions
            )));
        }
        if self.n_classes < 2 {
            return Err(ModelError::Config("n_classes must be at least 2".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_attention_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// U(-a, a) with a = sqrt(3 / fan_in), i.e. standard deviation 1/sqrt(fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LinearIx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIx {
    norm1: NormIx,
    q: LinearIx,
    k: LinearIx,
    v: LinearIx,
    o: LinearIx,
    norm2: NormIx,
    ff1: LinearIx,
    ff2: LinearIx,
}

#[derive(Debug, Clone, Copy)]
struct HeadIx {
    hidden: LinearIx,
    out: LinearIx,
}

/// Canonical parameter order and names for a config.
#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<Entry>,
    input: LinearIx,
    position: Option<usize>,
    layers: Vec<LayerIx>,
    heads: Vec<HeadIx>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            entries.push(Entry { name, shape, init });
            entries.len() - 1
        };
        let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                      prefix: &str,
                      fan_in: usize,
                      fan_out: usize| LinearIx {
            w: add(
                format!("{prefix}.weight"),
                vec![fan_in, fan_out],
                Init::FanIn(fan_in),
            ),
            b: add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        };
        let d = cfg.d_model;
        let input = linear(&mut add, "input_proj", cfg.d_in, d);
        let position = (cfg.positional_encoding == PositionalEncoding::Learned)
            .then(|| add("position".into(), vec![cfg.max_len, d], Init::FanIn(d)));
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let norm =
                |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str| NormIx {
                    gamma: add(format!("{p}.{name}.gamma"), vec![d], Init::Ones),
                    beta: add(format!("{p}.{name}.beta"), vec![d], Init::Zeros),
                };
            let norm1 = norm(&mut add, "norm1");
            let q = linear(&mut add, &format!("{p}.attn.q"), d, d);
            let k = linear(&mut add, &format!("{p}.attn.k"), d, d);
            let v = linear(&mut add, &format!("{p}.attn.v"), d, d);
            let o = linear(&mut add, &format!("{p}.attn.o"), d, d);
            let norm2 = norm(&mut add, "norm2");
            let ff1 = linear(&mut add, &format!("{p}.ffn.in"), d, cfg.ffn_dim);
            let ff2 = linear(&mut add, &format!("{p}.ffn.out"), cfg.ffn_dim, d);
            layers.push(LayerIx {
                norm1,
                q,
                k,
                v,
                o,
                norm2,
                ff1,
                ff2,
            });
        }
        let heads = QuestionId::ALL
            .iter()
            .map(|q| HeadIx {
                hidden: linear(&mut add, &format!("heads.{q}.hidden"), d, cfg.head_hidden),
                out: linear(
                    &mut add,
                    &format!("heads.{q}.out"),
                    cfg.head_hidden,
                    cfg.n_classes,
                ),
            })
            .collect();
        Layout {
            entries,
            input,
            position,
            layers,
            heads,
        }
    }
}

/// All trainable tensors, in the canonical order of [`ModelParams::names`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> Vec<String> {
        Layout::new(&self.config)
            .entries
            .into_iter()
            .map(|e| e.name)
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names()
            .into_iter()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Rebuild from named tensors (e.g. a loaded checkpoint).
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(layout.entries.len());
        for e in &layout.entries {
            let t = by_name
                .remove(&e.name)
                .ok_or_else(|| ModelError::Layout(format!("missing `{}`", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(ModelError::Layout(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Layout(format!("unexpected `{extra}`")));
        }
        Ok(Self { config, tensors })
    }
}

/// Fan-in scaled uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .entries
        .iter()
        .map(|e| match e.init {
            Init::Zeros => Tensor::zeros(e.shape.clone()),
            Init::Ones => Tensor::from_fn(e.shape.clone(), |_| 1.0),
            Init::FanIn(fan_in) => {
                let a = (3.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(e.shape.clone(), |_| rng.random_range(-a..a))
            }
        })
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        tensors,
    })
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_table<T: Real>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([len, d], |idx| {
        let (pos, i) = (idx / d, idx % d);
        let freq = 10_000f64.powf(-((i - i % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Inverted dropout applied during training only.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Parameters registered on a tape, addressable by the model layout.
pub struct Bound {
    layout: Layout,
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Self {
        Self {
            layout: Layout::new(&params.config),
            vars: params
                .tensors
                .iter()
                .map(|t| tape.param(t.clone()))
                .collect(),
        }
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }
}

fn check_sequence(cfg: &ModelConfig, seq: &EpisodeSequence) -> Result<(), ModelError> {
    if seq.max_len() != cfg.max_len || seq.dim() != cfg.d_in {
        return Err(ModelError::Dimension {
            key: seq.key.to_string(),
            expected: (cfg.max_len, cfg.d_in),
            found: (seq.max_len(), seq.dim()),
        });
    }
    Ok(())
}

fn input_matrix<T: Real>(cfg: &ModelConfig, seq: &EpisodeSequence) -> Tensor<T> {
    let d = seq.dim();
    let mut data: Vec<T> = seq.embeddings().iter().map(|&x| T::of(x as f64)).collect();
    if cfg.normalize_inputs {
        for row in data.chunks_exact_mut(d).take(seq.true_len()) {
            let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            if norm > 0.0 {
                let inv = T::of(1.0 / norm);
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }
    Tensor::new([seq.max_len(), d], data).expect("sequence shape")
}

fn linear<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    x: Var,
    ix: LinearIx,
) -> Result<Var, TensorError> {
    let y = tape.matmul(x, b.v(ix.w))?;
    tape.add(y, b.v(ix.b))
}

fn dropout<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var, TensorError> {
    let Some(d) = drop.as_mut().filter(|d| d.rate > 0.0) else {
        return Ok(x);
    };
    let keep = 1.0 - d.rate;
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(shape, |_| {
        if d.rng.random::<f64>() < keep {
            T::of(1.0 / keep)
        } else {
            T::zero()
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Logits `[6, n_classes]` for one episode, recorded on `tape`.
pub fn forward_sequence<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    seq: &EpisodeSequence,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var, ModelError> {
    check_sequence(cfg, seq)?;
    let n_valid = seq.true_len();
    let layout = &b.layout;

    let pooled = if n_valid == 0 {
        tape.constant(Tensor::zeros([1, cfg.d_model]))
    } else {
        let x = tape.constant(input_matrix(cfg, seq));
        let mut h = linear(tape, b, x, layout.input)?;
        match cfg.positional_encoding {
            PositionalEncoding::Sinusoidal => {
                let pe = tape.constant(sinusoidal_table(cfg.max_len, cfg.d_model));
                h = tape.add(h, pe)?;
            }
            PositionalEncoding::Learned => {
                let rows: Vec<usize> = (0..cfg.max_len).collect();
                let pe = tape.row_select(b.v(layout.position.expect("learned table")), &rows)?;
                h = tape.add(h, pe)?;
            }
            PositionalEncoding::None => {}
        }
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for l in &layout.layers {
            let a = tape.layer_norm(h, b.v(l.norm1.gamma), b.v(l.norm1.beta))?;
            let q = linear(tape, b, a, l.q)?;
            let k = linear(tape, b, a, l.k)?;
            let v = linear(tape, b, a, l.v)?;
            let mut outs = Vec::with_capacity(cfg.n_attention_heads);
            for head in 0..cfg.n_attention_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.mask_keys(scores, n_valid)?;
                let attn = tape.softmax(scores)?;
                outs.push(tape.matmul(attn, vh)?);
            }
            let joined = if outs.len() == 1 {
                outs[0]
            } else {
                tape.concat(&outs, 1)?
            };
            let o = linear(tape, b, joined, l.o)?;
            let o = dropout(tape, o, drop)?;
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, b.v(l.norm2.gamma), b.v(l.norm2.beta))?;
            let f = linear(tape, b, f, l.ff1)?;
            let f = tape.gelu(f)?;
            let f = linear(tape, b, f, l.ff2)?;
            let f = dropout(tape, f, drop)?;
            h = tape.add(h, f)?;
        }
        match cfg.pooling {
            Pooling::MaskedMean => {
                let mask: Vec<bool> = (0..cfg.max_len).map(|i| i < n_valid).collect();
                tape.masked_mean(h, &mask)?
            }
            Pooling::FirstToken => tape.row_select(h, &[0])?,
        }
    };

    let mut rows = Vec::with_capacity(layout.heads.len());
    for head in &layout.heads {
        let z = linear(tape, b, pooled, head.hidden)?;
        let z = tape.gelu(z)?;
        rows.push(linear(tape, b, z, head.out)?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Logits for a batch, stacked as `[6·B, n_classes]` (episode-major).
pub fn forward_batch<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &ModelConfig,
    batch: &[&EpisodeSequence],
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var, ModelError> {
    let per_episode = batch
        .iter()
        .map(|s| forward_sequence(tape, b, cfg, s, drop))
        .collect::<Result<Vec<_>, _>>()?;
    if per_episode.len() == 1 {
        return Ok(per_episode[0]);
    }
    Ok(tape.concat(&per_episode, 0)?)
}

/// Inference logits `[B, 6, n_classes]`.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: &[&EpisodeSequence],
) -> Result<Tensor<T>, ModelError> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let logits = forward_batch(&mut tape, &bound, cfg, batch, &mut None)?;
    Ok(tape
        .value(logits)
        .clone()
        .reshape([batch.len(), QuestionId::COUNT, cfg.n_classes])?)
}

/// Per-episode class indices in question order.
pub type Labels = [usize; QuestionId::COUNT];

fn flatten_labels(labels: &[Labels]) -> Vec<usize> {
    labels.iter().flat_map(|l| l.iter().copied()).collect()
}

/// Mean over episodes of the mean per-question cross-entropy, for `[B, 6, C]` logits.
pub fn episode_loss<T: Real>(logits: &Tensor<T>, labels: &[Labels]) -> Result<f64, ModelError> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != labels.len() || s[1] != QuestionId::COUNT {
        return Err(ModelError::Config(format!(
            "logits {s:?} do not match {} labelled episodes",
            labels.len()
        )));
    }
    let mut tape = Tape::<T>::new();
    let flat = tape.constant(logits.clone().reshape([s[0] * s[1], s[2]])?);
    let loss = tape.cross_entropy(flat, &flatten_labels(labels))?;
    Ok(tape.value(loss).item().f64())
}

/// Training loss and the gradient of every parameter, in canonical order.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &[&EpisodeSequence],
    labels: &[Labels],
    mut drop: Option<Dropout<'_>>,
    tape: Tape<T>,
) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
    let mut tape = tape;
    let bound = Bound::new(&mut tape, params);
    let logits = forward_batch(&mut tape, &bound, &params.config, batch, &mut drop)?;
    let loss = tape.cross_entropy(logits, &flatten_labels(labels))?;
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
        .collect();
    Ok((tape.value(loss).item().f64(), grads))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-question predicted class indices.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    seq: &EpisodeSequence,
) -> Result<Labels, ModelError> {
    let logits = forward(params, &[seq])?;
    Ok(predict_from_logits(logits.data(), params.config.n_classes))
}

pub fn predict_from_logits<T: Real>(logits: &[T], n_classes: usize) -> Labels {
    let mut out = [0; QuestionId::COUNT];
    for (o, row) in out.iter_mut().zip(logits.chunks_exact(n_classes)) {
        *o = argmax(row);
    }
    out
}
