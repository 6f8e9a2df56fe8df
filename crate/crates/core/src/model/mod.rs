//! Small transformer encoder with a masked-LM head.
//!
//! Sequences in a batch are packed end to end into one `[tokens, d_model]`
//! activation matrix. Position-wise layers run on the packed matrix and
//! attention runs per sequence on its own row block, so a batch needs no
//! padding and gives the same logits as running each sequence alone.

pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::util::derive_seed;

pub use vocab::{tokenize, VOCAB_SIZE};

pub const INIT_STDDEV: f64 = 0.02;
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ffn: 128,
            max_seq: 32,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size is fixed at {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form scalar parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        let (v, s, d, f) = (self.vocab_size, self.max_seq, self.d_model, self.d_ffn);
        let embed = v * d + s * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let ffn = d * f + f + f * d + d + 2 * d;
        let head = d * v + v;
        embed + self.n_layers * (attention + ffn) + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

const EMBED_PARAMS: usize = 4;
const LAYER_PARAMS: usize = 16;

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, s, d, f) = (cfg.vocab_size, cfg.max_seq, cfg.d_model, cfg.d_ffn);
    let mut specs = vec![
        ("embed.token".to_string(), vec![v, d], Init::Normal),
        ("embed.position".to_string(), vec![s, d], Init::Normal),
        ("embed.norm.gain".to_string(), vec![d], Init::Ones),
        ("embed.norm.bias".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.n_layers {
        let p = |name: &str| format!("layer{l}.{name}");
        for proj in ["q", "k", "v", "o"] {
            specs.push((p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            specs.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        specs.push((p("attn.norm.gain"), vec![d], Init::Ones));
        specs.push((p("attn.norm.bias"), vec![d], Init::Zeros));
        specs.push((p("ffn.in.weight"), vec![d, f], Init::Normal));
        specs.push((p("ffn.in.bias"), vec![f], Init::Zeros));
        specs.push((p("ffn.out.weight"), vec![f, d], Init::Normal));
        specs.push((p("ffn.out.bias"), vec![d], Init::Zeros));
        specs.push((p("ffn.norm.gain"), vec![d], Init::Ones));
        specs.push((p("ffn.norm.bias"), vec![d], Init::Zeros));
    }
    specs.push(("mlm.weight".to_string(), vec![d, v], Init::Normal));
    specs.push(("mlm.bias".to_string(), vec![v], Init::Zeros));
    specs
}

/// Named, ordered model parameters together with the config that shaped
/// them. The order is fixed by the architecture and never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let tensors = layout(config)
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, init))| {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, derive_seed(config.seed, i as u64), INIT_STDDEV)?,
                Init::Zeros => Tensor::zeros(&shape)?,
                Init::Ones => Tensor::full(&shape, 1.0)?,
            };
            Ok((name, t))
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Reassemble from named tensors, checking them against the layout
    /// implied by `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match layout entry {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, t) in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A copy with every tensor refilled from `flat`, in parameter order.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        let mut copy = self.clone();
        copy.assign_flat(flat)?;
        Ok(copy)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::InvalidInput(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `(name, offset, len)` of each tensor inside the flat vector.
    pub fn segments(&self) -> Vec<(&str, usize, usize)> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let seg = (name.as_str(), offset, t.len());
                offset += t.len();
                seg
            })
            .collect()
    }

    /// Flat index range covering all parameters of encoder block `layer`.
    pub fn layer_range(&self, layer: usize) -> Result<std::ops::Range<usize>> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidInput(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        let prefix = format!("layer{layer}.");
        let segs: Vec<_> = self
            .segments()
            .into_iter()
            .filter(|(n, _, _)| n.starts_with(&prefix))
            .collect();
        let start = segs[0].1;
        let (_, last_off, last_len) = *segs.last().unwrap();
        Ok(start..last_off + last_len)
    }

    /// Add every tensor to `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(_, t)| graph.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Graph leaves for a [`ModelParams`], in parameter order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Concatenated gradients of all parameters after `backward`.
    pub fn flat_grad(&self, graph: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.vars {
            match graph.grad(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(graph.value(v).len())),
            }
        }
        out
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[EMBED_PARAMS + l * LAYER_PARAMS + k]
    }

    fn head(&self, k: usize) -> Var {
        self.vars[self.vars.len() - 2 + k]
    }
}

/// Token ids with masked positions and their original tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
    #[serde(rename = "targets")]
    pub target_ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, mask_positions: Vec<usize>, target_ids: Vec<usize>) -> Result<Self> {
        let seq = TokenSeq {
            ids,
            mask_positions,
            target_ids,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.ids.iter().chain(&self.target_ids).find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
        }
        if self.mask_positions.len() != self.target_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} mask positions but {} targets",
                self.mask_positions.len(),
                self.target_ids.len()
            )));
        }
        if self.mask_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("mask positions not strictly increasing".into()));
        }
        for &p in &self.mask_positions {
            if p >= self.ids.len() || self.ids[p] != vocab::MASK {
                return Err(Error::InvalidInput(format!("position {p} is not a [MASK] token")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mask-position logits: one row of `vocab` scores per mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Build the forward pass for a packed batch. Returns the `[masks, vocab]`
/// logits node, or `None` when the batch has no mask positions.
pub fn forward_batch(
    graph: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    seqs: &[&TokenSeq],
) -> Result<Option<Var>> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut gather = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.ids.is_empty() {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if seq.ids.len() > cfg.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence of length {} exceeds max_seq {}",
                seq.ids.len(),
                cfg.max_seq
            )));
        }
        let start = ids.len();
        spans.push((start, seq.ids.len()));
        gather.extend(seq.mask_positions.iter().map(|p| start + p));
        ids.extend_from_slice(&seq.ids);
        positions.extend(0..seq.ids.len());
    }

    let v = &params.vars;
    let tok = graph.embedding(v[0], &ids)?;
    let pos = graph.embedding(v[1], &positions)?;
    let x = graph.add(tok, pos)?;
    let mut x = graph.layernorm(x, v[2], v[3], 1, LAYERNORM_EPS)?;

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = |k| params.layer(l, k);
        let linear = |g: &mut Graph, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };
        let q = linear(graph, x, p(0), p(1))?;
        let k = linear(graph, x, p(2), p(3))?;
        let vv = linear(graph, x, p(4), p(5))?;

        let mut contexts = Vec::with_capacity(spans.len());
        for &(start, len) in &spans {
            let (qs, ks, vs) = if spans.len() == 1 {
                (q, k, vv)
            } else {
                (
                    graph.slice_rows(q, start, len)?,
                    graph.slice_rows(k, start, len)?,
                    graph.slice_rows(vv, start, len)?,
                )
            };
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (qs, ks, vs)
                } else {
                    (
                        graph.slice_cols(qs, h * dh, dh)?,
                        graph.slice_cols(ks, h * dh, dh)?,
                        graph.slice_cols(vs, h * dh, dh)?,
                    )
                };
                let kt = graph.transpose(kh)?;
                let scores = graph.matmul(qh, kt)?;
                let scores = graph.scale(scores, inv_sqrt);
                let attn = graph.softmax(scores, 1)?;
                heads.push(graph.matmul(attn, vh)?);
            }
            contexts.push(if heads.len() == 1 { heads[0] } else { graph.concat_cols(&heads)? });
        }
        let ctx = if contexts.len() == 1 { contexts[0] } else { graph.concat_rows(&contexts)? };
        let attn_out = linear(graph, ctx, p(6), p(7))?;
        let res = graph.add(x, attn_out)?;
        x = graph.layernorm(res, p(8), p(9), 1, LAYERNORM_EPS)?;

        let hidden = linear(graph, x, p(10), p(11))?;
        let hidden = graph.gelu(hidden);
        let ffn_out = linear(graph, hidden, p(12), p(13))?;
        let res = graph.add(x, ffn_out)?;
        x = graph.layernorm(res, p(14), p(15), 1, LAYERNORM_EPS)?;
    }

    if gather.is_empty() {
        return Ok(None);
    }
    let masked = graph.gather_rows(x, &gather)?;
    let logits = graph.matmul(masked, params.head(0))?;
    Ok(Some(graph.add(logits, params.head(1))?))
}

/// Batch MLM loss node: the mean over sequences of each sequence's mean
/// cross-entropy at its mask positions.
pub fn batch_loss(graph: &mut Graph, params: &BoundParams, cfg: &ModelConfig, seqs: &[&TokenSeq]) -> Result<Var> {
    if let Some(s) = seqs.iter().find(|s| s.mask_positions.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "sequence without mask positions: {}",
            vocab::detokenize(&s.ids)
        )));
    }
    let logits = forward_batch(graph, params, cfg, seqs)?.expect("every sequence has masks");
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for s in seqs {
        let w = 1.0 / (seqs.len() * s.mask_positions.len()) as f64;
        targets.extend_from_slice(&s.target_ids);
        weights.extend(std::iter::repeat(w).take(s.target_ids.len()));
    }
    graph.cross_entropy_weighted(logits, &targets, &weights)
}

/// Logits at the mask positions of `seq`.
pub fn forward_mlm(params: &ModelParams, seq: &TokenSeq) -> Result<Logits> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let vocab = params.config.vocab_size;
    match forward_batch(&mut graph, &bound, &params.config, &[seq])? {
        None => Ok(Logits {
            rows: 0,
            vocab,
            data: Vec::new(),
        }),
        Some(v) => Ok(Logits {
            rows: seq.mask_positions.len(),
            vocab,
            data: graph.value(v).data().to_vec(),
        }),
    }
}

/// Mean masked cross-entropy of `seq`, without gradient.
pub fn mlm_loss(params: &ModelParams, seq: &TokenSeq) -> Result<f64> {
    batch_loss_value(params, &[seq])
}

pub fn batch_loss_value(params: &ModelParams, seqs: &[&TokenSeq]) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let loss = batch_loss(&mut graph, &bound, &params.config, seqs)?;
    graph.value(loss).item()
}

/// Batch loss and its gradient with respect to the flat parameter vector.
pub fn loss_and_grad(params: &ModelParams, seqs: &[&TokenSeq]) -> Result<(f64, Vec<f64>)> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let loss = batch_loss(&mut graph, &bound, &params.config, seqs)?;
    graph.backward(loss)?;
    Ok((graph.value(loss).item()?, bound.flat_grad(&graph)))
}

/// Argmax token at each mask position, optionally restricted to
/// `allowed`. Ties go to the lowest token id.
pub fn predict_masked(params: &ModelParams, seq: &TokenSeq, allowed: Option<&[usize]>) -> Result<Vec<usize>> {
    if let Some(ids) = allowed {
        if ids.is_empty() {
            return Err(Error::InvalidInput("allowed token set is empty".into()));
        }
        if let Some(id) = ids.iter().find(|&&id| id >= params.config.vocab_size) {
            return Err(Error::InvalidInput(format!("allowed id {id} outside vocabulary")));
        }
    }
    let logits = forward_mlm(params, seq)?;
    let mut candidates: Vec<usize> = match allowed {
        Some(ids) => ids.to_vec(),
        None => (0..logits.vocab).collect(),
    };
    candidates.sort_unstable();
    candidates.dedup();
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
