//! A compact transformer encoder whose self-attention projections carry
//! adapted layers, the prompt encoder that produces `x_sa`, and a slot-value
//! classification head.
//!
//! Token rows are `√d · embedding + sinusoidal position`. Each block runs
//! multi-head self-attention (query and value projections adapted by default),
//! residual + layer norm, a ReLU feed-forward, residual + layer norm.
//!
//! The prompt feature `x_sa` for a slot is multi-head attention with
//! high-frequency dialog terms as queries and the slot description tokens as
//! keys and values, mean-pooled over the terms. It enters every adapted layer
//! as a single row broadcast over sequence positions, so in merged inference
//! it becomes a per-slot bias.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adapter::{
    assign_layer_modes, merge_for_inference, route, tape_layer_forward, tape_route, FrozenNoise, HiCoLayerParams,
    LayerMode, LayerVars, RoutePhase, RoutingVars, TapeRouting,
};
use crate::autograd::{grad_check, row_softmax, GradReport, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{kaiming_zero_init, milora_init, pissa_init, semsvd_init, InitStrategy, Truncation};
use crate::numkit::{gumbel_noise, normalize, svd, Matrix, RngStream};

pub const SEP_TOKEN: &str = "[sep]";
pub const UNK_TOKEN: &str = "[unk]";
pub const NONE_VALUE: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rank: usize,
    /// Fraction of top layers in full-collaboration mode.
    pub alpha: f64,
    pub max_seq_len: usize,
    /// Sinusoidal positions; disabled only in tests of permutation behavior.
    pub positions: bool,
    /// Reverse the layer-mode list (low layers collaborate fully).
    pub swap_modes: bool,
    pub gumbel_temperature: f64,
    /// Argmax instead of softmax routing at inference.
    pub hard_infer: bool,
    /// Adapt all four attention projections instead of query and value only.
    pub adapt_all_projections: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            heads: 4,
            ffn_dim: 64,
            vocab_size: 0,
            rank: 4,
            alpha: 0.5,
            max_seq_len: 128,
            positions: true,
            swap_modes: false,
            gumbel_temperature: 1.0,
            hard_infer: false,
            adapt_all_projections: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer count, dims and heads must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.rank == 0 || self.rank > self.hidden_dim {
            return Err(Error::Config(format!(
                "rank {} must lie in 1..={}",
                self.rank, self.hidden_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.gumbel_temperature.is_nan() || self.gumbel_temperature <= 0.0 {
            return Err(Error::Config("gumbel temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> Result<Vec<LayerMode>> {
        assign_layer_modes(self.num_layers, self.alpha, self.swap_modes)
    }
}

/// Token ↔ id map over whitespace tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Special tokens first, then the given tokens sorted and deduplicated.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut rest: Vec<String> = tokens.into_iter().map(Into::into).collect();
        rest.sort();
        rest.dedup();
        rest.retain(|t| t != SEP_TOKEN && t != UNK_TOKEN);
        let mut all = vec![SEP_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(rest);
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(1)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub(crate) fn rebuild_index(&mut self) {
        *self = Self::from_tokens(std::mem::take(&mut self.tokens));
    }
}

/// One attention projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Plain(Matrix),
    Adapted(HiCoLayerParams),
    /// Inference form: one dense weight plus a bias per slot-prompt key.
    Merged { weight: Matrix, bias: BTreeMap<String, Matrix> },
}

impl Projection {
    pub fn base(&self) -> &Matrix {
        match self {
            Projection::Plain(w) => w,
            Projection::Adapted(l) => &l.base,
            Projection::Merged { weight, .. } => weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Query, key, value, output.
    pub attn: [Projection; 4],
    /// ffn × d
    pub w1: Matrix,
    /// d × ffn
    pub w2: Matrix,
}

/// Projections of the prompt encoder (all d × d, identity at initialization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl PromptAttention {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Matrix::identity(d),
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
            wo: Matrix::identity(d),
        }
    }
}

/// Static inputs of the prompt encoder for one slot prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    /// Canonical `"domain-slot: question"` key.
    pub key: String,
    /// Tokens appended after the separator in the encoder input.
    pub prompt_tokens: Vec<String>,
    /// Query source: one row per high-frequency dialog term.
    pub term_vectors: Matrix,
    /// Key/value source: one row per slot-description token.
    pub description_vectors: Matrix,
}

/// Source of the prompt feature for an encoder pass.
#[derive(Clone, Copy, Debug)]
pub enum PromptFeature<'a> {
    Bundle(&'a PromptBundle),
    /// A fixed `x_sa` (one row broadcast, or one row per token).
    Override(&'a Matrix),
}

/// Routing regime for an encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Phase {
    /// Hard Gumbel-Softmax with noise drawn from the pass's stream.
    Train,
    Infer,
    /// Soft Gumbel-Softmax with fixed noise: a deterministic differentiable function.
    Frozen(FrozenNoise),
}

/// All model state, trainable and frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    /// vocab × d, unit rows
    pub token_embeddings: Matrix,
    pub blocks: Vec<Block>,
    pub prompt_attn: PromptAttention,
    /// classes × d
    pub head_w: Matrix,
    /// 1 × classes
    pub head_b: Matrix,
    /// Output classes; the last is always `"none"`.
    pub value_vocab: Vec<String>,
    /// Domain centroids (M × d) used by routing.
    pub domain_centroids: Matrix,
    /// Slot-prompt centroids (N × d) used by routing.
    pub slot_centroids: Matrix,
}

/// Settings for building a fresh model.
#[derive(Clone, Debug)]
pub struct ModelInit<'a> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub token_embeddings: Matrix,
    pub values: Vec<String>,
    pub domain_centroids: &'a Matrix,
    pub slot_centroids: &'a Matrix,
    pub strategy: InitStrategy,
    pub lambda: f64,
    /// Initial fusion logit (0 gives β = 0.5).
    pub beta_logit: f64,
}

fn adapted_from(
    w0: &Matrix,
    cfg: &EncoderConfig,
    mode: LayerMode,
    init: &ModelInit,
    rng: &mut RngStream,
) -> Result<HiCoLayerParams> {
    let r = cfg.rank;
    let (m, n) = (init.domain_centroids.rows(), init.slot_centroids.rows());
    let (base, a_ur, b_ur, a_sa, b_sa) = match init.strategy {
        InitStrategy::SemSvd => {
            let (pair, _) = semsvd_init(w0, r, init.lambda, init.slot_centroids)?;
            let t = Truncation::top(&svd(w0)?, r)?;
            let mut a_sa = Vec::with_capacity(m);
            for j in 0..m {
                let (_, s_e) = t.modulated(init.lambda, &init.domain_centroids.select_rows(&[j]))?;
                a_sa.push(t.factors(&s_e)?.0);
            }
            let mut b_sa = Vec::with_capacity(n);
            for j in 0..n {
                let (_, s_e) = t.modulated(init.lambda, &init.slot_centroids.select_rows(&[j]))?;
                b_sa.push(t.factors(&s_e)?.1);
            }
            (pair.base, pair.a, pair.b, a_sa, b_sa)
        }
        InitStrategy::Pissa | InitStrategy::Milora => {
            let pair = if init.strategy == InitStrategy::Pissa {
                pissa_init(w0, r)?
            } else {
                milora_init(w0, r)?
            };
            let a_sa = vec![pair.a.clone(); m];
            let b_sa = vec![pair.b.clone(); n];
            (pair.base, pair.a, pair.b, a_sa, b_sa)
        }
        InitStrategy::KaimingZero => {
            let pair = kaiming_zero_init(w0, r, rng)?;
            let mut a_sa = Vec::with_capacity(m);
            for _ in 0..m {
                a_sa.push(kaiming_zero_init(w0, r, rng)?.a);
            }
            let b_sa = vec![Matrix::zeros(w0.rows(), r); n];
            (pair.base, pair.a, pair.b, a_sa, b_sa)
        }
    };
    let layer = HiCoLayerParams {
        base,
        a_ur,
        b_ur,
        a_sa,
        b_sa,
        beta_logit: init.beta_logit,
        mode,
        temperature: cfg.gumbel_temperature,
    };
    layer.validate()?;
    Ok(layer)
}

/// Sinusoidal position table (`len × d`).
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    Matrix::from_fn(len, d, |pos, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Multi-head attention evaluated directly on matrices.
pub fn multi_head_attention(
    q_src: &Matrix,
    kv_src: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    heads: usize,
) -> Result<Matrix> {
    let q = q_src.matmul_nt(wq)?;
    let k = kv_src.matmul_nt(wk)?;
    let v = kv_src.matmul_nt(wv)?;
    let dh = q.cols() / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let scores = q.slice_cols(s, e)?.matmul_nt(&k.slice_cols(s, e)?)?.scale(1.0 / (dh as f64).sqrt());
        parts.push(row_softmax(&scores).matmul(&v.slice_cols(s, e)?)?);
    }
    Matrix::hstack(&parts)?.matmul_nt(wo)
}

/// Prompt feature for one bundle: the attended sequence and its L2-normalized mean.
pub fn prompt_attend(bundle: &PromptBundle, attn: &PromptAttention, heads: usize) -> Result<(Matrix, Vec<f64>)> {
    check_bundle(bundle)?;
    let seq = multi_head_attention(
        &bundle.term_vectors,
        &bundle.description_vectors,
        &attn.wq,
        &attn.wk,
        &attn.wv,
        &attn.wo,
        heads,
    )?;
    let pooled = normalize(seq.mean_rows().row(0))?;
    Ok((seq, pooled))
}

fn check_bundle(bundle: &PromptBundle) -> Result<()> {
    if bundle.term_vectors.rows() == 0 || bundle.description_vectors.rows() == 0 {
        return Err(Error::Argument(format!(
            "prompt {:?} needs at least one term and one description token",
            bundle.key
        )));
    }
    if bundle.term_vectors.cols() != bundle.description_vectors.cols() {
        return Err(Error::Argument(format!(
            "prompt {:?}: term dim {} differs from description dim {}",
            bundle.key,
            bundle.term_vectors.cols(),
            bundle.description_vectors.cols()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum ProjVars {
    Plain(Var),
    Adapted(LayerVars, LayerMode),
    Merged(Var),
}

#[derive(Clone, Debug)]
struct BlockVars {
    attn: Vec<ProjVars>,
    w1: Var,
    w2: Var,
}

/// Tape handles for a model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    blocks: Vec<BlockVars>,
    prompt: [Var; 4],
    head_w: Var,
    head_b: Var,
    /// Trainable nodes in [`ModelParams::trainable`] order.
    pub params: Vec<Var>,
}

/// Which otherwise-trainable groups are held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    /// Pin fusion logits (static-fusion ablation).
    pub beta: bool,
}

const PROJ_NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl ModelParams {
    pub fn new(init: ModelInit, rng: &mut RngStream) -> Result<Self> {
        let mut config = init.config.clone();
        config.vocab_size = init.vocab.len();
        config.validate()?;
        let d = config.hidden_dim;
        if init.token_embeddings.shape() != (init.vocab.len(), d) {
            return Err(Error::Argument(format!(
                "token embeddings {:?} do not match vocab {} x dim {d}",
                init.token_embeddings.shape(),
                init.vocab.len()
            )));
        }
        if init.domain_centroids.cols() != d || init.slot_centroids.cols() != d {
            return Err(Error::Argument(format!(
                "centroid dims ({}, {}) must equal hidden dim {d}; use truncate_or_pad explicitly",
                init.domain_centroids.cols(),
                init.slot_centroids.cols()
            )));
        }
        if init.values.is_empty() {
            return Err(Error::Argument("value vocabulary is empty".into()));
        }
        let modes = config.modes()?;
        let std = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for &mode in &modes {
            let mut attn = Vec::with_capacity(4);
            for p in 0..4 {
                let w0 = Matrix::random_normal(d, d, std, rng);
                let adapted = config.adapt_all_projections || p == 0 || p == 2;
                attn.push(if adapted {
                    Projection::Adapted(adapted_from(&w0, &config, mode, &init, rng)?)
                } else {
                    Projection::Plain(w0)
                });
            }
            let attn: [Projection; 4] = attn.try_into().expect("four projections");
            blocks.push(Block {
                attn,
                w1: Matrix::random_normal(config.ffn_dim, d, std, rng),
                w2: Matrix::random_normal(d, config.ffn_dim, 1.0 / (config.ffn_dim as f64).sqrt(), rng),
            });
        }
        let mut values = init.values.clone();
        values.retain(|v| v != NONE_VALUE);
        values.push(NONE_VALUE.to_string());
        let classes = values.len();
        Ok(Self {
            config,
            vocab: init.vocab,
            token_embeddings: init.token_embeddings,
            blocks,
            prompt_attn: PromptAttention::identity(d),
            head_w: Matrix::zeros(classes, d),
            head_b: Matrix::zeros(1, classes),
            value_vocab: values,
            domain_centroids: init.domain_centroids.clone(),
            slot_centroids: init.slot_centroids.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.value_vocab.len()
    }

    pub fn none_class(&self) -> usize {
        self.value_vocab.len() - 1
    }

    pub fn is_merged(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.attn.iter().any(|p| matches!(p, Projection::Merged { .. })))
    }

    /// Layer modes of the adapted projections, per block.
    pub fn modes(&self) -> Vec<Option<LayerMode>> {
        self.blocks
            .iter()
            .map(|b| {
                b.attn.iter().find_map(|p| match p {
                    Projection::Adapted(l) => Some(l.mode),
                    _ => None,
                })
            })
            .collect()
    }

    pub fn adapted_layers(&self) -> impl Iterator<Item = (String, &HiCoLayerParams)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block.attn.iter().enumerate().filter_map(move |(p, proj)| match proj {
                Projection::Adapted(l) => Some((format!("block{b}.{}", PROJ_NAMES[p]), l)),
                _ => None,
            })
        })
    }

    /// Trainable tensors by name, in a fixed order. Fusion logits appear as 1×1 matrices.
    pub fn trainable(&self, freeze: Freeze) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (p, proj) in block.attn.iter().enumerate() {
                if let Projection::Adapted(l) = proj {
                    let pre = format!("block{b}.{}", PROJ_NAMES[p]);
                    out.push((format!("{pre}.a_ur"), l.a_ur.clone()));
                    out.push((format!("{pre}.b_ur"), l.b_ur.clone()));
                    for (i, a) in l.a_sa.iter().enumerate() {
                        out.push((format!("{pre}.a_sa{i}"), a.clone()));
                    }
                    for (i, m) in l.b_sa.iter().enumerate() {
                        out.push((format!("{pre}.b_sa{i}"), m.clone()));
                    }
                    if !freeze.beta {
                        out.push((format!("{pre}.beta_logit"), Matrix::scalar(l.beta_logit)));
                    }
                }
            }
        }
        for (name, m) in [
            ("prompt.wq", &self.prompt_attn.wq),
            ("prompt.wk", &self.prompt_attn.wk),
            ("prompt.wv", &self.prompt_attn.wv),
            ("prompt.wo", &self.prompt_attn.wo),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ] {
            out.push((name.to_string(), m.clone()));
        }
        out
    }

    /// Writes back tensors produced in [`ModelParams::trainable`] order.
    pub fn set_trainable(&mut self, freeze: Freeze, values: &[Matrix]) -> Result<()> {
        let mut it = values.iter();
        let mut next = |want: (usize, usize)| -> Result<Matrix> {
            let m = it
                .next()
                .ok_or_else(|| Error::Argument("too few trainable tensors".into()))?;
            if m.shape() != want {
                return Err(Error::Argument(format!(
                    "trainable tensor shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
            Ok(m.clone())
        };
        for block in &mut self.blocks {
            for proj in &mut block.attn {
                if let Projection::Adapted(l) = proj {
                    l.a_ur = next(l.a_ur.shape())?;
                    l.b_ur = next(l.b_ur.shape())?;
                    for a in &mut l.a_sa {
                        *a = next(a.shape())?;
                    }
                    for m in &mut l.b_sa {
                        *m = next(m.shape())?;
                    }
                    if !freeze.beta {
                        l.beta_logit = next((1, 1))?.get(0, 0);
                    }
                }
            }
        }
        let p = &mut self.prompt_attn;
        p.wq = next(p.wq.shape())?;
        p.wk = next(p.wk.shape())?;
        p.wv = next(p.wv.shape())?;
        p.wo = next(p.wo.shape())?;
        self.head_w = next(self.head_w.shape())?;
        self.head_b = next(self.head_b.shape())?;
        if it.next().is_some() {
            return Err(Error::Argument("too many trainable tensors".into()));
        }
        Ok(())
    }

    /// Frozen tensors by name (token embeddings, base weights, feed-forward, centroids).
    pub fn frozen(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![("token_embeddings".to_string(), self.token_embeddings.clone())];
        for (b, block) in self.blocks.iter().enumerate() {
            for (p, proj) in block.attn.iter().enumerate() {
                out.push((format!("block{b}.{}.base", PROJ_NAMES[p]), proj.base().clone()));
            }
            out.push((format!("block{b}.w1"), block.w1.clone()));
            out.push((format!("block{b}.w2"), block.w2.clone()));
        }
        out.push(("domain_centroids".into(), self.domain_centroids.clone()));
        out.push(("slot_centroids".into(), self.slot_centroids.clone()));
        out
    }

    /// Pushes the model onto a tape, registering trainable tensors as parameters
    /// (or as constants when `trainable` is false).
    pub fn to_tape(&self, tape: &mut Tape, freeze: Freeze, trainable: bool) -> ModelVars {
        let mut params = Vec::new();
        let leaf = |tape: &mut Tape, m: &Matrix, params: &mut Vec<Var>| {
            if trainable {
                let v = tape.param(m.clone());
                params.push(v);
                v
            } else {
                tape.constant(m.clone())
            }
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut attn = Vec::with_capacity(4);
            for proj in &block.attn {
                attn.push(match proj {
                    Projection::Plain(w) => ProjVars::Plain(tape.constant(w.clone())),
                    Projection::Merged { weight, .. } => ProjVars::Merged(tape.constant(weight.clone())),
                    Projection::Adapted(l) => {
                        let base = tape.constant(l.base.clone());
                        let a_ur = leaf(tape, &l.a_ur, &mut params);
                        let b_ur = leaf(tape, &l.b_ur, &mut params);
                        let a_sa = l.a_sa.iter().map(|m| leaf(tape, m, &mut params)).collect();
                        let b_sa = l.b_sa.iter().map(|m| leaf(tape, m, &mut params)).collect();
                        let beta = Matrix::scalar(l.beta_logit);
                        let beta_logit = if freeze.beta {
                            tape.constant(beta)
                        } else {
                            leaf(tape, &beta, &mut params)
                        };
                        ProjVars::Adapted(
                            LayerVars {
                                base,
                                a_ur,
                                b_ur,
                                a_sa,
                                b_sa,
                                beta_logit,
                            },
                            l.mode,
                        )
                    }
                });
            }
            blocks.push(BlockVars {
                attn,
                w1: tape.constant(block.w1.clone()),
                w2: tape.constant(block.w2.clone()),
            });
        }
        let p = &self.prompt_attn;
        let prompt = [
            leaf(tape, &p.wq, &mut params),
            leaf(tape, &p.wk, &mut params),
            leaf(tape, &p.wv, &mut params),
            leaf(tape, &p.wo, &mut params),
        ];
        let head_w = leaf(tape, &self.head_w, &mut params);
        let head_b = leaf(tape, &self.head_b, &mut params);
        ModelVars {
            blocks,
            prompt,
            head_w,
            head_b,
            params,
        }
    }

    fn tape_mha(&self, tape: &mut Tape, q_src: Var, kv_src: Var, w: [Var; 4]) -> Result<Var> {
        let q = tape.matmul_nt(q_src, w[0])?;
        let k = tape.matmul_nt(kv_src, w[1])?;
        let v = tape.matmul_nt(kv_src, w[2])?;
        let cat = self.tape_attend_heads(tape, q, k, v)?;
        tape.matmul_nt(cat, w[3])
    }

    /// Pooled prompt feature (1 × d) on the tape, scaled like token rows.
    pub fn tape_prompt_feature(&self, tape: &mut Tape, vars: &ModelVars, bundle: &PromptBundle) -> Result<Var> {
        check_bundle(bundle)?;
        if bundle.term_vectors.cols() != self.config.hidden_dim {
            return Err(Error::Argument(format!(
                "prompt {:?} has dim {}, model dim is {}",
                bundle.key,
                bundle.term_vectors.cols(),
                self.config.hidden_dim
            )));
        }
        let q = tape.constant(bundle.term_vectors.clone());
        let kv = tape.constant(bundle.description_vectors.clone());
        let seq = self.tape_mha(tape, q, kv, vars.prompt)?;
        let pooled = tape.mean_rows(seq);
        Ok(tape.scale(pooled, self.embed_scale()))
    }

    /// Input rows: `√d · E[token] + PE`.
    pub fn input_rows(&self, token_ids: &[usize]) -> Result<Matrix> {
        let cfg = &self.config;
        if token_ids.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if token_ids.len() > cfg.max_seq_len {
            return Err(Error::Argument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                token_ids.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocab of {}",
                self.vocab.len()
            )));
        }
        let d = cfg.hidden_dim;
        let mut x = self.token_embeddings.select_rows(token_ids).scale(self.embed_scale());
        if cfg.positions {
            x.add_assign(&sinusoidal_positions(token_ids.len(), d))?;
        }
        Ok(x)
    }

    /// `√d`, applied to token embeddings and the prompt feature alike.
    pub fn embed_scale(&self) -> f64 {
        (self.config.hidden_dim as f64).sqrt()
    }

    fn has_heuristic(&self) -> bool {
        self.modes().contains(&Some(LayerMode::HeuristicGrouping))
    }

    /// Hidden states (`seq × d`) for `token_ids`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        token_ids: &[usize],
        prompt: PromptFeature,
        phase: &Phase,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let x0 = self.input_rows(token_ids)?;
        let mut h = tape.constant(x0);
        let merged_key = match prompt {
            PromptFeature::Bundle(b) => Some(b.key.as_str()),
            PromptFeature::Override(_) => None,
        };
        let needs_feature = !self.is_merged();
        let (x_sa, routing) = if needs_feature {
            let (x_sa, summary) = match prompt {
                PromptFeature::Bundle(b) => {
                    let f = self.tape_prompt_feature(tape, vars, b)?;
                    (f, f)
                }
                PromptFeature::Override(m) => {
                    if m.cols() != self.config.hidden_dim || (m.rows() != 1 && m.rows() != token_ids.len()) {
                        return Err(Error::Shape {
                            op: "x_sa override",
                            left: m.shape(),
                            right: (token_ids.len(), self.config.hidden_dim),
                        });
                    }
                    let f = tape.constant(m.clone());
                    let s = tape.mean_rows(f);
                    (f, s)
                }
            };
            let routing = if self.has_heuristic() {
                let temperature = self.config.gumbel_temperature;
                let mode = match phase {
                    Phase::Infer => TapeRouting::Infer {
                        hard: self.config.hard_infer,
                    },
                    Phase::Train => TapeRouting::Gumbel {
                        noise: FrozenNoise {
                            domain: gumbel_noise(self.domain_centroids.rows(), rng),
                            slot: gumbel_noise(self.slot_centroids.rows(), rng),
                        },
                        hard: true,
                    },
                    Phase::Frozen(noise) => TapeRouting::Gumbel {
                        noise: noise.clone(),
                        hard: false,
                    },
                };
                Some(tape_route(tape, summary, &self.domain_centroids, &self.slot_centroids, temperature, &mode)?)
            } else {
                None
            };
            (Some(x_sa), routing)
        } else {
            (None, None)
        };

        for (b, block) in self.blocks.iter().enumerate() {
            let bv = &vars.blocks[b];
            let mut proj = [h; 4];
            for (p, slot) in proj.iter_mut().take(3).enumerate() {
                *slot = self.apply_projection(tape, &block.attn[p], &bv.attn[p], h, x_sa, routing, merged_key)?;
            }
            let attended = {
                let (q, k, v) = (proj[0], proj[1], proj[2]);
                self.tape_attend_heads(tape, q, k, v)?
            };
            let out = self.apply_projection(tape, &block.attn[3], &bv.attn[3], attended, x_sa, routing, merged_key)?;
            let res = tape.add(h, out)?;
            let h1 = tape.layer_norm(res);
            let f = tape.matmul_nt(h1, bv.w1)?;
            let f = tape.relu(f);
            let f = tape.matmul_nt(f, bv.w2)?;
            let res = tape.add(h1, f)?;
            h = tape.layer_norm(res);
        }
        Ok(h)
    }

    /// Per-head scaled dot-product attention, heads concatenated (no output projection).
    fn tape_attend_heads(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        let heads = self.config.heads;
        let d = tape.value(q).cols();
        let dh = d / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.row_softmax(scores);
            parts.push(tape.matmul(attn, vh)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_projection(
        &self,
        tape: &mut Tape,
        proj: &Projection,
        pv: &ProjVars,
        x: Var,
        x_sa: Option<Var>,
        routing: Option<RoutingVars>,
        key: Option<&str>,
    ) -> Result<Var> {
        match (proj, pv) {
            (_, ProjVars::Plain(w)) => tape.matmul_nt(x, *w),
            (Projection::Adapted(_), ProjVars::Adapted(lv, mode)) => {
                let x_sa = x_sa.ok_or_else(|| Error::Contract("adapted layer without a prompt feature".into()))?;
                tape_layer_forward(tape, lv, *mode, x, x_sa, routing)
            }
            (Projection::Merged { bias, .. }, ProjVars::Merged(w)) => {
                let key = key.ok_or_else(|| Error::Contract("merged model needs a prompt key, not an override".into()))?;
                let b = bias
                    .get(key)
                    .ok_or_else(|| Error::Lookup(format!("merged model has no bias for prompt {key:?}")))?;
                let y = tape.matmul_nt(x, *w)?;
                let b = tape.constant(b.clone());
                tape.add_broadcast(y, b)
            }
            _ => Err(Error::Contract("projection and tape handles disagree".into())),
        }
    }

    /// Class logits (1 × classes): mean-pooled encoder output through the linear head.
    pub fn logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        token_ids: &[usize],
        bundle: &PromptBundle,
        phase: &Phase,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let h = self.encode(tape, vars, token_ids, PromptFeature::Bundle(bundle), phase, rng)?;
        let pooled = tape.mean_rows(h);
        let z = tape.matmul_nt(pooled, vars.head_w)?;
        tape.add(z, vars.head_b)
    }

    /// `[context; SEP; slot prompt]` token ids.
    pub fn input_ids<S: AsRef<str>>(&self, context: &[S], bundle: &PromptBundle) -> Vec<usize> {
        let mut ids = self.vocab.encode(context);
        ids.push(self.vocab.id(SEP_TOKEN));
        ids.extend(self.vocab.encode(&bundle.prompt_tokens));
        ids
    }

    /// Infer-phase class logits without gradient tracking.
    pub fn infer_logits<S: AsRef<str>>(&self, context: &[S], bundle: &PromptBundle) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, Freeze::default(), false);
        let ids = self.input_ids(context, bundle);
        let mut rng = RngStream::new(0);
        let z = self.logits(&mut tape, &vars, &ids, bundle, &Phase::Infer, &mut rng)?;
        Ok(tape.value(z).row(0).to_vec())
    }

    /// Distribution over `value_vocab` (with `"none"` last).
    pub fn predict_slot_value<S: AsRef<str>>(&self, context: &[S], bundle: &PromptBundle) -> Result<Vec<f64>> {
        let z = self.infer_logits(context, bundle)?;
        crate::numkit::softmax(&z, 1.0)
    }

    /// Infer-phase prompt feature and routing for one bundle, as plain values.
    pub fn static_prompt(&self, bundle: &PromptBundle) -> Result<(Matrix, crate::adapter::RoutingDecision)> {
        let (seq, unit) = prompt_attend(bundle, &self.prompt_attn, self.config.heads)?;
        let routing = route(
            &unit,
            &self.domain_centroids,
            &self.slot_centroids,
            RoutePhase::Infer,
            self.config.gumbel_temperature,
            self.config.hard_infer,
            &mut RngStream::new(0),
        )?;
        Ok((seq.mean_rows().scale(self.embed_scale()), routing))
    }

    /// Folds every adapted projection into a dense weight plus one bias per prompt.
    pub fn merge(&self, bundles: &[&PromptBundle]) -> Result<ModelParams> {
        if self.is_merged() {
            return Err(Error::Contract("model is already merged".into()));
        }
        let statics = bundles
            .iter()
            .map(|b| Ok((b.key.clone(), self.static_prompt(b)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = self.clone();
        for block in &mut out.blocks {
            for proj in &mut block.attn {
                if let Projection::Adapted(layer) = proj {
                    let mut weight = None;
                    let mut bias = BTreeMap::new();
                    for (key, (x_sa, routing)) in &statics {
                        let merged = merge_for_inference(layer, x_sa, routing)?;
                        weight.get_or_insert(merged.w_merged);
                        bias.insert(key.clone(), merged.bias);
                    }
                    let weight = match weight {
                        Some(w) => w,
                        None => layer.base.add(&layer.b_ur.matmul(&layer.a_ur)?)?.scale(layer.beta()),
                    };
                    *proj = Projection::Merged { weight, bias };
                }
            }
        }
        Ok(out)
    }

    /// Central-difference check of every trainable gradient (fusion logits
    /// included) for one query, with routing noise held fixed.
    pub fn gradient_check(
        &self,
        token_ids: &[usize],
        bundle: &PromptBundle,
        target: usize,
        noise: &FrozenNoise,
        epsilon: f64,
    ) -> Result<GradReport> {
        let freeze = Freeze::default();
        let params: Vec<Matrix> = self.trainable(freeze).into_iter().map(|(_, m)| m).collect();
        grad_check(
            |tape, p| {
                let mut m = self.clone();
                m.set_trainable(freeze, &p.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>())?;
                let mut vars = m.to_tape(tape, freeze, false);
                rebind(&mut vars, p);
                let z = m.logits(tape, &vars, token_ids, bundle, &Phase::Frozen(noise.clone()), &mut RngStream::new(0))?;
                tape.cross_entropy(z, &[target])
            },
            &params,
            epsilon,
        )
    }

    /// Restores derived lookup state after deserialization.
    pub fn finish_load(&mut self) {
        self.vocab.rebuild_index();
    }
}

/// Points the tape handles at externally registered parameter nodes.
fn rebind(vars: &mut ModelVars, p: &[Var]) {
    let mut it = p.iter().copied();
    for b in &mut vars.blocks {
        for proj in &mut b.attn {
            if let ProjVars::Adapted(lv, _) = proj {
                lv.a_ur = it.next().expect("one var per trainable tensor");
                lv.b_ur = it.next().expect("one var per trainable tensor");
                for a in &mut lv.a_sa {
                    *a = it.next().expect("one var per trainable tensor");
                }
                for m in &mut lv.b_sa {
                    *m = it.next().expect("one var per trainable tensor");
                }
                lv.beta_logit = it.next().expect("one var per trainable tensor");
            }
        }
    }
    for w in &mut vars.prompt {
        *w = it.next().expect("one var per trainable tensor");
    }
    vars.head_w = it.next().expect("one var per trainable tensor");
    vars.head_b = it.next().expect("one var per trainable tensor");
    vars.params = p.to_vec();
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numkit::softmax;

    pub(crate) fn tiny_model(layers: usize, d: usize, heads: usize, strategy: InitStrategy, seed: u64) -> (ModelParams, Vec<PromptBundle>) {
        let mut rng = RngStream::new(seed);
        let words = ["i", "need", "a", "train", "taxi", "hotel", "at", "10:00", "11:00", "arriveby", "leaveat", "when"];
        let vocab = Vocab::new(words.iter().copied());
        let emb = Matrix::from_fn(vocab.len(), d, |_, _| 0.0);
        let mut emb = emb;
        for r in 0..vocab.len() {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            emb.row_mut(r).copy_from_slice(&normalize(&v).unwrap());
        }
        let dc = Matrix::from_rows(&[normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap(), normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()]).unwrap();
        let sc = Matrix::from_rows(&(0..3).map(|_| normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()).collect::<Vec<_>>()).unwrap();
        let config = EncoderConfig {
            num_layers: layers,
            hidden_dim: d,
            heads,
            ffn_dim: 2 * d,
            rank: 2,
            ..EncoderConfig::default()
        };
        let model = ModelParams::new(
            ModelInit {
                config,
                vocab: vocab.clone(),
                token_embeddings: emb.clone(),
                values: vec!["10:00".into(), "11:00".into()],
                domain_centroids: &dc,
                slot_centroids: &sc,
                strategy,
                lambda: 0.5,
                beta_logit: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        let bundle = |key: &str, toks: &[&str]| PromptBundle {
            key: key.into(),
            prompt_tokens: toks.iter().map(|s| s.to_string()).collect(),
            term_vectors: emb.select_rows(&vocab.encode(&["i", "need", "at"])),
            description_vectors: emb.select_rows(&vocab.encode(toks)),
        };
        let bundles = vec![
            bundle("train-arriveby: when", &["train", "arriveby", "when"]),
            bundle("taxi-leaveat: when", &["taxi", "leaveat", "when"]),
        ];
        (model, bundles)
    }

    #[test]
    fn zero_head_gives_uniform() {
        let (model, bundles) = tiny_model(2, 8, 2, InitStrategy::SemSvd, 1);
        let p = model.predict_slot_value(&["i", "need", "a", "train"], &bundles[0]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trainable_order_matches_tape() {
        let (model, _) = tiny_model(2, 8, 2, InitStrategy::Pissa, 2);
        for freeze in [Freeze::default(), Freeze { beta: true }] {
            let named = model.trainable(freeze);
            let mut tape = Tape::new();
            let vars = model.to_tape(&mut tape, freeze, true);
            assert_eq!(named.len(), vars.params.len());
            for ((_, m), v) in named.iter().zip(&vars.params) {
                assert_eq!(tape.value(*v), m);
            }
            let mut copy = model.clone();
            copy.set_trainable(freeze, &named.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>()).unwrap();
            assert_eq!(copy, model);
        }
    }

    #[test]
    fn prompt_attention_single_key_and_oracle() {
        let mut rng = RngStream::new(3);
        let d = 4;
        let attn = PromptAttention::identity(d);
        let desc = Matrix::random_normal(1, d, 1.0, &mut rng);
        let b = PromptBundle {
            key: "k".into(),
            prompt_tokens: vec![],
            term_vectors: Matrix::random_normal(1, d, 1.0, &mut rng),
            description_vectors: desc.clone(),
        };
        let (seq, _) = prompt_attend(&b, &attn, 2).unwrap();
        assert!(seq.max_abs_diff(&desc).unwrap() < 1e-15);

        // identical descriptions: output is that value regardless of queries
        let same = Matrix::vstack(&[desc.clone(), desc.clone(), desc.clone()]).unwrap();
        let b2 = PromptBundle {
            description_vectors: same,
            term_vectors: Matrix::random_normal(3, d, 1.0, &mut rng),
            ..b.clone()
        };
        let (seq, _) = prompt_attend(&b2, &attn, 1).unwrap();
        for r in 0..3 {
            for c in 0..d {
                assert!((seq.get(r, c) - desc.get(0, c)).abs() < 1e-14);
            }
        }

        // 3 terms × 4 descriptions, single head, random projections, direct formula
        let p = PromptAttention {
            wq: Matrix::random_normal(d, d, 0.5, &mut rng),
            wk: Matrix::random_normal(d, d, 0.5, &mut rng),
            wv: Matrix::random_normal(d, d, 0.5, &mut rng),
            wo: Matrix::random_normal(d, d, 0.5, &mut rng),
        };
        let terms = Matrix::random_normal(3, d, 1.0, &mut rng);
        let descs = Matrix::random_normal(4, d, 1.0, &mut rng);
        let b3 = PromptBundle {
            key: "k".into(),
            prompt_tokens: vec![],
            term_vectors: terms.clone(),
            description_vectors: descs.clone(),
        };
        let (seq, _) = prompt_attend(&b3, &p, 1).unwrap();
        let mut want = Matrix::zeros(3, d);
        for i in 0..3 {
            let q = p.wq.matvec(terms.row(i)).unwrap();
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    let k = p.wk.matvec(descs.row(j)).unwrap();
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores, 1.0).unwrap();
            let mut ctx = vec![0.0; d];
            for (j, wj) in w.iter().enumerate() {
                let v = p.wv.matvec(descs.row(j)).unwrap();
                for (c, vc) in ctx.iter_mut().zip(&v) {
                    *c += wj * vc;
                }
            }
            want.row_mut(i).copy_from_slice(&p.wo.matvec(&ctx).unwrap());
        }
        assert!(seq.max_abs_diff(&want).unwrap() < 1e-12);
        assert!(prompt_attend(&PromptBundle { term_vectors: Matrix::zeros(0, d), ..b3 }, &p, 1).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_permutation_equivariant() {
        let (mut model, bundles) = tiny_model(2, 8, 2, InitStrategy::SemSvd, 4);
        let ids = model.input_ids(&["i", "need", "a", "train"], &bundles[0]);
        let run = |model: &ModelParams, ids: &[usize]| {
            let mut tape = Tape::new();
            let vars = model.to_tape(&mut tape, Freeze::default(), false);
            let h = model
                .encode(&mut tape, &vars, ids, PromptFeature::Bundle(&bundles[0]), &Phase::Train, &mut RngStream::new(9))
                .unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(&model, &ids), run(&model, &ids));

        model.config.positions = false;
        let mut swapped = ids.clone();
        swapped.swap(0, 2);
        let (a, b) = (run(&model, &ids), run(&model, &swapped));
        assert!(a.row(0).iter().zip(b.row(2)).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(a.row(2).iter().zip(b.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(a.row(1).iter().zip(b.row(1)).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn overlong_sequence_rejected() {
        let (mut model, bundles) = tiny_model(1, 8, 2, InitStrategy::SemSvd, 5);
        model.config.max_seq_len = 4;
        assert!(model.infer_logits(&["i", "need", "a", "train"], &bundles[0]).is_err());
    }

    #[test]
    fn merged_model_matches_unmerged() {
        let (mut model, bundles) = tiny_model(2, 8, 2, InitStrategy::SemSvd, 6);
        let mut rng = RngStream::new(7);
        model.head_w = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let merged = model.merge(&bundles.iter().collect::<Vec<_>>()).unwrap();
        assert!(merged.is_merged());
        let words = ["i", "need", "a", "train", "taxi", "at", "10:00", "11:00"];
        for _ in 0..20 {
            let ctx: Vec<&str> = (0..5).map(|_| words[rng.index(words.len())]).collect();
            for b in &bundles {
                let u = model.infer_logits(&ctx, b).unwrap();
                let m = merged.infer_logits(&ctx, b).unwrap();
                let diff = u.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-9, "{diff}");
            }
        }
        let unknown = PromptBundle { key: "nope".into(), ..bundles[0].clone() };
        assert!(matches!(merged.infer_logits(&["i"], &unknown), Err(Error::Lookup(_))));
    }

    #[test]
    fn two_layer_gradients() {
        let (mut model, bundles) = tiny_model(2, 8, 2, InitStrategy::SemSvd, 8);
        let mut rng = RngStream::new(10);
        model.head_w = Matrix::random_normal(3, 8, 0.5, &mut rng);
        let noise = FrozenNoise {
            domain: gumbel_noise(2, &mut rng),
            slot: gumbel_noise(3, &mut rng),
        };
        let ids = model.input_ids(&["i", "need", "a", "train", "at", "10:00"], &bundles[0]);
        let report = model.gradient_check(&ids, &bundles[0], 0, &noise, 1e-5).unwrap();
        assert!(report.worst() <= 1e-4, "{:?}", report.max_rel_error);
    }

}
