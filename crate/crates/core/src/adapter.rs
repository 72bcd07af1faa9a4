//! The dual-path adapted linear layer.
//!
//! Activations are rows: an input `x` is `seq × d_in` and a weight is
//! `d_out × d_in`, so a projection is `x · Wᵀ`.
//!
//! - UniRep path: `h_ur = x·baseᵀ + (x·A_urᵀ)·B_urᵀ`
//! - SemAdapt path on the prompt feature `x_sa`, in one of two modes:
//!   heuristic grouping `base·x_sa + N·B̂·(M·Â·x_sa)` with routed mixtures `Â`, `B̂`,
//!   or full collaboration `base·x_sa + Σ_n B_n Σ_m A_m x_sa`
//! - Fusion: `β·h_ur + (1 − β)·h_sa` with `β = sigmoid(beta_logit)`
//!
//! Every forward has a plain [`Matrix`] form and a [`Tape`] form used for training.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::numkit::{argmax, cosine_similarity, gumbel_noise, gumbel_softmax_with_noise, softmax, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    HeuristicGrouping,
    FullCollaboration,
}

/// Top `ceil(alpha · num_layers)` layers collaborate fully, the rest use
/// heuristic grouping. `swap` reverses the list.
pub fn assign_layer_modes(num_layers: usize, alpha: f64, swap: bool) -> Result<Vec<LayerMode>> {
    if num_layers == 0 {
        return Err(Error::Argument("at least one layer is required".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let full = ((alpha * num_layers as f64) - 1e-12).ceil().max(0.0) as usize;
    let mut modes: Vec<LayerMode> = (0..num_layers)
        .map(|l| {
            if l >= num_layers - full.min(num_layers) {
                LayerMode::FullCollaboration
            } else {
                LayerMode::HeuristicGrouping
            }
        })
        .collect();
    if swap {
        modes.reverse();
    }
    Ok(modes)
}

/// Scalar multiplier applied to the routed product in heuristic grouping.
///
/// Reading `N·B*·M·A*` as scalar counts makes a heuristic layer with equal
/// matrices agree exactly with full collaboration.
pub fn heuristic_scale(m: usize, n: usize) -> f64 {
    (m * n) as f64
}

/// One adapted projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiCoLayerParams {
    /// Frozen `d_out × d_in` weight.
    pub base: Matrix,
    /// r × d_in
    pub a_ur: Matrix,
    /// d_out × r
    pub b_ur: Matrix,
    /// M matrices, each r × d_in
    pub a_sa: Vec<Matrix>,
    /// N matrices, each d_out × r
    pub b_sa: Vec<Matrix>,
    pub beta_logit: f64,
    pub mode: LayerMode,
    pub temperature: f64,
}

impl HiCoLayerParams {
    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    pub fn rank(&self) -> usize {
        self.a_ur.rows()
    }

    pub fn m(&self) -> usize {
        self.a_sa.len()
    }

    pub fn n(&self) -> usize {
        self.b_sa.len()
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.beta_logit)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank());
        if self.a_sa.is_empty() || self.b_sa.is_empty() {
            return Err(Error::Argument("M and N must both be at least 1".into()));
        }
        let want = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::Argument(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )))
            }
        };
        want("a_ur", &self.a_ur, (r, d_in))?;
        want("b_ur", &self.b_ur, (d_out, r))?;
        for a in &self.a_sa {
            want("a_sa", a, (r, d_in))?;
        }
        for b in &self.b_sa {
            want("b_sa", b, (d_out, r))?;
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePhase {
    Train,
    Infer,
}

/// Mixture weights over domain-side A matrices and slot-side B matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub domain_weights: Vec<f64>,
    pub slot_weights: Vec<f64>,
    pub hard: bool,
    pub phase: RoutePhase,
    /// Seed of the Gumbel noise stream, for replay.
    pub noise_seed: Option<u64>,
}

/// `cos(summary, c_j) / temperature` for every centroid row.
pub fn routing_logits(summary: &[f64], centroids: &Matrix, temperature: f64) -> Result<Vec<f64>> {
    if summary.len() != centroids.cols() {
        return Err(Error::Argument(format!(
            "routing summary has dim {}, centroids have dim {}",
            summary.len(),
            centroids.cols()
        )));
    }
    (0..centroids.rows())
        .map(|j| Ok(cosine_similarity(summary, centroids.row(j))? / temperature))
        .collect()
}

fn one_hot(n: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[hot] = 1.0;
    v
}

/// Routes a prompt summary to the clusters.
///
/// Training draws hard Gumbel-Softmax samples; inference uses a plain softmax
/// (or its argmax when `hard_infer` is set).
pub fn route(
    summary: &[f64],
    domain_centroids: &Matrix,
    slot_centroids: &Matrix,
    phase: RoutePhase,
    temperature: f64,
    hard_infer: bool,
    rng: &mut RngStream,
) -> Result<RoutingDecision> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    match phase {
        RoutePhase::Train => {
            let seed = rng.next_u64();
            let mut noise = RngStream::new(seed);
            let dn = gumbel_noise(domain_centroids.rows(), &mut noise);
            let sn = gumbel_noise(slot_centroids.rows(), &mut noise);
            let mut d = route_with_noise(summary, domain_centroids, slot_centroids, temperature, &dn, &sn, true)?;
            d.noise_seed = Some(seed);
            Ok(d)
        }
        RoutePhase::Infer => {
            let dl = routing_logits(summary, domain_centroids, temperature)?;
            let sl = routing_logits(summary, slot_centroids, temperature)?;
            let (domain_weights, slot_weights) = if hard_infer {
                (one_hot(dl.len(), argmax(&dl)), one_hot(sl.len(), argmax(&sl)))
            } else {
                (softmax(&dl, 1.0)?, softmax(&sl, 1.0)?)
            };
            Ok(RoutingDecision {
                domain_weights,
                slot_weights,
                hard: hard_infer,
                phase,
                noise_seed: None,
            })
        }
    }
}

/// Train-phase routing with caller-supplied Gumbel noise.
pub fn route_with_noise(
    summary: &[f64],
    domain_centroids: &Matrix,
    slot_centroids: &Matrix,
    temperature: f64,
    domain_noise: &[f64],
    slot_noise: &[f64],
    hard: bool,
) -> Result<RoutingDecision> {
    let dl = routing_logits(summary, domain_centroids, 1.0)?;
    let sl = routing_logits(summary, slot_centroids, 1.0)?;
    Ok(RoutingDecision {
        domain_weights: gumbel_softmax_with_noise(&dl, temperature, domain_noise, hard)?,
        slot_weights: gumbel_softmax_with_noise(&sl, temperature, slot_noise, hard)?,
        hard,
        phase: RoutePhase::Train,
        noise_seed: None,
    })
}

fn check_input(layer: &HiCoLayerParams, x: &Matrix, what: &str) -> Result<()> {
    if x.cols() != layer.d_in() {
        return Err(Error::Shape {
            op: if what == "x" { "adapter input" } else { "adapter prompt input" },
            left: x.shape(),
            right: layer.base.shape(),
        });
    }
    Ok(())
}

/// `h_ur = x·baseᵀ + (x·A_urᵀ)·B_urᵀ`, low-rank product first.
pub fn unirep_forward(layer: &HiCoLayerParams, x: &Matrix) -> Result<Matrix> {
    check_input(layer, x, "x")?;
    let low = x.matmul_nt(&layer.a_ur)?.matmul_nt(&layer.b_ur)?;
    x.matmul_nt(&layer.base)?.add(&low)
}

fn weighted_sum(mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if mats.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} routing weights for {} matrices",
            weights.len(),
            mats.len()
        )));
    }
    let mut out = Matrix::zeros(mats[0].rows(), mats[0].cols());
    for (m, &w) in mats.iter().zip(weights) {
        out.axpy(w, m)?;
    }
    Ok(out)
}

/// Heuristic grouping with routed mixtures of the A and B matrices.
pub fn semadapt_forward_low(layer: &HiCoLayerParams, x_sa: &Matrix, routing: &RoutingDecision) -> Result<Matrix> {
    if layer.mode != LayerMode::HeuristicGrouping {
        return Err(Error::Contract("heuristic forward on a full-collaboration layer".into()));
    }
    check_input(layer, x_sa, "x_sa")?;
    let a_hat = weighted_sum(&layer.a_sa, &routing.domain_weights)?;
    let b_hat = weighted_sum(&layer.b_sa, &routing.slot_weights)?;
    let low = x_sa
        .matmul_nt(&a_hat)?
        .matmul_nt(&b_hat)?
        .scale(heuristic_scale(layer.m(), layer.n()));
    x_sa.matmul_nt(&layer.base)?.add(&low)
}

/// Full collaboration: every A and every B contribute.
pub fn semadapt_forward_high(layer: &HiCoLayerParams, x_sa: &Matrix) -> Result<Matrix> {
    if layer.mode != LayerMode::FullCollaboration {
        return Err(Error::Contract("full-collaboration forward on a heuristic layer".into()));
    }
    check_input(layer, x_sa, "x_sa")?;
    let a_sum = weighted_sum(&layer.a_sa, &vec![1.0; layer.m()])?;
    let b_sum = weighted_sum(&layer.b_sa, &vec![1.0; layer.n()])?;
    let low = x_sa.matmul_nt(&a_sum)?.matmul_nt(&b_sum)?;
    x_sa.matmul_nt(&layer.base)?.add(&low)
}

/// Dispatches on the layer mode; `routing` is only read in heuristic mode.
pub fn semadapt_forward(layer: &HiCoLayerParams, x_sa: &Matrix, routing: &RoutingDecision) -> Result<Matrix> {
    match layer.mode {
        LayerMode::HeuristicGrouping => semadapt_forward_low(layer, x_sa, routing),
        LayerMode::FullCollaboration => semadapt_forward_high(layer, x_sa),
    }
}

/// `β·h_ur + (1 − β)·h_sa`; a single-row `h_sa` is broadcast over `h_ur`'s rows.
pub fn fuse(h_ur: &Matrix, h_sa: &Matrix, beta_logit: f64) -> Result<Matrix> {
    if h_ur.cols() != h_sa.cols() || (h_sa.rows() != 1 && h_sa.rows() != h_ur.rows()) {
        return Err(Error::Shape {
            op: "fuse",
            left: h_ur.shape(),
            right: h_sa.shape(),
        });
    }
    let beta = sigmoid(beta_logit);
    let mut out = h_ur.scale(beta);
    for r in 0..out.rows() {
        let src = h_sa.row(if h_sa.rows() == 1 { 0 } else { r });
        for (o, s) in out.row_mut(r).iter_mut().zip(src) {
            *o += (1.0 - beta) * s;
        }
    }
    Ok(out)
}

/// Full two-path layer output.
pub fn layer_forward(
    layer: &HiCoLayerParams,
    x: &Matrix,
    x_sa: &Matrix,
    routing: &RoutingDecision,
) -> Result<Matrix> {
    let h_ur = unirep_forward(layer, x)?;
    let h_sa = semadapt_forward(layer, x_sa, routing)?;
    fuse(&h_ur, &h_sa, layer.beta_logit)
}

/// Inference form of a layer for one static prompt feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedLayer {
    /// `β·(base + B_ur·A_ur)`
    pub w_merged: Matrix,
    /// `(1 − β)·h_sa(x_sa_static)`, one row per prompt-feature row.
    pub bias: Matrix,
}

impl MergedLayer {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let y = x.matmul_nt(&self.w_merged)?;
        if self.bias.rows() == 1 {
            y.add_row_broadcast(&self.bias)
        } else {
            y.add(&self.bias)
        }
    }
}

/// Folds the adapters into one dense weight plus a bias.
pub fn merge_for_inference(
    layer: &HiCoLayerParams,
    x_sa_static: &Matrix,
    routing_static: &RoutingDecision,
) -> Result<MergedLayer> {
    if routing_static.phase != RoutePhase::Infer {
        return Err(Error::Contract(
            "train-phase (stochastic) routing cannot be merged".into(),
        ));
    }
    let beta = layer.beta();
    let dense = layer.base.add(&layer.b_ur.matmul(&layer.a_ur)?)?;
    let h_sa = semadapt_forward(layer, x_sa_static, routing_static)?;
    Ok(MergedLayer {
        w_merged: dense.scale(beta),
        bias: h_sa.scale(1.0 - beta),
    })
}

/// Tape handles for one layer's matrices.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub base: Var,
    pub a_ur: Var,
    pub b_ur: Var,
    pub a_sa: Vec<Var>,
    pub b_sa: Vec<Var>,
    /// 1×1
    pub beta_logit: Var,
}

/// Tape handles for routing weights (1×M and 1×N rows).
#[derive(Clone, Copy, Debug)]
pub struct RoutingVars {
    pub domain: Var,
    pub slot: Var,
}

/// Gumbel noise frozen for a differentiable forward.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNoise {
    pub domain: Vec<f64>,
    pub slot: Vec<f64>,
}

/// How routing weights are formed on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum TapeRouting {
    /// Softmax of `cos / τ`; `hard` replaces it with its argmax one-hot.
    Infer { hard: bool },
    /// Gumbel-Softmax with the given noise; `hard` uses the straight-through one-hot.
    Gumbel { noise: FrozenNoise, hard: bool },
}

fn tape_route_family(tape: &mut Tape, unit_summary: Var, centroids: &Matrix, temperature: f64, noise: Option<&[f64]>, hard: bool) -> Result<Var> {
    let c = tape.constant(centroids.clone());
    let cos = tape.matmul_nt(unit_summary, c)?;
    let logits = match noise {
        Some(g) => {
            let g = tape.constant(Matrix::row_vector(g));
            tape.add(cos, g)?
        }
        None => cos,
    };
    let scaled = tape.scale(logits, 1.0 / temperature);
    let soft = tape.row_softmax(scaled);
    if hard {
        let w = tape.value(soft).row(0).to_vec();
        tape.straight_through(Matrix::row_vector(&one_hot(w.len(), argmax(&w))), soft)
    } else {
        Ok(soft)
    }
}

/// Routing on the tape from a 1×d summary node; centroid rows must be unit norm.
pub fn tape_route(
    tape: &mut Tape,
    summary: Var,
    domain_centroids: &Matrix,
    slot_centroids: &Matrix,
    temperature: f64,
    routing: &TapeRouting,
) -> Result<RoutingVars> {
    if tape.value(summary).rows() != 1 {
        return Err(Error::Argument("routing summary must be a single row".into()));
    }
    let unit = tape.normalize_rows(summary)?;
    let (dn, sn, hard) = match routing {
        TapeRouting::Infer { hard } => (None, None, *hard),
        TapeRouting::Gumbel { noise, hard } => (Some(noise.domain.as_slice()), Some(noise.slot.as_slice()), *hard),
    };
    Ok(RoutingVars {
        domain: tape_route_family(tape, unit, domain_centroids, temperature, dn, hard)?,
        slot: tape_route_family(tape, unit, slot_centroids, temperature, sn, hard)?,
    })
}

fn tape_sum(tape: &mut Tape, vars: &[Var], weights: Option<Var>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &v) in vars.iter().enumerate() {
        let term = match weights {
            Some(w) => {
                let s = tape.pick(w, 0, i)?;
                tape.mul_scalar(s, v)?
            }
            None => v,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Argument("empty adapter family".into()))
}

/// UniRep path on the tape.
pub fn tape_unirep(tape: &mut Tape, vars: &LayerVars, x: Var) -> Result<Var> {
    let xa = tape.matmul_nt(x, vars.a_ur)?;
    let low = tape.matmul_nt(xa, vars.b_ur)?;
    let frozen = tape.matmul_nt(x, vars.base)?;
    tape.add(frozen, low)
}

/// SemAdapt path on the tape; `routing` is required in heuristic mode.
pub fn tape_semadapt(
    tape: &mut Tape,
    vars: &LayerVars,
    mode: LayerMode,
    x_sa: Var,
    routing: Option<RoutingVars>,
) -> Result<Var> {
    let (a, b, scale) = match mode {
        LayerMode::HeuristicGrouping => {
            let r = routing.ok_or_else(|| Error::Contract("heuristic grouping needs routing weights".into()))?;
            let a = tape_sum(tape, &vars.a_sa, Some(r.domain))?;
            let b = tape_sum(tape, &vars.b_sa, Some(r.slot))?;
            (a, b, heuristic_scale(vars.a_sa.len(), vars.b_sa.len()))
        }
        LayerMode::FullCollaboration => (tape_sum(tape, &vars.a_sa, None)?, tape_sum(tape, &vars.b_sa, None)?, 1.0),
    };
    let xa = tape.matmul_nt(x_sa, a)?;
    let mut low = tape.matmul_nt(xa, b)?;
    if scale != 1.0 {
        low = tape.scale(low, scale);
    }
    let frozen = tape.matmul_nt(x_sa, vars.base)?;
    tape.add(frozen, low)
}

/// Fusion on the tape.
pub fn tape_fuse(tape: &mut Tape, h_ur: Var, h_sa: Var, beta_logit: Var) -> Result<Var> {
    let beta = tape.sigmoid(beta_logit);
    let rest = tape.affine(beta, -1.0, 1.0);
    let left = tape.mul_scalar(beta, h_ur)?;
    let right = tape.mul_scalar(rest, h_sa)?;
    tape.add_broadcast(left, right)
}

/// Full layer on the tape.
pub fn tape_layer_forward(
    tape: &mut Tape,
    vars: &LayerVars,
    mode: LayerMode,
    x: Var,
    x_sa: Var,
    routing: Option<RoutingVars>,
) -> Result<Var> {
    let h_ur = tape_unirep(tape, vars, x)?;
    let h_sa = tape_semadapt(tape, vars, mode, x_sa, routing)?;
    tape_fuse(tape, h_ur, h_sa, vars.beta_logit)
}

impl HiCoLayerParams {
    /// Pushes every matrix as a parameter except `base` (constant); `beta_logit` is a
    /// parameter unless `freeze_beta`.
    pub fn to_tape(&self, tape: &mut Tape, freeze_beta: bool) -> LayerVars {
        let base = tape.constant(self.base.clone());
        let a_ur = tape.param(self.a_ur.clone());
        let b_ur = tape.param(self.b_ur.clone());
        let a_sa = self.a_sa.iter().map(|m| tape.param(m.clone())).collect();
        let b_sa = self.b_sa.iter().map(|m| tape.param(m.clone())).collect();
        let beta = Matrix::scalar(self.beta_logit);
        let beta_logit = if freeze_beta { tape.constant(beta) } else { tape.param(beta) };
        LayerVars {
            base,
            a_ur,
            b_ur,
            a_sa,
            b_sa,
            beta_logit,
        }
    }

    /// Random layer for tests and examples.
    pub fn random(d_out: usize, d_in: usize, r: usize, m: usize, n: usize, mode: LayerMode, rng: &mut RngStream) -> Self {
        Self {
            base: Matrix::random_normal(d_out, d_in, 0.3, rng),
            a_ur: Matrix::random_normal(r, d_in, 0.3, rng),
            b_ur: Matrix::random_normal(d_out, r, 0.3, rng),
            a_sa: (0..m).map(|_| Matrix::random_normal(r, d_in, 0.3, rng)).collect(),
            b_sa: (0..n).map(|_| Matrix::random_normal(d_out, r, 0.3, rng)).collect(),
            beta_logit: rng.normal(),
            mode,
            temperature: 1.0,
        }
    }
}
