//! AdamW, the seeded training loop, evaluation and the ablation grid.
//!
//! Training targets are every `(turn, slot)` pair of the dialog's domain: the
//! encoder reads the dialog history up to that turn followed by the slot prompt
//! and classifies the slot's value (or `"none"`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{joint_cluster, random_partition_model, JointClusterModel, KRanges};
use crate::dstsim::{aga, high_freq_terms, jga, zero_shot_split, Corpus, Dialog, DomainSchema, Split, SplitSpec, State};
use crate::embed::{lookup_or_toy, EmbeddingTable, ToyFallback};
use crate::error::{Error, Result};
use crate::init::InitStrategy;
use crate::model::{EncoderConfig, Freeze, ModelInit, ModelParams, Phase, PromptBundle, Vocab, SEP_TOKEN, UNK_TOKEN};
use crate::numkit::{argmax, normalize, Matrix, RngStream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Minimum dev-loss decrease that counts as an improvement.
pub const PLATEAU_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learnable per-layer fusion logit.
    Adaptive,
    /// β pinned at 0.5.
    StaticHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub gumbel_temperature: f64,
    pub alpha: f64,
    pub rank: usize,
    pub lambda: f64,
    pub init_strategy: InitStrategy,
    pub fusion_mode: FusionMode,
    pub clustering_enabled: bool,
    pub swap_modes: bool,
    /// Number of high-frequency dialog terms used as prompt queries.
    pub prompt_terms: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            grad_accum_steps: 8,
            seed: 3407,
            epochs: 5,
            early_stop_patience: 5,
            gumbel_temperature: 1.0,
            alpha: 0.5,
            rank: 8,
            lambda: 0.5,
            init_strategy: InitStrategy::SemSvd,
            fusion_mode: FusionMode::Adaptive,
            clustering_enabled: true,
            swap_modes: false,
            prompt_terms: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.prompt_terms == 0 {
            return Err(Error::Config("batch size, accumulation steps and prompt terms must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early-stop patience must be >= 1".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn freeze(&self) -> Freeze {
        Freeze {
            beta: self.fusion_mode == FusionMode::StaticHalf,
        }
    }

    /// Encoder settings that this config owns (rank, alpha, swap, temperature).
    pub fn apply_to(&self, encoder: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            rank: self.rank,
            alpha: self.alpha,
            swap_modes: self.swap_modes,
            gumbel_temperature: self.gumbel_temperature,
            ..encoder.clone()
        }
    }
}

/// First and second moments per trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Argument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        state.v = state.m.clone();
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: params[i].shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::numerical(format!("gradient of {name}"), f64::NAN));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let (m, v, p, g) = (&mut state.m[i], &mut state.v[i], &mut params[i], &grads[i]);
        for j in 0..g.len() {
            let gj = g.data()[j];
            let mj = ADAM_BETA1 * m.data()[j] + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v.data()[j] + (1.0 - ADAM_BETA2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let pj = p.data()[j];
            let step = learning_rate * ((mj / c1) / ((vj / c2).sqrt() + ADAM_EPS) + weight_decay * pj);
            p.data_mut()[j] = pj - step;
        }
    }
    Ok(())
}

/// Everything derived from schemas and embeddings that the model consumes.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub schemas: Vec<DomainSchema>,
    pub vocab: Vocab,
    pub token_embeddings: Matrix,
    pub values: Vec<String>,
    pub terms: Vec<String>,
    /// Keyed by canonical prompt key.
    pub bundles: BTreeMap<String, PromptBundle>,
}

impl TaskData {
    /// Builds vocabulary, prompt bundles and value classes. High-frequency
    /// terms come from `train` utterances only.
    pub fn build(corpus: &Corpus, train: &[Dialog], table: &EmbeddingTable, prompt_terms: usize, seed: u64) -> Result<Self> {
        let dim = table.dim();
        let fallback = Some(ToyFallback { dim, seed });
        let utterances: Vec<&str> = train.iter().flat_map(|d| d.turns.iter().map(|t| t.utterance.as_str())).collect();
        let terms = high_freq_terms(&utterances, prompt_terms, &crate::dstsim::default_stoplist())?;

        let mut words = BTreeSet::new();
        for d in &corpus.dialogs {
            for t in &d.turns {
                words.extend(t.utterance.split_whitespace().map(str::to_string));
            }
        }
        let mut values = Vec::new();
        for s in &corpus.schemas {
            for slot in &s.slots {
                words.extend(s.prompt_tokens(slot));
                for v in &slot.values {
                    if !values.contains(v) {
                        values.push(v.clone());
                    }
                }
            }
        }
        let vocab = Vocab::new(words);
        let rows = vocab
            .tokens()
            .iter()
            .map(|t| lookup_or_toy(t, table, fallback))
            .collect::<Result<Vec<_>>>()?;
        let token_embeddings = Matrix::from_rows(&rows)?;
        let embed_tokens = |toks: &[String]| -> Result<Matrix> {
            Ok(token_embeddings.select_rows(&vocab.encode(toks)))
        };
        let term_vectors = embed_tokens(&terms)?;
        let mut bundles = BTreeMap::new();
        for s in &corpus.schemas {
            for slot in &s.slots {
                let prompt_tokens = s.prompt_tokens(slot);
                let key = s.prompt_key(slot);
                bundles.insert(
                    key.clone(),
                    PromptBundle {
                        key,
                        description_vectors: embed_tokens(&prompt_tokens)?,
                        prompt_tokens,
                        term_vectors: term_vectors.clone(),
                    },
                );
            }
        }
        debug_assert!(vocab.contains(SEP_TOKEN) && vocab.contains(UNK_TOKEN));
        Ok(Self {
            schemas: corpus.schemas.clone(),
            vocab,
            token_embeddings,
            values,
            terms,
            bundles,
        })
    }

    pub fn schema(&self, domain: &str) -> Result<&DomainSchema> {
        self.schemas
            .iter()
            .find(|s| s.name == domain)
            .ok_or_else(|| Error::Lookup(format!("no schema for domain {domain:?}")))
    }

    pub fn bundle(&self, domain: &str, slot: &str) -> Result<&PromptBundle> {
        let schema = self.schema(domain)?;
        let spec = schema
            .slot(slot)
            .ok_or_else(|| Error::Lookup(format!("domain {domain:?} has no slot {slot:?}")))?;
        let key = schema.prompt_key(spec);
        self.bundles
            .get(&key)
            .ok_or_else(|| Error::Lookup(format!("no prompt bundle for {key:?}")))
    }

    pub fn all_bundles(&self) -> Vec<&PromptBundle> {
        self.bundles.values().collect()
    }
}

/// A fresh model over `data` with routing centroids from `clusters`.
pub fn build_model(data: &TaskData, clusters: &JointClusterModel, encoder: &EncoderConfig, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut rng = RngStream::new(cfg.seed).fork(1);
    let beta_logit = 0.0;
    ModelParams::new(
        ModelInit {
            config: cfg.apply_to(encoder),
            vocab: data.vocab.clone(),
            token_embeddings: data.token_embeddings.clone(),
            values: data.values.clone(),
            domain_centroids: &clusters.domain_centroids,
            slot_centroids: &clusters.slot_centroids,
            strategy: cfg.init_strategy,
            lambda: cfg.lambda,
            beta_logit,
        },
        &mut rng,
    )
}

/// One `(dialog, turn, slot)` classification target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: Vec<String>,
    pub domain: String,
    pub slot: String,
    pub target: usize,
    /// Stable identifier used to derive per-example noise.
    pub uid: u64,
}

/// Every `(turn, slot)` target of `dialogs` in corpus order.
pub fn examples(dialogs: &[Dialog], data: &TaskData, model: &ModelParams) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in dialogs {
        let schema = data.schema(&d.domain)?;
        for (t, turn) in d.turns.iter().enumerate() {
            let context = d.history_tokens(t);
            for slot in &schema.slots {
                let gold = turn
                    .state
                    .iter()
                    .find(|(dom, s, _)| dom == &d.domain && s == &slot.name)
                    .map(|(_, _, v)| v.as_str());
                let target = match gold {
                    Some(v) => model
                        .value_vocab
                        .iter()
                        .position(|x| x == v)
                        .ok_or_else(|| Error::Lookup(format!("value {v:?} is not a known class")))?,
                    None => model.none_class(),
                };
                out.push(Example {
                    context: context.clone(),
                    domain: d.domain.clone(),
                    slot: slot.name.clone(),
                    target,
                    uid: out.len() as u64,
                });
            }
        }
    }
    Ok(out)
}

/// Summed cross-entropy and its gradients over `batch`.
pub fn batch_gradients(
    model: &ModelParams,
    data: &TaskData,
    batch: &[&Example],
    freeze: Freeze,
    phase_for: &dyn Fn(&Example) -> (Phase, RngStream),
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = crate::autograd::Tape::new();
    let vars = model.to_tape(&mut tape, freeze, true);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let bundle = data.bundle(&ex.domain, &ex.slot)?;
        let ids = model.input_ids(&ex.context, bundle);
        let (phase, mut rng) = phase_for(ex);
        let z = model.logits(&mut tape, &vars, &ids, bundle, &phase, &mut rng)?;
        losses.push(tape.cross_entropy(z, &[ex.target])?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::numerical("training loss", loss));
    }
    let mut grads = tape.backward(total)?;
    Ok((loss, vars.params.iter().map(|&v| grads.take(v)).collect()))
}

/// Mean infer-phase cross-entropy over `examples`.
pub fn mean_loss(model: &ModelParams, data: &TaskData, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let z = model.infer_logits(&ex.context, data.bundle(&ex.domain, &ex.slot)?)?;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[ex.target];
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_jga: Option<f64>,
    pub dev_aga: Option<f64>,
    /// Wall-clock seconds; kept out of the serialized history so reruns are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub early_stop_epoch: Option<usize>,
    pub optimizer_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl RunHistory {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |h: &Self| {
            let mut h = h.clone();
            h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            h
        };
        strip(self) == strip(other)
    }
}

/// Seeded training: shuffled targets, hard Gumbel routing, gradient
/// accumulation, per-epoch dev evaluation and plateau-based early stopping.
pub fn train(mut model: ModelParams, data: &TaskData, split: &Split, cfg: &TrainConfig) -> Result<(ModelParams, RunHistory)> {
    cfg.validate()?;
    let freeze = cfg.freeze();
    let train_examples = examples(&split.train, data, &model)?;
    if train_examples.is_empty() {
        return Err(Error::Config("training split has no examples".into()));
    }
    let dev_examples = examples(&split.dev, data, &model)?;
    let root = RngStream::new(cfg.seed);
    let mut order_rng = root.fork(2);
    let noise_root = root.fork(3);
    let named = model.trainable(freeze);
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut values: Vec<Matrix> = named.into_iter().map(|(_, m)| m).collect();
    let mut adam = AdamState::default();
    let mut history = RunHistory {
        epochs: Vec::new(),
        early_stop_epoch: None,
        optimizer_steps: 0,
        adam_beta1: ADAM_BETA1,
        adam_beta2: ADAM_BETA2,
        adam_eps: ADAM_EPS,
        seed: cfg.seed,
    };
    let mut best_dev = f64::INFINITY;
    let mut stale = 0usize;
    let step_examples = cfg.batch_size * cfg.grad_accum_steps;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order_rng.shuffle(&mut order);
        let epoch_noise = noise_root.fork(epoch as u64);
        let phase_for = |ex: &Example| -> (Phase, RngStream) { (Phase::Train, epoch_noise.fork(ex.uid)) };
        let mut epoch_loss = 0.0;
        for step in order.chunks(step_examples) {
            let mut acc: Option<Vec<Matrix>> = None;
            for micro in step.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = micro.iter().map(|&i| &train_examples[i]).collect();
                let (loss, grads) = batch_gradients(&model, data, &batch, freeze, &phase_for)
                    .map_err(|e| annotate(e, epoch, history.optimizer_steps))?;
                epoch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            x.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / step.len() as f64;
            let grads: Vec<Matrix> = acc.expect("nonempty step").iter().map(|g| g.scale(scale)).collect();
            adamw_step(&mut values, &grads, &names, &mut adam, cfg.learning_rate, cfg.weight_decay)
                .map_err(|e| annotate(e, epoch, history.optimizer_steps))?;
            model.set_trainable(freeze, &values)?;
            history.optimizer_steps += 1;
        }
        let train_loss = epoch_loss / train_examples.len() as f64;
        let (dev_loss, dev_jga, dev_aga) = if dev_examples.is_empty() {
            (None, None, None)
        } else {
            let loss = mean_loss(&model, data, &dev_examples)?;
            let report = evaluate(&model, data, &split.dev, false)?;
            (Some(loss), Some(report.jga), Some(report.aga))
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_jga,
            dev_aga,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, dev loss {}, dev jga {}",
            dev_loss.map_or("-".into(), |v| format!("{v:.4}")),
            dev_jga.map_or("-".into(), |v| format!("{v:.3}"))
        );
        if let Some(dl) = dev_loss {
            if dl < best_dev - PLATEAU_TOLERANCE {
                best_dev = dl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    history.early_stop_epoch = Some(epoch);
                    break;
                }
            }
        }
    }
    Ok((model, history))
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical { what, residual } => Error::Numerical {
            what: format!("{what} (epoch {epoch}, step {step})"),
            residual,
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub aga: f64,
    pub turns: usize,
    /// Largest merged-vs-unmerged logit gap, when checked.
    pub merge_gap: Option<f64>,
}

/// Anything that predicts a turn's state from the dialog so far.
pub trait StatePredictor {
    fn predict_state(&self, dialog: &Dialog, turn: usize) -> Result<State>;
}

/// Model-backed predictor: argmax class per slot of the dialog's domain.
pub struct ModelPredictor<'a> {
    pub model: &'a ModelParams,
    pub data: &'a TaskData,
}

impl StatePredictor for ModelPredictor<'_> {
    fn predict_state(&self, dialog: &Dialog, turn: usize) -> Result<State> {
        let schema = self.data.schema(&dialog.domain)?;
        let context = dialog.history_tokens(turn);
        let mut state = State::new();
        for slot in &schema.slots {
            let z = self.model.infer_logits(&context, self.data.bundle(&dialog.domain, &slot.name)?)?;
            let c = argmax(&z);
            if c != self.model.none_class() {
                state.insert((dialog.domain.clone(), slot.name.clone(), self.model.value_vocab[c].clone()));
            }
        }
        Ok(state)
    }
}

/// Predicts the gold state; an upper bound for metric plumbing.
pub struct OraclePredictor;

impl StatePredictor for OraclePredictor {
    fn predict_state(&self, dialog: &Dialog, turn: usize) -> Result<State> {
        Ok(dialog.turns[turn].state.clone())
    }
}

/// Predicts `"none"` for every slot.
pub struct NonePredictor;

impl StatePredictor for NonePredictor {
    fn predict_state(&self, _dialog: &Dialog, _turn: usize) -> Result<State> {
        Ok(State::new())
    }
}

/// JGA and AGA of any predictor over `dialogs`.
pub fn score(predictor: &dyn StatePredictor, dialogs: &[Dialog]) -> Result<(f64, f64, usize)> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for d in dialogs {
        for (t, turn) in d.turns.iter().enumerate() {
            preds.push(predictor.predict_state(d, t)?);
            golds.push(turn.state.clone());
        }
    }
    if preds.is_empty() {
        return Err(Error::Argument("evaluation split has no turns".into()));
    }
    Ok((jga(&preds, &golds)?, aga(&preds, &golds, false)?, preds.len()))
}

/// Infer-phase evaluation. With `check_merge`, the model is also merged and
/// every query's logits are compared (tolerance 1e-5) before scoring.
pub fn evaluate(model: &ModelParams, data: &TaskData, dialogs: &[Dialog], check_merge: bool) -> Result<EvalReport> {
    let merge_gap = if check_merge && !model.is_merged() {
        let merged = model.merge(&data.all_bundles())?;
        Some(merge_gap(model, &merged, data, dialogs)?)
    } else {
        None
    };
    let (jga, aga, turns) = score(&ModelPredictor { model, data }, dialogs)?;
    Ok(EvalReport {
        jga,
        aga,
        turns,
        merge_gap,
    })
}

/// Merged-vs-unmerged logit tolerance.
pub const MERGE_TOLERANCE: f64 = 1e-5;

/// Largest logit difference over every `(turn, slot)` query; errors above [`MERGE_TOLERANCE`].
pub fn merge_gap(model: &ModelParams, merged: &ModelParams, data: &TaskData, dialogs: &[Dialog]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for d in dialogs {
        let schema = data.schema(&d.domain)?;
        for t in 0..d.turns.len() {
            let context = d.history_tokens(t);
            for slot in &schema.slots {
                let b = data.bundle(&d.domain, &slot.name)?;
                let u = model.infer_logits(&context, b)?;
                let m = merged.infer_logits(&context, b)?;
                for (x, y) in u.iter().zip(&m) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    if worst > MERGE_TOLERANCE {
        return Err(Error::numerical("merged logits diverge from the unmerged model", worst));
    }
    Ok(worst)
}

/// Named single-knob changes relative to the full configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SwapHier,
    StaticFusion,
    NoCluster,
    Kaiming,
    Pissa,
    Milora,
    /// M = N = 1, no clustering, Kaiming init, static fusion.
    SingleLora,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::SwapHier,
        Variant::StaticFusion,
        Variant::NoCluster,
        Variant::Kaiming,
        Variant::Pissa,
        Variant::Milora,
        Variant::SingleLora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SwapHier => "swap_hier",
            Variant::StaticFusion => "static_fusion",
            Variant::NoCluster => "no_cluster",
            Variant::Kaiming => "kaiming",
            Variant::Pissa => "pissa",
            Variant::Milora => "milora",
            Variant::SingleLora => "single_lora",
        }
    }

    /// The training config with this variant's knob applied.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::SwapHier => cfg.swap_modes = true,
            Variant::StaticFusion => cfg.fusion_mode = FusionMode::StaticHalf,
            Variant::NoCluster => cfg.clustering_enabled = false,
            Variant::Kaiming => cfg.init_strategy = InitStrategy::KaimingZero,
            Variant::Pissa => cfg.init_strategy = InitStrategy::Pissa,
            Variant::Milora => cfg.init_strategy = InitStrategy::Milora,
            Variant::SingleLora => {
                cfg.clustering_enabled = false;
                cfg.init_strategy = InitStrategy::KaimingZero;
                cfg.fusion_mode = FusionMode::StaticHalf;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Collapses a clustering to one domain group and one slot group.
pub fn single_cluster(clusters: &JointClusterModel) -> Result<JointClusterModel> {
    let pool = |m: &Matrix| -> Result<Matrix> { Ok(Matrix::row_vector(&normalize(m.mean_rows().row(0))?)) };
    Ok(JointClusterModel {
        domain_keys: clusters.domain_keys.clone(),
        domain_labels: vec![0; clusters.domain_keys.len()],
        domain_centroids: pool(&clusters.domain_centroids)?,
        slot_keys: clusters.slot_keys.clone(),
        slot_labels: vec![0; clusters.slot_keys.len()],
        slot_centroids: pool(&clusters.slot_centroids)?,
        m: 1,
        n: 1,
        domain_silhouette: BTreeMap::new(),
        slot_silhouette: BTreeMap::new(),
    })
}

/// Joint clustering over every schema's domain name and slot prompt key.
pub fn cluster_schemas(schemas: &[DomainSchema], table: &EmbeddingTable, ranges: KRanges, seed: u64) -> Result<JointClusterModel> {
    let domains: Vec<String> = schemas.iter().map(|s| s.name.clone()).collect();
    let prompts: Vec<String> = schemas
        .iter()
        .flat_map(|s| s.slots.iter().map(move |slot| s.prompt_key(slot)))
        .collect();
    let fallback = Some(ToyFallback { dim: table.dim(), seed });
    joint_cluster(&domains, &prompts, table, fallback, ranges, &RngStream::new(seed).fork(6))
}

/// The seeded zero-shot split used by training, evaluation and merging.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec, seed: u64) -> Result<Split> {
    zero_shot_split(corpus, spec, &mut RngStream::new(seed).fork(4))
}

/// Inputs shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub corpus: Corpus,
    pub split: SplitSpec,
    pub table: EmbeddingTable,
    pub clusters: JointClusterModel,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelParams,
    pub history: RunHistory,
    pub test: EvalReport,
    pub clusters: JointClusterModel,
}

impl Experiment {
    pub fn split(&self) -> Result<Split> {
        split_corpus(&self.corpus, &self.split, self.train.seed)
    }

    pub fn task_data(&self, split: &Split) -> Result<TaskData> {
        TaskData::build(&self.corpus, &split.train, &self.table, self.train.prompt_terms, self.train.seed)
    }

    /// Cluster model actually used by `variant`.
    pub fn clusters_for(&self, variant: Variant) -> Result<JointClusterModel> {
        match variant {
            Variant::SingleLora => single_cluster(&self.clusters),
            Variant::NoCluster => {
                let fallback = Some(ToyFallback {
                    dim: self.table.dim(),
                    seed: self.train.seed,
                });
                random_partition_model(&self.clusters, &self.table, fallback, &mut RngStream::new(self.train.seed).fork(5))
            }
            _ => Ok(self.clusters.clone()),
        }
    }

    /// Trains and evaluates one variant on the held-out domain.
    pub fn run(&self, variant: Variant) -> Result<RunOutcome> {
        let cfg = variant.configure(&self.train);
        let split = self.split()?;
        let data = self.task_data(&split)?;
        let clusters = self.clusters_for(variant)?;
        let model = build_model(&data, &clusters, &self.encoder, &cfg)?;
        let (model, history) = train(model, &data, &split, &cfg)?;
        let test = evaluate(&model, &data, &split.test, false)?;
        Ok(RunOutcome {
            model,
            history,
            test,
            clusters,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub jga: Option<f64>,
    pub aga: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub error: Option<String>,
}

/// One seeded run per variant; failures are recorded and the grid continues.
pub fn run_ablation_grid(experiment: &Experiment, variants: &[Variant]) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|&v| match experiment.run(v) {
            Ok(out) => AblationRow {
                variant: v.name().into(),
                jga: Some(out.test.jga),
                aga: Some(out.test.aga),
                epochs: out.history.epochs.len(),
                seed: experiment.train.seed,
                error: None,
            },
            Err(e) => {
                log::error!("variant {} failed: {e}", v.name());
                AblationRow {
                    variant: v.name().into(),
                    jga: None,
                    aga: None,
                    epochs: 0,
                    seed: experiment.train.seed,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect()
}

/// CSV with columns `variant,jga,aga,epochs,seed,error`.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "jga", "aga", "epochs", "seed", "error"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.jga.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.aga.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.epochs.to_string(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_history(history: &RunHistory, path: &Path) -> Result<()> {
    crate::checkpoint::write_atomic(path, serde_json::to_string_pretty(history)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_fixed_point_and_first_step() {
        let names = vec!["p".to_string()];
        let mut p = vec![Matrix::from_rows(&[[1.5, -2.0]]).unwrap()];
        let mut st = AdamState::default();
        adamw_step(&mut p, &[Matrix::zeros(1, 2)], &names, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p[0].row(0), &[1.5, -2.0]);

        let mut q = vec![Matrix::scalar(1.0)];
        let mut st = AdamState::default();
        adamw_step(&mut q, &[Matrix::scalar(-3.0)], &names, &mut st, 0.01, 0.0).unwrap();
        // m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
        let want = 1.0 + 0.01 * 3.0 / (3.0 + ADAM_EPS);
        assert!((q[0].get(0, 0) - want).abs() < 1e-15);

        let mut r = vec![Matrix::scalar(2.0)];
        let mut st = AdamState::default();
        adamw_step(&mut r, &[Matrix::scalar(0.0)], &names, &mut st, 0.1, 0.01).unwrap();
        assert!((r[0].get(0, 0) - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);

        let bad = adamw_step(&mut r, &[Matrix::scalar(f64::NAN)], &names, &mut st, 0.1, 0.0);
        assert!(matches!(bad, Err(Error::Numerical { .. })));
    }

    #[test]
    fn training_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.batch_size, c.grad_accum_steps), (1e-4, 0.01, 8, 8));
        assert_eq!((c.seed, c.epochs, c.early_stop_patience, c.rank), (3407, 5, 5, 8));
        assert_eq!((c.lambda, c.alpha), (0.5, 0.5));
    }

    #[test]
    fn variants_parse_and_configure() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let base = TrainConfig::default();
        let s = Variant::SingleLora.configure(&base);
        assert_eq!(s.init_strategy, InitStrategy::KaimingZero);
        assert_eq!(s.fusion_mode, FusionMode::StaticHalf);
        assert!(!s.clustering_enabled);
        assert_eq!(Variant::Full.configure(&base), base);
    }

    #[test]
    fn ablation_csv_shape() {
        let rows = vec![
            AblationRow { variant: "full".into(), jga: Some(0.5), aga: Some(0.25), epochs: 3, seed: 1, error: None },
            AblationRow { variant: "pissa".into(), jga: None, aga: None, epochs: 0, seed: 1, error: Some("boom".into()) },
        ];
        let text = ablation_csv(&rows).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("variant,jga,aga,epochs,seed,error"));
    }
}
