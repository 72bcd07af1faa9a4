//! Command-line surface: `gen-data`, `cluster`, `train`, `eval`, `merge`,
//! `inspect-init` and `ablate`.
//!
//! Every command is deterministic given its flags and input files. `train`
//! echoes its effective [`RunConfig`] into the output directory; passing that
//! file back via `--config` reproduces the run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, write_atomic};
use crate::cluster::{joint_cluster, ClusterManifest, KRange, KRanges};
use crate::dstsim::{builtin_schemas, generate_corpus, load_schemas, synthetic_embeddings, Corpus, SplitSpec};
use crate::embed::{load_embeddings, EmbeddingTable, ToyFallback};
use crate::error::{Error, Result};
use crate::init::semsvd_init;
use crate::model::{EncoderConfig, ModelParams};
use crate::trainer::{
    ablation_csv, build_model, evaluate, merge_gap, run_ablation_grid, save_history, score, split_corpus, Experiment,
    OraclePredictor, TaskData, TrainConfig, Variant,
};
use crate::RngStream;

/// Environment variable that overrides every seed taken from flags or config.
pub const SEED_ENV: &str = "HICOLORA_SEED";

/// Everything a training, evaluation or ablation run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub cluster_ranges: KRanges,
    pub dev_fraction: f64,
    /// Empty means every domain other than the held-out one.
    pub train_domains: Vec<String>,
    pub heldout: Option<String>,
    pub embeddings: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            cluster_ranges: KRanges::default(),
            dev_fraction: 0.1,
            train_domains: Vec::new(),
            heldout: None,
            embeddings: None,
            corpus: None,
            clusters: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("no {what} path given (flag or config)")))
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            train_domains: self.train_domains.clone(),
            heldout_domain: self
                .heldout
                .clone()
                .ok_or_else(|| Error::Config("no held-out domain given (flag or config)".into()))?,
            dev_fraction: self.dev_fraction,
        })
    }

    fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(Self::require(&self.corpus, "corpus")?)
    }

    fn load_embeddings(&self) -> Result<EmbeddingTable> {
        let table = load_embeddings(Self::require(&self.embeddings, "embeddings")?)?;
        if table.dim() != self.encoder.hidden_dim {
            return Err(Error::Config(format!(
                "embedding dim {} differs from encoder hidden_dim {}",
                table.dim(),
                self.encoder.hidden_dim
            )));
        }
        Ok(table)
    }

    fn check_heldout(&self, corpus: &Corpus) -> Result<()> {
        let spec = self.split_spec()?;
        if corpus.schema(&spec.heldout_domain).is_none() {
            return Err(Error::Config(format!(
                "held-out domain {:?} is not in the corpus (domains: {})",
                spec.heldout_domain,
                corpus.domains().join(", ")
            )));
        }
        Ok(())
    }

    fn task_data(&self, corpus: &Corpus, table: &EmbeddingTable) -> Result<(TaskData, crate::dstsim::Split)> {
        let split = split_corpus(corpus, &self.split_spec()?, self.train.seed)?;
        let data = TaskData::build(corpus, &split.train, table, self.train.prompt_terms, self.train.seed)?;
        Ok((data, split))
    }
}

#[derive(Debug, Parser)]
#[command(name = "hicolora", version, about = "Hierarchical collaborative low-rank adaptation for zero-shot dialog state tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dialog corpus (and optionally its embedding table).
    GenData(GenDataArgs),
    /// Spectrally cluster domains and slot prompts; write the cluster manifest.
    Cluster(ClusterArgs),
    /// Train on every domain except the held-out one.
    Train(TrainArgs),
    /// Report JGA / AGA of a checkpoint.
    Eval(EvalArgs),
    /// Fold adapters into dense weights plus per-prompt biases.
    Merge(MergeArgs),
    /// Dump per-layer semantic SVD factors of a freshly initialized model.
    InspectInit(InspectArgs),
    /// Run the ablation grid and write a CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Schema JSON; the built-in train/taxi/hotel schemas when omitted.
    #[arg(long)]
    pub schemas: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3407)]
    pub seed: u64,
    /// Dialogs per domain.
    #[arg(long, default_value_t = 120)]
    pub dialogs: usize,
    #[arg(long, default_value_t = 3)]
    pub turns: usize,
    /// Also write a synthetic embedding table for the schemas.
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Domain names (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    /// Slot prompt keys; repeat the flag per prompt.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    /// Take domains and prompt keys from this corpus's schemas.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run config whose `cluster_ranges` apply when `--kmin`/`--kmax` are absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kmin: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    #[arg(long, default_value_t = 3407)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by commands that read a [`RunConfig`]; flags override the file.
#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long)]
    pub heldout: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl RunArgs {
    /// The `--config` file (or defaults) with flag overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }

    /// Applies flag overrides and the seed environment override to `cfg`.
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        for (slot, v) in [
            (&mut cfg.corpus, &self.corpus),
            (&mut cfg.embeddings, &self.embeddings),
            (&mut cfg.clusters, &self.clusters),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        if self.heldout.is_some() {
            cfg.heldout = self.heldout.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.train.seed = seed_override(cfg.train.seed)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides for the configuration echoed into the checkpoint.
    #[command(flatten)]
    pub run: RunArgs,
    /// Evaluate the dev split instead of the held-out test domain.
    #[arg(long)]
    pub dev: bool,
    /// Score the gold-state predictor instead of the model.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated variants; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Applies the seed environment override, logging when it fires.
pub fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            let s = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            log::info!("{SEED_ENV} overrides seed {seed} with {s}");
            Ok(s)
        }
        Err(_) => Ok(seed),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_clusters(cfg: &RunConfig) -> Result<(ClusterManifest, String)> {
    let manifest = ClusterManifest::load(RunConfig::require(&cfg.clusters, "cluster manifest")?)?;
    let hash = manifest.content_hash()?;
    Ok((manifest, hash))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let schemas = match &args.schemas {
        Some(p) => load_schemas(p)?,
        None => builtin_schemas(),
    };
    let seed = seed_override(args.seed)?;
    let corpus = generate_corpus(&schemas, args.dialogs, args.turns, &mut RngStream::new(seed))?;
    corpus.save(&args.out)?;
    if let Some(path) = &args.embeddings_out {
        synthetic_embeddings(&schemas, args.dim, seed)?.save(path)?;
    }
    println!(
        "wrote {} dialogs over {} domains to {}",
        corpus.dialogs.len(),
        schemas.len(),
        args.out.display()
    );
    Ok(())
}

fn cluster(args: &ClusterArgs) -> Result<()> {
    let table = load_embeddings(&args.embeddings)?;
    let (mut domains, mut prompts) = (args.domains.clone(), args.prompts.clone());
    if let Some(path) = &args.corpus {
        let corpus = Corpus::load(path)?;
        domains = corpus.domains();
        prompts = corpus
            .schemas
            .iter()
            .flat_map(|s| s.slots.iter().map(move |slot| s.prompt_key(slot)))
            .collect();
    }
    let configured = match &args.config {
        Some(p) => RunConfig::load(p)?.cluster_ranges,
        None => KRanges::default(),
    };
    let range = |count: usize, fallback: Option<KRange>| -> Result<Option<KRange>> {
        if args.kmin.is_none() && args.kmax.is_none() {
            return Ok(fallback);
        }
        let default = KRange::default_for(count);
        let (min, max) = (args.kmin.unwrap_or(default.min), args.kmax.unwrap_or(default.max));
        if min > max {
            return Err(Error::Config(format!("--kmin {min} exceeds --kmax {max}")));
        }
        let capped = max.min(count.saturating_sub(1));
        if capped < max {
            log::info!("k range capped at {capped} for {count} points");
        }
        Ok(Some(KRange { min, max: capped }))
    };
    let ranges = KRanges {
        domain: range(domains.len(), configured.domain)?,
        slot: range(prompts.len(), configured.slot)?,
    };
    let seed = seed_override(args.seed)?;
    let fallback = Some(ToyFallback { dim: table.dim(), seed });
    let model = joint_cluster(&domains, &prompts, &table, fallback, ranges, &RngStream::new(seed).fork(6))?;
    let manifest = model.to_manifest();
    manifest.save(&args.out)?;
    println!("M = {}, N = {}", manifest.m, manifest.n);
    println!("silhouette: {}", serde_json::to_string(&manifest.silhouette_by_k)?);
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.run.resolve()?;
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    let out = RunConfig::require(&cfg.out, "output directory")?.clone();
    let corpus = cfg.load_corpus()?;
    cfg.check_heldout(&corpus)?;
    let table = cfg.load_embeddings()?;
    let (clusters, hash) = load_clusters(&cfg)?;
    let clusters = clusters.to_model()?;
    let (data, split) = cfg.task_data(&corpus, &table)?;
    let model = build_model(&data, &clusters, &cfg.encoder, &cfg.train)?;
    let (model, history) = crate::trainer::train(model, &data, &split, &cfg.train)?;
    let echo = serde_json::to_value(&cfg)?;
    checkpoint::save(&out.join("checkpoint"), &model, echo, Some(hash))?;
    save_history(&history, &out.join("history.json"))?;
    write_json(&out.join("config.json"), &cfg)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "epochs {}, train loss {:.4}, dev loss {}, dev jga {}, dev aga {}",
            history.epochs.len(),
            last.train_loss,
            fmt_opt(last.dev_loss),
            fmt_opt(last.dev_jga),
            fmt_opt(last.dev_aga)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Loads a checkpoint; its echoed config (or `--config`) is the base for overrides.
fn open_checkpoint(dir: &Path, run: &RunArgs) -> Result<(ModelParams, RunConfig, Option<String>)> {
    let expected = match &run.clusters {
        Some(p) => Some(ClusterManifest::load(p)?.content_hash()?),
        None => None,
    };
    let ck = checkpoint::load(dir, expected.as_deref())?;
    let base = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value(ck.config)?,
    };
    Ok((ck.params, run.apply(base)?, ck.cluster_manifest_sha256))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (model, cfg, _) = open_checkpoint(&args.checkpoint, &args.run)?;
    let corpus = cfg.load_corpus()?;
    cfg.check_heldout(&corpus)?;
    let table = cfg.load_embeddings()?;
    let (data, split) = cfg.task_data(&corpus, &table)?;
    let dialogs = if args.dev { &split.dev } else { &split.test };
    let (jga, aga, turns) = if args.oracle {
        score(&OraclePredictor, dialogs)?
    } else {
        let r = evaluate(&model, &data, dialogs, false)?;
        (r.jga, r.aga, r.turns)
    };
    println!(
        "{}",
        json!({"split": if args.dev { "dev" } else { "test" }, "jga": jga, "aga": aga, "turns": turns, "merged": model.is_merged()})
    );
    Ok(())
}

fn merge(args: &MergeArgs) -> Result<()> {
    let (model, cfg, hash) = open_checkpoint(&args.checkpoint, &args.run)?;
    let corpus = cfg.load_corpus()?;
    cfg.check_heldout(&corpus)?;
    let table = cfg.load_embeddings()?;
    let (data, split) = cfg.task_data(&corpus, &table)?;
    let merged = model.merge(&data.all_bundles())?;
    let dialogs: Vec<_> = split.test.iter().chain(&split.dev).cloned().collect();
    // Errors (exit 1) before anything is written when the gap exceeds tolerance.
    let gap = merge_gap(&model, &merged, &data, &dialogs)?;
    checkpoint::save(&args.out, &merged, serde_json::to_value(&cfg)?, hash)?;
    println!("merged {} projections; max logit gap {gap:.3e}", model.adapted_layers().count());
    Ok(())
}

fn inspect_init(args: &InspectArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let corpus = cfg.load_corpus()?;
    cfg.check_heldout(&corpus)?;
    let table = cfg.load_embeddings()?;
    let (clusters, _) = load_clusters(&cfg)?;
    let clusters = clusters.to_model()?;
    let (data, _) = cfg.task_data(&corpus, &table)?;
    let model = build_model(&data, &clusters, &cfg.encoder, &cfg.train)?;
    let mut layers = Vec::new();
    for (name, layer) in model.adapted_layers() {
        let w0 = layer.base.add(&layer.b_ur.matmul(&layer.a_ur)?)?;
        let (_, f) = semsvd_init(&w0, layer.rank(), cfg.train.lambda, &clusters.slot_centroids)?;
        layers.push(json!({
            "layer": name,
            "strategy": cfg.train.init_strategy.name(),
            "sigma_r": f.sigma_r,
            "relevance": f.relevance,
            "s_e": f.s_e,
            "residual_frobenius": f.w_res.frobenius_norm(),
        }));
    }
    let report = json!({"lambda": cfg.train.lambda, "rank": cfg.train.rank, "layers": layers});
    match &args.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
    };
    let corpus = cfg.load_corpus()?;
    cfg.check_heldout(&corpus)?;
    let (clusters, _) = load_clusters(&cfg)?;
    let experiment = Experiment {
        split: cfg.split_spec()?,
        table: cfg.load_embeddings()?,
        corpus,
        clusters: clusters.to_model()?,
        encoder: cfg.encoder.clone(),
        train: cfg.train.clone(),
    };
    let rows = run_ablation_grid(&experiment, &variants);
    write_atomic(&args.out, ablation_csv(&rows)?.as_bytes())?;
    for r in &rows {
        println!("{:<14} jga {} aga {}", r.variant, fmt_opt(r.jga), fmt_opt(r.aga));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Merge(a) => merge(a),
        Command::InspectInit(a) => inspect_init(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
