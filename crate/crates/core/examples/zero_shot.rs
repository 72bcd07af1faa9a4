//! Zero-shot transfer to a held-out transport domain: full model vs a single LoRA.

use hicolora::cluster::KRanges;
use hicolora::dstsim::{builtin_schemas, generate_corpus, synthetic_embeddings, SplitSpec};
use hicolora::model::EncoderConfig;
use hicolora::trainer::{cluster_schemas, Experiment, TrainConfig, Variant};
use hicolora::RngStream;

fn main() -> hicolora::Result<()> {
    env_logger::init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3407);
    let schemas = builtin_schemas();
    let dim = 32;
    let corpus = generate_corpus(&schemas, 40, 3, &mut RngStream::new(seed))?;
    let table = synthetic_embeddings(&schemas, dim, seed)?;
    let clusters = cluster_schemas(&schemas, &table, KRanges::default(), seed)?;
    println!("clusters: M = {}, N = {}", clusters.m, clusters.n);
    let experiment = Experiment {
        corpus,
        split: SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        table,
        clusters,
        encoder: EncoderConfig { num_layers: 2, hidden_dim: dim, heads: 4, ffn_dim: 64, ..EncoderConfig::default() },
        train: TrainConfig { learning_rate: 3e-3, grad_accum_steps: 1, epochs: 6, rank: 4, seed, ..TrainConfig::default() },
    };
    for v in [Variant::Full, Variant::SingleLora] {
        let t = std::time::Instant::now();
        let out = experiment.run(v)?;
        println!(
            "{:<12} test jga {:.3} aga {:.3} ({} epochs, {:.1}s) losses {:?}",
            v.name(),
            out.test.jga,
            out.test.aga,
            out.history.epochs.len(),
            t.elapsed().as_secs_f64(),
            out.history.epochs.iter().map(|e| (e.train_loss * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}
