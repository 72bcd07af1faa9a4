//! Train briefly, save a float32 checkpoint, reload it, fold the adapters into
//! dense weights plus per-prompt biases, and confirm the logits agree.

use hicolora::checkpoint;
use hicolora::dstsim::{builtin_schemas, generate_corpus, synthetic_embeddings, SplitSpec};
use hicolora::model::EncoderConfig;
use hicolora::trainer::{build_model, cluster_schemas, evaluate, merge_gap, split_corpus, train, TaskData, TrainConfig};
use hicolora::RngStream;

fn main() -> hicolora::Result<()> {
    let schemas = builtin_schemas();
    let corpus = generate_corpus(&schemas, 12, 3, &mut RngStream::new(4))?;
    let table = synthetic_embeddings(&schemas, 32, 4)?;
    let clusters = cluster_schemas(&schemas, &table, Default::default(), 4)?;
    let cfg = TrainConfig { epochs: 2, learning_rate: 3e-3, grad_accum_steps: 1, rank: 4, seed: 4, ..Default::default() };
    let split = split_corpus(
        &corpus,
        &SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        cfg.seed,
    )?;
    let data = TaskData::build(&corpus, &split.train, &table, cfg.prompt_terms, cfg.seed)?;
    let encoder = EncoderConfig { num_layers: 2, ..Default::default() };
    let (model, history) = train(build_model(&data, &clusters, &encoder, &cfg)?, &data, &split, &cfg)?;
    println!("trained {} epochs, {} optimizer steps", history.epochs.len(), history.optimizer_steps);

    let dir = std::env::temp_dir().join("hicolora-checkpoint-example");
    let manifest = checkpoint::save(&dir, &model, serde_json::to_value(&cfg)?, None)?;
    println!("saved {} tensors to {} (blob sha256 {})", manifest.tensors.len(), dir.display(), &manifest.blob_sha256[..16]);
    let loaded = checkpoint::load(&dir, None)?.params;

    let merged = loaded.merge(&data.all_bundles())?;
    let gap = merge_gap(&loaded, &merged, &data, &split.test)?;
    println!("merged vs unmerged max logit gap {gap:.2e}");
    let a = evaluate(&loaded, &data, &split.test, false)?;
    let b = evaluate(&merged, &data, &split.test, false)?;
    println!("unmerged jga {:.3} aga {:.3}; merged jga {:.3} aga {:.3}", a.jga, a.aga, b.jga, b.aga);
    Ok(())
}
