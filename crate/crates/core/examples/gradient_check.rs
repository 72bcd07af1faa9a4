//! Reverse-mode gradients of a small two-layer encoder checked against
//! central differences, with the routing noise held fixed.

use hicolora::adapter::FrozenNoise;
use hicolora::dstsim::{builtin_schemas, generate_corpus, synthetic_embeddings, SplitSpec};
use hicolora::model::EncoderConfig;
use hicolora::numkit::gumbel_noise;
use hicolora::trainer::{build_model, cluster_schemas, split_corpus, TaskData, TrainConfig};
use hicolora::{Matrix, RngStream};

fn main() -> hicolora::Result<()> {
    let schemas = builtin_schemas();
    let dim = 8;
    let corpus = generate_corpus(&schemas, 4, 2, &mut RngStream::new(2))?;
    let table = synthetic_embeddings(&schemas, dim, 2)?;
    let clusters = cluster_schemas(&schemas, &table, Default::default(), 2)?;
    let split = split_corpus(
        &corpus,
        &SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.0 },
        2,
    )?;
    let data = TaskData::build(&corpus, &split.train, &table, 3, 2)?;
    let encoder = EncoderConfig { num_layers: 2, hidden_dim: dim, heads: 2, ffn_dim: 16, ..Default::default() };
    let cfg = TrainConfig { rank: 2, ..Default::default() };
    let mut model = build_model(&data, &clusters, &encoder, &cfg)?;
    // A nonzero head so every upstream gradient is nonzero.
    let mut rng = RngStream::new(3);
    model.head_w = Matrix::random_normal(model.num_classes(), dim, 0.5, &mut rng);

    let dialog = &split.train[0];
    let bundle = data.bundle(&dialog.domain, &data.schema(&dialog.domain)?.slots[0].name)?;
    let ids = model.input_ids(&dialog.history_tokens(0), bundle);
    let noise = FrozenNoise {
        domain: gumbel_noise(clusters.m, &mut rng),
        slot: gumbel_noise(clusters.n, &mut rng),
    };
    let report = model.gradient_check(&ids, bundle, 0, &noise, 1e-5)?;
    let names = model.trainable(Default::default());
    for ((name, _), err) in names.iter().zip(&report.max_rel_error) {
        println!("{name:<28} {err:.2e}");
    }
    println!("worst relative error {:.2e}", report.worst());
    Ok(())
}
