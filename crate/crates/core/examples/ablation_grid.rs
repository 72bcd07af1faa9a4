//! Runs the ablation grid on a synthetic corpus with one held-out transport
//! domain and prints the resulting CSV. Pass variant names to run a subset.

use hicolora::dstsim::{builtin_schemas, generate_corpus, synthetic_embeddings, SplitSpec};
use hicolora::model::EncoderConfig;
use hicolora::trainer::{ablation_csv, cluster_schemas, run_ablation_grid, Experiment, TrainConfig, Variant};
use hicolora::RngStream;

fn main() -> hicolora::Result<()> {
    env_logger::init();
    let variants: Vec<Variant> = match std::env::args().skip(1).collect::<Vec<_>>() {
        names if names.is_empty() => Variant::ALL.to_vec(),
        names => names.iter().map(|n| n.parse()).collect::<hicolora::Result<_>>()?,
    };
    let seed = 3407;
    let schemas = builtin_schemas();
    let table = synthetic_embeddings(&schemas, 32, seed)?;
    let experiment = Experiment {
        corpus: generate_corpus(&schemas, 60, 3, &mut RngStream::new(seed))?,
        split: SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        clusters: cluster_schemas(&schemas, &table, Default::default(), seed)?,
        table,
        encoder: EncoderConfig { num_layers: 2, ..Default::default() },
        train: TrainConfig { learning_rate: 3e-3, grad_accum_steps: 1, epochs: 8, rank: 4, seed, ..Default::default() },
    };
    let rows = run_ablation_grid(&experiment, &variants);
    print!("{}", ablation_csv(&rows)?);
    Ok(())
}
