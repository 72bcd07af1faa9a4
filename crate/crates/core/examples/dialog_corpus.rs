//! Synthetic dialog generation, the zero-shot split, and the JGA / AGA metrics
//! with reference predictors. Pass `--schemas` to print the built-in schemas as JSON.

use hicolora::dstsim::{builtin_schemas, generate_corpus, SplitSpec};
use hicolora::trainer::{score, split_corpus, NonePredictor, OraclePredictor};
use hicolora::RngStream;

fn main() -> hicolora::Result<()> {
    let schemas = builtin_schemas();
    if std::env::args().any(|a| a == "--schemas") {
        println!("{}", serde_json::to_string_pretty(&schemas)?);
        return Ok(());
    }
    let corpus = generate_corpus(&schemas, 20, 3, &mut RngStream::new(1))?;
    for turn in &corpus.dialogs[0].turns {
        println!("user: {}", turn.utterance);
        println!("  state: {:?}", turn.state);
    }
    let split = split_corpus(
        &corpus,
        &SplitSpec { train_domains: vec![], heldout_domain: "taxi".into(), dev_fraction: 0.1 },
        1,
    )?;
    println!("train {} / dev {} / test {} dialogs", split.train.len(), split.dev.len(), split.test.len());
    let (jga, aga, turns) = score(&OraclePredictor, &split.test)?;
    println!("oracle:   jga {jga:.3} aga {aga:.3} over {turns} turns");
    let (jga, aga, _) = score(&NonePredictor, &split.test)?;
    println!("all-none: jga {jga:.3} aga {aga:.3}");
    Ok(())
}
