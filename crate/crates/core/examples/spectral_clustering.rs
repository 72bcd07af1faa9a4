//! Spectral clustering of domain names and slot prompts with silhouette-based
//! selection of the cluster counts.

use hicolora::cluster::KRanges;
use hicolora::dstsim::{four_domain_schemas, synthetic_embeddings};
use hicolora::trainer::cluster_schemas;

fn main() -> hicolora::Result<()> {
    let schemas = four_domain_schemas();
    let table = synthetic_embeddings(&schemas, 32, 11)?;
    let clusters = cluster_schemas(&schemas, &table, KRanges::default(), 11)?;

    println!("domains: M = {}", clusters.m);
    for (key, label) in clusters.domain_keys.iter().zip(&clusters.domain_labels) {
        println!("  {label}  {key}");
    }
    println!("slot prompts: N = {}", clusters.n);
    for (key, label) in clusters.slot_keys.iter().zip(&clusters.slot_labels) {
        println!("  {label}  {key}");
    }
    println!("slot silhouette by k: {:?}", clusters.slot_silhouette);
    let manifest = clusters.to_manifest();
    println!("manifest hash {}", manifest.content_hash()?);
    Ok(())
}
