//! Embedding tables for domain names, slot prompts and dialog words.
//!
//! Tables come either from a JSON file (`{"dim": n, "entries": {"key": [..]}}`)
//! or from [`toy_embed`], a deterministic hashed bag-of-words embedder. Every
//! vector leaving this module has unit L2 norm.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{l2_norm, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Toy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
    provenance: Provenance,
}

/// Settings for embedding keys missing from a table.
#[derive(Clone, Copy, Debug)]
pub struct ToyFallback {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
            provenance,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Stores `vector` under `key` after normalization; returns the previous vector, if any.
    pub fn insert(&mut self, key: impl Into<String>, vector: &[f64]) -> Result<Option<Vec<f64>>> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(Error::Format(format!(
                "entry {key:?} has dimension {} but the table has {}",
                vector.len(),
                self.dim
            )));
        }
        let unit = unit_preserving(vector)
            .ok_or_else(|| Error::Format(format!("entry {key:?} is not a finite nonzero vector")))?;
        Ok(self.entries.insert(key, unit))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawTable = serde_json::from_str(text)?;
        if raw.dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        let mut table = Self::new(raw.dim, Provenance::File);
        for (key, vector) in raw.entries.0 {
            if table.insert(key.clone(), &vector)?.is_some() {
                log::warn!("duplicate embedding key {key:?}; keeping the last occurrence");
            }
        }
        Ok(table)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let out = OutTable {
            dim: self.dim,
            entries: &self.entries,
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_atomic(path.as_ref(), self.to_json_string()?.as_bytes())
    }
}

/// Reads an embedding file; all vectors are L2-normalized on load.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_json_str(&text)
}

/// Unit vector in the direction of `v`; vectors already unit to rounding are kept bit-for-bit.
fn unit_preserving(v: &[f64]) -> Option<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Some(v.to_vec());
    }
    Some(v.iter().map(|x| x / norm).collect())
}

#[derive(Deserialize)]
struct RawTable {
    dim: usize,
    entries: OrderedEntries,
}

#[derive(Serialize)]
struct OutTable<'a> {
    dim: usize,
    entries: &'a BTreeMap<String, Vec<f64>>,
}

/// Map entries in file order, duplicates included.
struct OrderedEntries(Vec<(String, Vec<f64>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map from keys to float arrays")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Seeded pseudo-random unit vector for a single token.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = RngStream::new(u64::from_le_bytes(bytes) ^ seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Some(unit) = unit_preserving(&v) {
            return unit;
        }
    }
}

/// Deterministic bag-of-words embedding: the normalized mean of per-token
/// hashed unit vectors over whitespace tokens.
pub fn toy_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::Argument(format!("toy embedding dim must be >= 2, got {dim}")));
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Argument("toy_embed of empty text".into()));
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, x) in acc.iter_mut().zip(token_vector(t, dim, seed)) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
    unit_preserving(&acc)
        .ok_or_else(|| Error::numerical("toy_embed produced a zero mean vector", 0.0))
}

/// The canonical `"domain-slot: question"` prompt string.
pub fn canonical_prompt_key(domain: &str, slot: &str, question: &str) -> String {
    format!("{domain}-{slot}: {question}")
}

/// Embedding of a slot prompt: exact-key lookup, then the toy fallback when configured.
pub fn embed_prompt(
    domain: &str,
    slot: &str,
    question: &str,
    table: &EmbeddingTable,
    fallback: Option<ToyFallback>,
) -> Result<Vec<f64>> {
    let key = canonical_prompt_key(domain, slot, question);
    lookup_or_toy(&key, table, fallback)
}

/// Exact lookup of `key`, falling back to `toy_embed(key)` when enabled.
pub fn lookup_or_toy(key: &str, table: &EmbeddingTable, fallback: Option<ToyFallback>) -> Result<Vec<f64>> {
    if let Some(v) = table.get(key) {
        return Ok(v.to_vec());
    }
    match fallback {
        Some(fb) => toy_embed(key, fb.dim, fb.seed),
        None => Err(Error::Lookup(format!("no embedding for {key:?}"))),
    }
}

/// Truncates or zero-pads `v` to `dim` entries and renormalizes.
pub fn truncate_or_pad(v: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = v.iter().copied().take(dim).collect();
    out.resize(dim, 0.0);
    unit_preserving(&out)
        .ok_or_else(|| Error::Argument("truncation left a zero vector".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cosine_similarity;

    #[test]
    fn unit_entry_kept() {
        let t = EmbeddingTable::from_json_str(r#"{"dim": 2, "entries": {"taxi": [0, 1]}}"#).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.get("taxi").unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn three_four_five() {
        let t = EmbeddingTable::from_json_str(r#"{"dim": 2, "entries": {"x": [3, 4]}}"#).unwrap();
        let v = t.get("x").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_and_duplicates() {
        let t = EmbeddingTable::from_json_str(r#"{"dim": 3, "entries": {}}"#).unwrap();
        assert!(t.is_empty());
        let t = EmbeddingTable::from_json_str(r#"{"dim": 2, "entries": {"a": [1, 0], "a": [0, 2]}}"#)
            .unwrap();
        assert_eq!(t.get("a").unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn inconsistent_dimension_names_key() {
        let err = EmbeddingTable::from_json_str(r#"{"dim": 2, "entries": {"ok": [1, 0], "bad": [1, 2, 3]}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("bad")), "{err}");
    }

    #[test]
    fn toy_embed_properties() {
        let a = toy_embed("arrive by time", 16, 3407).unwrap();
        assert_eq!(a, toy_embed("arrive by time", 16, 3407).unwrap());
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        let single = toy_embed("time", 16, 3407).unwrap();
        assert_eq!(single, token_vector("time", 16, 3407));
        assert!(toy_embed("   ", 16, 1).is_err());
        assert!(toy_embed("x", 1, 1).is_err());
    }

    #[test]
    fn shared_token_raises_similarity() {
        let dim = 64;
        let shared = cosine_similarity(
            &toy_embed("arrive by time", dim, 3407).unwrap(),
            &toy_embed("arriveby time arrival", dim, 3407).unwrap(),
        )
        .unwrap();
        let disjoint = cosine_similarity(
            &toy_embed("arrive by time", dim, 3407).unwrap(),
            &toy_embed("hotel stars parking", dim, 3407).unwrap(),
        )
        .unwrap();
        assert!(shared > disjoint, "{shared} vs {disjoint}");
    }

    #[test]
    fn prompt_key_lookup_and_fallback() {
        let key = canonical_prompt_key(
            "train",
            "arriveby",
            "what is the arrival time of the train the user is interested in?",
        );
        assert_eq!(
            key,
            "train-arriveby: what is the arrival time of the train the user is interested in?"
        );
        let mut t = EmbeddingTable::new(2, Provenance::File);
        t.insert(key.clone(), &[1.0, 0.0]).unwrap();
        let q = "what is the arrival time of the train the user is interested in?";
        assert_eq!(embed_prompt("train", "arriveby", q, &t, None).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            embed_prompt("taxi", "arriveby", q, &t, None),
            Err(Error::Lookup(_))
        ));
        let fb = ToyFallback { dim: 2, seed: 9 };
        let v = embed_prompt("taxi", "arriveby", q, &t, Some(fb)).unwrap();
        assert_eq!(v, toy_embed(&canonical_prompt_key("taxi", "arriveby", q), 2, 9).unwrap());
    }

    #[test]
    fn truncate_and_pad() {
        assert_eq!(truncate_or_pad(&[0.0, 3.0, 4.0], 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(truncate_or_pad(&[1.0], 3).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn serialization_round_trips_bitwise(values in proptest::collection::vec(-10.0f64..10.0, 1..6)) {
            proptest::prop_assume!(l2_norm(&values) > 1e-3);
            let mut t = EmbeddingTable::new(values.len(), Provenance::File);
            t.insert("k", &values).unwrap();
            let text = t.to_json_string().unwrap();
            let back = EmbeddingTable::from_json_str(&text).unwrap();
            proptest::prop_assert_eq!(back.get("k").unwrap(), t.get("k").unwrap());
            proptest::prop_assert!((l2_norm(back.get("k").unwrap()) - 1.0).abs() < 1e-12);
        }
    }
}
