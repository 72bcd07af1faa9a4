//! Synthetic multi-domain dialogs, zero-shot splits, high-frequency terms and
//! the JGA / AGA metrics.
//!
//! A dialog's gold state is cumulative: every turn adds one to three new
//! `(domain, slot, value)` triples, each mentioned verbatim in that turn's
//! utterance. Slots that share a `shared_group` across domains share a value
//! vocabulary, which is what zero-shot transfer relies on.
//!
//! AGA follows the per-turn formula `(|gold ∩ pred| − |slot names in pred∖gold|) / |gold|`
//! without clamping, so it can be negative.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{canonical_prompt_key, token_vector, EmbeddingTable, Provenance};
use crate::error::{Error, Result};
use crate::numkit::{normalize, RngStream};

/// `(domain, slot, value)`.
pub type Triple = (String, String, String);
pub type State = BTreeSet<Triple>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    /// Natural-language slot description used in the prompt.
    pub question: String,
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_group: Option<String>,
    /// Utterance phrase with a `{value}` placeholder, e.g. `"arriving by {value}"`.
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    /// Coarse service category (e.g. transport, venue); shapes the synthetic lexicon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub slots: Vec<SlotSpec>,
}

impl DomainSchema {
    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn prompt_key(&self, slot: &SlotSpec) -> String {
        canonical_prompt_key(&self.name, &slot.name, &slot.question)
    }

    /// Encoder-side prompt tokens: domain, slot name, question words.
    pub fn prompt_tokens(&self, slot: &SlotSpec) -> Vec<String> {
        let mut t = vec![self.name.clone(), slot.name.clone()];
        t.extend(slot.question.split_whitespace().map(str::to_string));
        t
    }
}

/// Checks value vocabularies, templates and shared-group consistency.
pub fn validate_schemas(schemas: &[DomainSchema]) -> Result<()> {
    let mut groups: BTreeMap<&str, (&str, &Vec<String>)> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for s in schemas {
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate domain {:?}", s.name)));
        }
        if s.slots.is_empty() {
            return Err(Error::Config(format!("domain {:?} has no slots", s.name)));
        }
        for slot in &s.slots {
            if slot.values.is_empty() {
                return Err(Error::Config(format!(
                    "slot {}-{} has an empty value vocabulary",
                    s.name, slot.name
                )));
            }
            if !slot.template.contains("{value}") {
                return Err(Error::Config(format!(
                    "template of {}-{} lacks a {{value}} placeholder",
                    s.name, slot.name
                )));
            }
            if slot.values.iter().any(|v| v == crate::model::NONE_VALUE) {
                return Err(Error::Config(format!(
                    "slot {}-{} uses the reserved value \"none\"",
                    s.name, slot.name
                )));
            }
            if let Some(g) = &slot.shared_group {
                match groups.get(g.as_str()) {
                    Some((owner, vals)) if *vals != &slot.values => {
                        return Err(Error::Config(format!(
                            "shared group {g:?}: {}-{} differs from the vocabulary declared by {owner}",
                            s.name, slot.name
                        )));
                    }
                    Some(_) => {}
                    None => {
                        groups.insert(g, (s.name.as_str(), &slot.values));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub utterance: String,
    pub state: State,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub domain: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Whitespace tokens of utterances `0..=turn`.
    pub fn history_tokens(&self, turn: usize) -> Vec<String> {
        self.turns[..=turn]
            .iter()
            .flat_map(|t| t.utterance.split_whitespace().map(str::to_string))
            .collect()
    }

    /// Cumulative states and verbatim value mentions.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = State::new();
        let mut history = String::new();
        for (i, t) in self.turns.iter().enumerate() {
            if !t.state.is_superset(&prev) {
                return Err(Error::Format(format!(
                    "dialog {} turn {i}: state is not cumulative",
                    self.id
                )));
            }
            history.push(' ');
            history.push_str(&t.utterance);
            let words: BTreeSet<&str> = history.split_whitespace().collect();
            for (_, _, v) in &t.state {
                let present = if v.contains(' ') { history.contains(v.as_str()) } else { words.contains(v.as_str()) };
                if !present {
                    return Err(Error::Format(format!(
                        "dialog {} turn {i}: value {v:?} not mentioned so far",
                        self.id
                    )));
                }
            }
            prev = t.state.clone();
        }
        Ok(())
    }
}

/// Corpus file contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub schemas: Vec<DomainSchema>,
    pub dialogs: Vec<Dialog>,
}

impl Corpus {
    pub fn schema(&self, domain: &str) -> Option<&DomainSchema> {
        self.schemas.iter().find(|s| s.name == domain)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a corpus (schemas, cumulative states, value mentions).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let corpus: Corpus = serde_json::from_str(text)?;
        validate_schemas(&corpus.schemas)?;
        for d in &corpus.dialogs {
            if corpus.schema(&d.domain).is_none() {
                return Err(Error::Format(format!(
                    "dialog {} references unknown domain {:?}",
                    d.id, d.domain
                )));
            }
            d.check_invariants()?;
        }
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_json_string()?.as_bytes())
    }

    pub fn domains(&self) -> Vec<String> {
        self.schemas.iter().map(|s| s.name.clone()).collect()
    }
}

const OPENERS: [&str; 4] = [
    "i need a {domain}",
    "i am looking for a {domain}",
    "please find me a {domain}",
    "can you book a {domain}",
];
const FOLLOW_UPS: [&str; 4] = ["also", "and", "it should be", "i would like it"];

fn fill(template: &str, value: &str) -> String {
    template.replace("{value}", value)
}

/// Template-generated dialogs; each turn adds one to three unseen slots.
pub fn generate_corpus(
    schemas: &[DomainSchema],
    dialogs_per_domain: usize,
    turns_per_dialog: usize,
    rng: &mut RngStream,
) -> Result<Corpus> {
    if schemas.len() < 2 {
        return Err(Error::Config(format!(
            "at least two domain schemas are required, got {}",
            schemas.len()
        )));
    }
    if turns_per_dialog == 0 {
        return Err(Error::Config("turns per dialog must be at least 1".into()));
    }
    validate_schemas(schemas)?;
    let mut dialogs = Vec::new();
    for schema in schemas {
        for i in 0..dialogs_per_domain {
            let mut order: Vec<usize> = (0..schema.slots.len()).collect();
            rng.shuffle(&mut order);
            let mut remaining = order.into_iter();
            let mut state = State::new();
            let mut turns = Vec::with_capacity(turns_per_dialog);
            for t in 0..turns_per_dialog {
                let take = 1 + rng.index(3);
                let chosen: Vec<usize> = remaining.by_ref().take(take).collect();
                let mut phrases = Vec::new();
                for &s in &chosen {
                    let slot = &schema.slots[s];
                    let value = &slot.values[rng.index(slot.values.len())];
                    phrases.push(fill(&slot.template, value));
                    state.insert((schema.name.clone(), slot.name.clone(), value.clone()));
                }
                let lead = if t == 0 {
                    OPENERS[rng.index(OPENERS.len())].replace("{domain}", &schema.name)
                } else if phrases.is_empty() {
                    "thank you".to_string()
                } else {
                    FOLLOW_UPS[rng.index(FOLLOW_UPS.len())].to_string()
                };
                let utterance = if phrases.is_empty() {
                    lead
                } else {
                    format!("{lead} {}", phrases.join(" and "))
                };
                turns.push(Turn {
                    utterance,
                    state: state.clone(),
                });
            }
            dialogs.push(Dialog {
                id: format!("{}-{i:04}", schema.name),
                domain: schema.name.clone(),
                turns,
            });
        }
    }
    Ok(Corpus {
        schemas: schemas.to_vec(),
        dialogs,
    })
}

/// Function words excluded from high-frequency terms by default.
pub fn default_stoplist() -> BTreeSet<String> {
    ["i", "a", "an", "the", "and", "it", "me", "you", "am", "be", "for", "to", "of", "please", "can", "would"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// The `top_k` most frequent whitespace tokens outside `stoplist`; ties break lexicographically.
pub fn high_freq_terms<S: AsRef<str>>(utterances: &[S], top_k: usize, stoplist: &BTreeSet<String>) -> Result<Vec<String>> {
    if top_k == 0 {
        return Err(Error::Argument("top_k must be at least 1".into()));
    }
    if utterances.is_empty() {
        return Err(Error::Argument("no utterances to count".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for u in utterances {
        for tok in u.as_ref().split_whitespace() {
            if !stoplist.contains(tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(top_k).map(|(t, _)| t.to_string()).collect())
}

fn check_lengths(preds: &[State], golds: &[State]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "{} predicted turns vs {} gold turns",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("no turns to score".into()));
    }
    Ok(())
}

/// Joint goal accuracy: fraction of turns whose predicted state equals the gold state.
pub fn jga(preds: &[State], golds: &[State]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-turn AGA term; `None` when the gold state is empty.
pub fn aga_turn(pred: &State, gold: &State) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let correct = pred.intersection(gold).count() as f64;
    let wrong_slots: BTreeSet<(&str, &str)> = pred
        .difference(gold)
        .map(|(d, s, _)| (d.as_str(), s.as_str()))
        .collect();
    Some((correct - wrong_slots.len() as f64) / gold.len() as f64)
}

/// Average goal accuracy. Empty gold turns are an error unless `skip_empty_gold`.
pub fn aga(preds: &[State], golds: &[State], skip_empty_gold: bool) -> Result<f64> {
    check_lengths(preds, golds)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        match aga_turn(p, g) {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None if skip_empty_gold => log::warn!("AGA: skipping turn {i} with empty gold state"),
            None => {
                return Err(Error::UndefinedMetric(format!(
                    "AGA divides by the gold state size, which is 0 at turn {i}"
                )))
            }
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric("every gold state is empty".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Domains allowed in train/dev; empty means every domain except the held-out one.
    pub train_domains: Vec<String>,
    pub heldout_domain: String,
    pub dev_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Held-out domain dialogs form the test set; the rest are shuffled into train and dev.
pub fn zero_shot_split(corpus: &Corpus, spec: &SplitSpec, rng: &mut RngStream) -> Result<Split> {
    if !(0.0..1.0).contains(&spec.dev_fraction) {
        return Err(Error::Config(format!(
            "dev fraction {} outside [0, 1)",
            spec.dev_fraction
        )));
    }
    if spec.train_domains.contains(&spec.heldout_domain) {
        return Err(Error::Config(format!(
            "held-out domain {:?} is also a training domain",
            spec.heldout_domain
        )));
    }
    let test: Vec<Dialog> = corpus
        .dialogs
        .iter()
        .filter(|d| d.domain == spec.heldout_domain)
        .cloned()
        .collect();
    if test.is_empty() {
        return Err(Error::Config(format!(
            "held-out domain {:?} has no dialogs in the corpus",
            spec.heldout_domain
        )));
    }
    let mut rest: Vec<Dialog> = corpus
        .dialogs
        .iter()
        .filter(|d| {
            d.domain != spec.heldout_domain
                && (spec.train_domains.is_empty() || spec.train_domains.contains(&d.domain))
        })
        .cloned()
        .collect();
    rng.shuffle(&mut rest);
    let n_dev = (rest.len() as f64 * spec.dev_fraction).round() as usize;
    if n_dev == 0 {
        log::warn!("zero-shot split has an empty dev set");
    }
    let train = rest.split_off(n_dev);
    let split = Split {
        train,
        dev: rest,
        test,
    };
    if split
        .train
        .iter()
        .chain(&split.dev)
        .any(|d| d.domain == spec.heldout_domain)
    {
        return Err(Error::Contract("held-out dialogs leaked into train/dev".into()));
    }
    Ok(split)
}

/// Synthetic lexicon standing in for pretrained text embeddings.
///
/// Domains of one category share a category direction; values of one
/// shared group share a group direction; every other token gets an
/// independent hashed vector. Prompt keys embed as the normalized mean of
/// their prompt tokens.
pub fn synthetic_embeddings(schemas: &[DomainSchema], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim, Provenance::Toy);
    let mix = |anchor: &[f64], own: &[f64], w: f64| -> Result<Vec<f64>> {
        let v: Vec<f64> = anchor.iter().zip(own).map(|(a, o)| w * a + o).collect();
        normalize(&v)
    };
    let mut fixed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in schemas {
        let own = token_vector(&s.name, dim, seed);
        let v = match &s.category {
            Some(c) => mix(&token_vector(&format!("category:{c}"), dim, seed), &own, 1.5)?,
            None => own,
        };
        fixed.insert(s.name.clone(), v);
        for slot in &s.slots {
            let group = slot
                .shared_group
                .clone()
                .unwrap_or_else(|| format!("{}-{}", s.name, slot.name));
            let anchor = token_vector(&format!("group:{group}"), dim, seed);
            for value in &slot.values {
                for tok in value.split_whitespace() {
                    fixed
                        .entry(tok.to_string())
                        .or_insert(mix(&anchor, &token_vector(tok, dim, seed), 0.8)?);
                }
            }
        }
    }
    let lookup = |tok: &str| fixed.get(tok).cloned().unwrap_or_else(|| token_vector(tok, dim, seed));
    let mut words = BTreeSet::new();
    for s in schemas {
        for slot in &s.slots {
            words.extend(s.prompt_tokens(slot));
            words.extend(slot.template.split_whitespace().filter(|t| *t != "{value}").map(str::to_string));
        }
    }
    for template in OPENERS.iter().chain(FOLLOW_UPS.iter()).chain(["thank you"].iter()) {
        words.extend(template.split_whitespace().filter(|t| *t != "{domain}").map(str::to_string));
    }
    words.extend(fixed.keys().cloned());
    for w in &words {
        table.insert(w.clone(), &lookup(w))?;
    }
    for s in schemas {
        for slot in &s.slots {
            let toks = s.prompt_tokens(slot);
            let mut acc = vec![0.0; dim];
            for t in &toks {
                for (a, x) in acc.iter_mut().zip(lookup(t)) {
                    *a += x;
                }
            }
            table.insert(s.prompt_key(slot), &normalize(&acc)?)?;
        }
    }
    Ok(table)
}

fn slot(name: &str, question: &str, template: &str, group: Option<&str>, values: &[&str]) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        question: question.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
        shared_group: group.map(str::to_string),
        template: template.into(),
    }
}

const ARRIVE_TIMES: [&str; 8] = ["09:15", "10:30", "11:45", "13:00", "14:15", "15:30", "16:45", "18:00"];
const LEAVE_TIMES: [&str; 8] = ["08:00", "09:30", "10:45", "12:00", "13:15", "14:30", "17:00", "19:15"];
const DESTINATIONS: [&str; 6] = ["cambridge", "london", "ely", "norwich", "stevenage", "peterborough"];
const DEPARTURES: [&str; 6] = ["leicester", "stansted", "broxbourne", "birmingham", "ipswich", "kettering"];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];

fn transport(name: &str, extra: Vec<SlotSpec>) -> DomainSchema {
    let mut slots = vec![
        slot(
            "arriveby",
            &format!("what is the arrival time of the {name} the user is interested in"),
            "arriving by {value}",
            Some("arriveby"),
            &ARRIVE_TIMES,
        ),
        slot(
            "leaveat",
            &format!("what is the departure time of the {name} the user wants"),
            "leaving at {value}",
            Some("leaveat"),
            &LEAVE_TIMES,
        ),
        slot(
            "destination",
            &format!("where is the {name} going to"),
            "going to {value}",
            Some("destination"),
            &DESTINATIONS,
        ),
        slot(
            "departure",
            &format!("where does the {name} depart from"),
            "departing from {value}",
            Some("departure"),
            &DEPARTURES,
        ),
    ];
    slots.extend(extra);
    DomainSchema {
        name: name.into(),
        category: Some("transport".into()),
        slots,
    }
}

/// Train, taxi (transport) and hotel (venue); the zero-shot target is taxi.
pub fn builtin_schemas() -> Vec<DomainSchema> {
    vec![
        transport(
            "train",
            vec![slot(
                "day",
                "what day does the user want to travel on the train",
                "on {value}",
                None,
                &["monday", "tuesday", "wednesday", "thursday", "friday"],
            )],
        ),
        transport("taxi", vec![]),
        DomainSchema {
            name: "hotel".into(),
            category: Some("venue".into()),
            slots: vec![
                slot("area", "what area of town is the hotel in", "in the {value}", Some("area"), &AREAS),
                slot("pricerange", "what is the price range of the hotel", "with a {value} price", Some("pricerange"), &PRICES),
                slot("stars", "how many stars does the hotel have", "with {value} stars", None, &["2", "3", "4", "5"]),
                slot("type", "what type of hotel does the user want", "of type {value}", None, &["guesthouse", "lodge", "inn"]),
            ],
        },
    ]
}

/// The built-in schemas plus a second venue domain (restaurant).
pub fn four_domain_schemas() -> Vec<DomainSchema> {
    let mut s = builtin_schemas();
    s.push(DomainSchema {
        name: "restaurant".into(),
        category: Some("venue".into()),
        slots: vec![
            slot("area", "what area of town is the restaurant in", "in the {value}", Some("area"), &AREAS),
            slot("pricerange", "what is the price range of the restaurant", "with a {value} price", Some("pricerange"), &PRICES),
            slot("food", "what food does the restaurant serve", "serving {value} food", None, &["italian", "indian", "chinese", "thai"]),
        ],
    });
    s
}

pub fn load_schemas(path: &Path) -> Result<Vec<DomainSchema>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schemas: Vec<DomainSchema> = serde_json::from_str(&text)?;
    validate_schemas(&schemas)?;
    Ok(schemas)
}
