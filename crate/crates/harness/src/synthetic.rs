//! Synthetic 2-hop retrieval task.
//!
//! Every context holds a query sentence `{q, b}` and an answer sentence
//! `{b, a}`: the answer is the entity co-occurring with the query's
//! sentence-mate in its other sentence. Distractor sentences use fresh names,
//! occasionally reusing a name across distractor sentences so that same-mention
//! edges also appear where they do not lead to the answer. All tokens are
//! single-token entity mentions apart from one relation word per sentence.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use anyhow::{bail, Result};
use attnlab_core::entity_graph::{normalize_mention, ContextExample, EntitySpan, TokenRange};
use attnlab_core::numerics::SeededRng;
use serde::{Deserialize, Serialize};

use crate::config::SyntheticTaskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    /// Entity-span index of the query mention.
    pub query_node: usize,
    /// Entity-span index of the answer mention.
    pub answer_node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(flatten)]
    pub example: ContextExample,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Non-entity words; one follows the first entity of every sentence.
const RELATIONS: [&str; 4] = ["met", "joined", "visited", "trusts"];

pub fn entity_name(i: usize) -> String {
    format!("E{i:02}")
}

/// Names a single context can need with no collisions at all.
fn names_needed(cfg: &SyntheticTaskConfig) -> usize {
    3 + (cfg.sentences_per_context - 2) * cfg.entities_per_sentence
}

pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<SyntheticDataset> {
    if cfg.sentences_per_context < 2 + cfg.distractor_count {
        bail!("sentences_per_context must be at least distractor_count + 2");
    }
    if cfg.entities_per_sentence < 2 {
        bail!("entities_per_sentence must be at least 2");
    }
    if names_needed(cfg) > cfg.num_entities_pool {
        bail!(
            "entity pool of {} cannot keep the answer unique: a context may need {} distinct names",
            cfg.num_entities_pool,
            names_needed(cfg)
        );
    }
    let root = SeededRng::new(cfg.data_seed);
    let mut rng = root.derive("train");
    let train = (0..cfg.num_examples).map(|i| generate_one(cfg, &mut rng, format!("train-{i:05}"))).collect();
    let mut rng = root.derive("test");
    let test = (0..cfg.num_test_examples).map(|i| generate_one(cfg, &mut rng, format!("test-{i:05}"))).collect();
    Ok(SyntheticDataset { train, test })
}

fn generate_one(cfg: &SyntheticTaskConfig, rng: &mut SeededRng, id: String) -> LabeledExample {
    let mut pool: Vec<usize> = (0..cfg.num_entities_pool).collect();
    rng.shuffle(&mut pool);
    let (q, b, a) = (pool[0], pool[1], pool[2]);
    let mut fresh = pool[3..].iter().copied();

    let max_distractors = cfg.sentences_per_context - 2;
    let distractors = cfg.distractor_count + rng.below(max_distractors - cfg.distractor_count + 1);
    let mut sentences: Vec<Vec<usize>> = vec![vec![q, b], vec![b, a]];
    let mut placed: Vec<usize> = Vec::new();
    for _ in 0..distractors {
        let mut s = Vec::with_capacity(cfg.entities_per_sentence);
        if !placed.is_empty() && rng.bernoulli(cfg.collision_rate) {
            s.push(placed[rng.below(placed.len())]);
        }
        while s.len() < cfg.entities_per_sentence {
            s.push(fresh.next().expect("pool size checked against names_needed"));
        }
        placed.extend(s.iter().copied());
        placed.sort_unstable();
        placed.dedup();
        sentences.push(s);
    }
    rng.shuffle(&mut sentences);
    for s in &mut sentences {
        rng.shuffle(s);
    }

    let mut tokens = Vec::new();
    let mut sentence_spans = Vec::new();
    let mut entity_spans = Vec::new();
    let (mut query_node, mut answer_node) = (0, 0);
    for (si, s) in sentences.iter().enumerate() {
        let start = tokens.len();
        for &e in s {
            if e == q {
                query_node = entity_spans.len();
            }
            if e == a {
                answer_node = entity_spans.len();
            }
            let t = tokens.len();
            tokens.push(entity_name(e));
            entity_spans.push(EntitySpan { start: t, end: t + 1, mention: entity_name(e), sentence_index: si });
            if t == start {
                tokens.push(RELATIONS[rng.below(RELATIONS.len())].to_string());
            }
        }
        sentence_spans.push(TokenRange::new(start, tokens.len()));
    }
    LabeledExample {
        example: ContextExample { id, tokens, sentence_spans, entity_spans },
        label: Label { query_node, answer_node },
    }
}

/// Shortest-path distances from the query's entity, over entities rather than
/// mentions: mentions with equal normalized text are one vertex, and two
/// vertices are adjacent when some pair of their mentions shares a sentence.
pub fn entity_distances(example: &ContextExample, query_node: usize) -> BTreeMap<String, usize> {
    let names: Vec<String> = example.entity_spans.iter().map(|e| normalize_mention(&e.mention)).collect();
    let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (i, ei) in example.entity_spans.iter().enumerate() {
        adj.entry(&names[i]).or_default();
        for (j, ej) in example.entity_spans.iter().enumerate() {
            if i != j && ei.sentence_index == ej.sentence_index && names[i] != names[j] {
                adj.entry(&names[i]).or_default().insert(&names[j]);
            }
        }
    }
    let mut dist = BTreeMap::new();
    let mut queue = VecDeque::from([(names[query_node].as_str(), 0)]);
    while let Some((v, d)) = queue.pop_front() {
        if dist.contains_key(v) {
            continue;
        }
        dist.insert(v.to_string(), d);
        for &w in &adj[v] {
            if !dist.contains_key(w) {
                queue.push_back((w, d + 1));
            }
        }
    }
    dist
}

/// Checks that the answer is the only entity two hops from the query.
pub fn check_two_hop(ex: &LabeledExample) -> Result<()> {
    let e = &ex.example;
    e.validate()?;
    let dist = entity_distances(e, ex.label.query_node);
    let answer = normalize_mention(&e.entity_spans[ex.label.answer_node].mention);
    match dist.get(&answer) {
        Some(2) => {}
        other => bail!("{}: answer at distance {other:?}, expected 2", e.id),
    }
    let at_two: Vec<&String> = dist.iter().filter(|(_, &d)| d == 2).map(|(n, _)| n).collect();
    if at_two.len() != 1 {
        bail!("{}: {} entities at distance 2", e.id, at_two.len());
    }
    Ok(())
}
