//! Answer-node classifier: token encoder, optional reasoning body, and a
//! mean-max span readout scored by a single vector.

use std::collections::BTreeMap;
use std::ops::Range;

use anyhow::{bail, Context, Result};
use attnlab_core::attention::{
    transformer_backward, transformer_forward, transformer_forward_segments, TransformerCache, TransformerParams,
};
use attnlab_core::checkpoint::Checkpoint;
use attnlab_core::entity_graph::{build_graph_with, density, ContextExample, EntityGraph};
use attnlab_core::fusion::{
    fusion_block_backward, fusion_block_forward, tok2graph_backward, tok2graph_meanmax, AttentionMode, FusionCache,
    FusionParams, SpanAssignment,
};
use attnlab_core::numerics::{softmax_row, Matrix, ParamSet, SeededRng};
use attnlab_core::probe::AttentionTrace;

use crate::config::{Config, Variant};
use crate::synthetic::LabeledExample;

const UNKNOWN: &str = "<unk>";

/// Token → row of the embedding table. Row 0 is reserved for unseen tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a ContextExample>) -> Self {
        let mut ids = BTreeMap::new();
        ids.insert(UNKNOWN.to_string(), 0);
        for ex in examples {
            for t in &ex.tokens {
                let next = ids.len();
                ids.entry(t.clone()).or_insert(next);
            }
        }
        Self { ids }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN) {
            bail!("vocabulary must start with {UNKNOWN}");
        }
        Ok(Self { ids: tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect() })
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> Vec<String> {
        let mut v: Vec<(&String, &usize)> = self.ids.iter().collect();
        v.sort_by_key(|(_, &i)| i);
        v.into_iter().map(|(t, _)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(0)
    }
}

/// An example with everything the model needs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub slots: Vec<Option<usize>>,
    pub sentences: Vec<Vec<usize>>,
    pub query_flags: Vec<bool>,
    pub spans: SpanAssignment,
    /// Entity graph from the co-occurrence rules; density is always taken from it.
    pub graph: EntityGraph,
    pub density: f64,
    pub answer: usize,
}

pub fn prepare(ex: &LabeledExample, vocab: &Vocab, cfg: &Config) -> Result<Prepared> {
    let e = &ex.example;
    let graph = build_graph_with(e, cfg.mention_mode).with_context(|| format!("example {}", e.id))?;
    let spans = SpanAssignment::from_example(e)?;
    if ex.label.answer_node >= spans.num_entities() || ex.label.query_node >= spans.num_entities() {
        bail!("example {}: label outside its {} entities", e.id, spans.num_entities());
    }
    let q = &e.entity_spans[ex.label.query_node];
    let slots: Vec<Option<usize>> = (0..e.tokens.len()).map(|t| e.sentence_of(t)).collect();
    if let Some(s) = slots.iter().flatten().find(|&&s| s >= cfg.synthetic.sentences_per_context) {
        bail!("example {}: sentence {s} exceeds sentences_per_context = {}", e.id, cfg.synthetic.sentences_per_context);
    }
    Ok(Prepared {
        id: e.id.clone(),
        token_ids: e.tokens.iter().map(|t| vocab.id(t)).collect(),
        sentences: e.sentence_spans.iter().map(|s| (s.start..s.end).collect()).collect(),
        slots,
        query_flags: (0..e.tokens.len()).map(|t| q.start <= t && t < q.end).collect(),
        density: density(&graph),
        spans,
        graph,
        answer: ex.label.answer_node,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    None,
    Fusion(FusionParams),
    Transformer(TransformerParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub all_ones_adjacency: bool,
    pub sentence_context: bool,
    pub embed: Matrix,
    pub slot_embed: Matrix,
    pub query: Matrix,
    pub body: Body,
    /// `2d × 1` scoring vector over mean-max pooled spans.
    pub score: Matrix,
}

impl ParamSet for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(format!("{prefix}embed"), &self.embed);
        f(format!("{prefix}slot_embed"), &self.slot_embed);
        f(format!("{prefix}query"), &self.query);
        match &self.body {
            Body::None => {}
            Body::Fusion(p) => p.visit(&format!("{prefix}fusion"), f),
            Body::Transformer(p) => p.visit(&format!("{prefix}transformer"), f),
        }
        f(format!("{prefix}score"), &self.score);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(format!("{prefix}embed"), &mut self.embed);
        f(format!("{prefix}slot_embed"), &mut self.slot_embed);
        f(format!("{prefix}query"), &mut self.query);
        match &mut self.body {
            Body::None => {}
            Body::Fusion(p) => p.visit_mut(&format!("{prefix}fusion"), f),
            Body::Transformer(p) => p.visit_mut(&format!("{prefix}transformer"), f),
        }
        f(format!("{prefix}score"), &mut self.score);
    }
}

enum BodyCache {
    None,
    Fusion(FusionCache),
    Transformer(TransformerCache),
}

/// Forward state of a stacked batch: example `i` owns token rows `tokens[i]`
/// and node rows `nodes[i]`.
struct ForwardCache {
    body: BodyCache,
    pool: attnlab_core::fusion::PoolCache,
    pooled: Matrix,
    logits: Vec<f64>,
    tokens: Vec<Range<usize>>,
    nodes: Vec<Range<usize>>,
}

fn ranges(lengths: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .map(|n| {
            start += n;
            start - n..start
        })
        .collect()
}

impl Model {
    pub fn init(cfg: &Config, vocab_size: usize) -> Self {
        let d = cfg.hidden_dim;
        let root = SeededRng::new(cfg.seed);
        let mut rng = root.derive("init");
        let embed = rng.normal_matrix(vocab_size, d, 0.1);
        let slot_embed = rng.normal_matrix(cfg.synthetic.sentences_per_context, d, 0.1);
        let query = rng.normal_matrix(1, d, 0.1);
        let body = match cfg.variant {
            Variant::None => Body::None,
            Variant::GraphAttention | Variant::SelfAttention => {
                let mut p = FusionParams::init(cfg.hops, d, d, &mut rng);
                p.hops.iter_mut().for_each(|h| h.gat.leaky_slope = cfg.leaky_slope);
                Body::Fusion(p)
            }
            Variant::Transformer => {
                let mut p = TransformerParams::init(cfg.hops, d, cfg.heads, cfg.ff_dim, &mut rng);
                p.norm = cfg.norm;
                Body::Transformer(p)
            }
        };
        let bound = 1.0 / ((2 * d) as f64).sqrt();
        let score = rng.uniform_matrix(2 * d, 1, -bound, bound);
        Self {
            variant: cfg.variant,
            all_ones_adjacency: cfg.adjacency_override_all_ones,
            sentence_context: cfg.sentence_context,
            embed,
            slot_embed,
            query,
            body,
            score,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed.cols()
    }

    /// Per-token `E[tok] + Q·flag`, before slot and sentence context are added.
    fn base(&self, ex: &Prepared) -> Matrix {
        let d = self.hidden_dim();
        let mut base = Matrix::zeros(ex.token_ids.len(), d);
        for (t, &id) in ex.token_ids.iter().enumerate() {
            let row = base.row_mut(t);
            row.copy_from_slice(self.embed.row(id));
            if ex.query_flags[t] {
                for (v, q) in row.iter_mut().zip(self.query.as_slice()) {
                    *v += q;
                }
            }
        }
        base
    }

    fn encode(&self, ex: &Prepared) -> Matrix {
        let base = self.base(ex);
        let mut x = base.clone();
        for (t, slot) in ex.slots.iter().enumerate() {
            if let Some(s) = *slot {
                for (v, e) in x.row_mut(t).iter_mut().zip(self.slot_embed.row(s)) {
                    *v += e;
                }
            }
        }
        if self.sentence_context {
            for sent in &ex.sentences {
                let mean = sentence_mean(&base, sent);
                for &t in sent {
                    for (v, m) in x.row_mut(t).iter_mut().zip(&mean) {
                        *v += m;
                    }
                }
            }
        }
        x
    }

    fn encode_backward(&self, ex: &Prepared, dx: &Matrix, grads: &mut Model) {
        let mut dbase = dx.clone();
        for (t, slot) in ex.slots.iter().enumerate() {
            if let Some(s) = *slot {
                for (g, v) in grads.slot_embed.row_mut(s).iter_mut().zip(dx.row(t)) {
                    *g += v;
                }
            }
        }
        if self.sentence_context {
            for sent in &ex.sentences {
                let share = sentence_mean(dx, sent);
                for &t in sent {
                    for (g, v) in dbase.row_mut(t).iter_mut().zip(&share) {
                        *g += v;
                    }
                }
            }
        }
        for (t, &id) in ex.token_ids.iter().enumerate() {
            for (g, v) in grads.embed.row_mut(id).iter_mut().zip(dbase.row(t)) {
                *g += v;
            }
            if ex.query_flags[t] {
                for (g, v) in grads.query.as_mut_slice().iter_mut().zip(dbase.row(t)) {
                    *g += v;
                }
            }
        }
    }

    /// Runs a batch as one stacked sequence. Graph bodies see the disjoint
    /// union of the examples' graphs and the Transformer attends within each
    /// example only, so every example is scored exactly as if run alone.
    fn run(&self, batch: &[&Prepared]) -> Result<ForwardCache> {
        if batch.is_empty() {
            bail!("empty batch");
        }
        let x = Matrix::vstack(&batch.iter().map(|ex| self.encode(ex)).collect::<Vec<_>>())?;
        let tokens = ranges(batch.iter().map(|ex| ex.token_ids.len()));
        let nodes = ranges(batch.iter().map(|ex| ex.spans.num_entities()));
        let spans = SpanAssignment::concat(&batch.iter().map(|ex| &ex.spans).collect::<Vec<_>>());
        let (out, body) = match &self.body {
            Body::None => (x, BodyCache::None),
            Body::Fusion(p) => {
                // Self-attention is graph attention over complete graphs; per-example
                // complete blocks keep examples from attending to each other.
                let complete = self.variant == Variant::SelfAttention || self.all_ones_adjacency;
                let owned: Vec<EntityGraph> = if complete {
                    batch.iter().map(|ex| EntityGraph::fully_connected(ex.graph.n())).collect()
                } else {
                    Vec::new()
                };
                let graphs: Vec<&EntityGraph> =
                    if complete { owned.iter().collect() } else { batch.iter().map(|ex| &ex.graph).collect() };
                let graph = EntityGraph::disjoint_union(&graphs);
                let out = fusion_block_forward(&x, &graph, &spans, p, AttentionMode::Graph)?;
                (out.tokens, BodyCache::Fusion(out.cache))
            }
            Body::Transformer(p) => {
                let (cache, out) = transformer_forward_segments(&x, p, None, &tokens)?;
                (out, BodyCache::Transformer(cache))
            }
        };
        let (pooled, pool) = tok2graph_meanmax(&out, &spans)?;
        let logits = pooled.matmul(&self.score)?.into_vec();
        Ok(ForwardCache { body, pool, pooled, logits, tokens, nodes })
    }

    /// Answer-node logits, one per entity span.
    pub fn logits(&self, ex: &Prepared) -> Result<Vec<f64>> {
        Ok(self.run(&[ex])?.logits)
    }

    /// Logits of every example in `batch`, computed in one stacked pass.
    pub fn batch_logits(&self, batch: &[&Prepared]) -> Result<Vec<Vec<f64>>> {
        let c = self.run(batch)?;
        Ok(c.nodes.iter().map(|r| c.logits[r.clone()].to_vec()).collect())
    }

    /// Adds the gradient of the summed cross-entropy over `batch` into `grads`.
    /// Returns the summed loss and the number of correct argmaxes.
    pub fn accumulate(&self, batch: &[&Prepared], grads: &mut Model) -> Result<(f64, usize)> {
        let c = self.run(batch)?;
        let mut dlogits = Vec::with_capacity(c.logits.len());
        let (mut loss, mut correct) = (0.0, 0);
        for (ex, r) in batch.iter().zip(&c.nodes) {
            let logits = &c.logits[r.clone()];
            let mut probs = softmax_row(logits)?;
            loss -= probs[ex.answer].ln();
            correct += usize::from(argmax(logits) == ex.answer);
            probs[ex.answer] -= 1.0;
            dlogits.extend(probs);
        }
        let dl = Matrix::from_vec(dlogits.len(), 1, dlogits)?;
        grads.score.add_assign(&c.pooled.matmul_tn(&dl)?)?;
        let dpooled = dl.matmul_nt(&self.score)?;
        let dtokens = tok2graph_backward(&c.pool, &dpooled)?;
        let dx = match (&self.body, &c.body, &mut grads.body) {
            (Body::None, BodyCache::None, Body::None) => dtokens,
            (Body::Fusion(p), BodyCache::Fusion(cache), Body::Fusion(g)) => {
                let fg = fusion_block_backward(cache, p, &dtokens)?;
                add_params(g, &fg.params);
                fg.input
            }
            (Body::Transformer(p), BodyCache::Transformer(cache), Body::Transformer(g)) => {
                let tg = transformer_backward(cache, p, &dtokens)?;
                add_params(g, &tg.params);
                tg.input
            }
            _ => bail!("gradient buffer does not match the model body"),
        };
        for (ex, r) in batch.iter().zip(&c.tokens) {
            self.encode_backward(ex, &dx.row_range(r.clone()), grads);
        }
        Ok((loss, correct))
    }

    /// Distance of `batch`'s forward pass from the nearest non-differentiable point.
    pub fn kink_margin(&self, batch: &[&Prepared]) -> Result<f64> {
        let c = self.run(batch)?;
        let body = match &c.body {
            BodyCache::None => f64::INFINITY,
            BodyCache::Fusion(f) => f.kink_margin(),
            BodyCache::Transformer(t) => t.kink_margin(),
        };
        Ok(body.min(c.pool.tie_margin()))
    }

    /// Attention traces of the Transformer body, for the head probe.
    pub fn attention_trace(&self, ex: &Prepared) -> Result<AttentionTrace> {
        let Body::Transformer(p) = &self.body else {
            bail!("attention traces need the transformer variant, this model is {}", self.variant);
        };
        let out = transformer_forward(&self.encode(ex), p, None)?;
        Ok(AttentionTrace { example_id: ex.id.clone(), entity_mask: ex.spans.entity_mask(), layers: out.traces })
    }

    pub fn zeros_like(&self) -> Model {
        let mut g = self.clone();
        g.zero();
        g
    }
}

/// Captures `model` with the config and vocabulary needed to rebuild it.
pub fn to_checkpoint(model: &Model, vocab: &Vocab, cfg: &Config) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), serde_json::Value::String(cfg.to_toml()));
    meta.insert("vocab".to_string(), serde_json::json!(vocab.tokens()));
    Checkpoint::capture(model, meta)
}

/// Rebuilds the model stored by [`to_checkpoint`]. `overrides` are applied
/// to the stored config; model-shape keys must not change.
pub fn from_checkpoint(ckpt: &Checkpoint, overrides: &[String]) -> Result<(Config, Vocab, Model)> {
    let text = ckpt.meta.get("config").and_then(|v| v.as_str()).context("checkpoint has no config")?;
    let table: toml::Table = text.parse().context("checkpoint config")?;
    let cfg = Config::from_table_with(table, overrides)?;
    let tokens: Vec<String> =
        serde_json::from_value(ckpt.meta.get("vocab").cloned().context("checkpoint has no vocab")?)
            .context("checkpoint vocab")?;
    let vocab = Vocab::from_tokens(tokens)?;
    let mut model = Model::init(&cfg, vocab.len());
    ckpt.restore(&mut model).context("checkpoint does not match its config")?;
    Ok((cfg, vocab, model))
}

fn sentence_mean(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for &t in rows {
        for (o, v) in out.iter_mut().zip(m.row(t)) {
            *o += v;
        }
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn add_params<P: ParamSet>(dst: &mut P, src: &P) {
    let srcs = src.named_tensors();
    for (d, (_, s)) in dst.tensors_mut().into_iter().zip(srcs) {
        d.add_assign(s).expect("matching shapes");
    }
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
