//! Token ↔ graph bridging: mean-max pooling of entity spans into nodes,
//! Graph2Doc back-projection onto tokens, and the multi-hop fusion block.
//!
//! Items are rows throughout: tokens are rows of `C`, nodes rows of `H`.

use serde::{Deserialize, Serialize};

use crate::attention::{graph_attention_backward, graph_attention_forward, GraphAttentionCache, GraphAttentionParams};
use crate::entity_graph::{ContextExample, EntityGraph, TokenRange};
use crate::error::{shape_err, Error, Result};
use crate::numerics::params::join;
use crate::numerics::{relu, relu_grad, Matrix, ParamSet, SeededRng};

/// Token representations, one row per token.
pub type TokenMatrix = Matrix;

/// Entity token ranges plus the derived token → entity incidence.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanAssignment {
    len: usize,
    spans: Vec<TokenRange>,
    covering: Vec<Vec<usize>>,
}

impl SpanAssignment {
    pub fn new(len: usize, spans: Vec<TokenRange>) -> Result<Self> {
        let mut covering = vec![Vec::new(); len];
        for (i, s) in spans.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Validation(format!("entity span {i} [{}, {}) is empty", s.start, s.end)));
            }
            if s.end > len {
                return Err(Error::Validation(format!(
                    "entity span {i} [{}, {}) exceeds {len} tokens",
                    s.start, s.end
                )));
            }
            for c in &mut covering[s.start..s.end] {
                c.push(i);
            }
        }
        Ok(Self { len, spans, covering })
    }

    pub fn from_example(example: &ContextExample) -> Result<Self> {
        Self::new(example.tokens.len(), example.entity_spans.iter().map(|e| TokenRange::new(e.start, e.end)).collect())
    }

    /// Assignment over the concatenated token sequences of `parts`.
    pub fn concat(parts: &[&SpanAssignment]) -> Self {
        let mut len = 0;
        let mut spans = Vec::new();
        let mut covering = Vec::new();
        for p in parts {
            let node_offset = spans.len();
            spans.extend(p.spans.iter().map(|s| TokenRange::new(s.start + len, s.end + len)));
            covering.extend(p.covering.iter().map(|c| c.iter().map(|e| e + node_offset).collect::<Vec<_>>()));
            len += p.len;
        }
        Self { len, spans, covering }
    }

    pub fn num_tokens(&self) -> usize {
        self.len
    }

    pub fn num_entities(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self) -> &[TokenRange] {
        &self.spans
    }

    /// Entities whose span contains token `t`, in entity order.
    pub fn entities_of(&self, t: usize) -> &[usize] {
        &self.covering[t]
    }

    /// `true` for every token inside at least one entity span.
    pub fn entity_mask(&self) -> Vec<bool> {
        self.covering.iter().map(|c| !c.is_empty()).collect()
    }

    fn check_tokens(&self, c: &Matrix) -> Result<()> {
        if c.rows() != self.len {
            return Err(shape_err!("{} token rows for an assignment over {} tokens", c.rows(), self.len));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    len: usize,
    width: usize,
    spans: Vec<TokenRange>,
    /// `argmax[i * d + k]` is the token holding node `i`'s max in dimension `k`.
    argmax: Vec<usize>,
    /// Smallest gap between a span's max and any other entry in that dimension.
    tie_margin: f64,
}

/// Node `i` becomes `[mean of its span rows ; element-wise max of its span rows]`.
pub fn tok2graph_meanmax(c: &TokenMatrix, a: &SpanAssignment) -> Result<(Matrix, PoolCache)> {
    a.check_tokens(c)?;
    let d = c.cols();
    let n = a.num_entities();
    let mut out = Matrix::zeros(n, 2 * d);
    let mut argmax = vec![0; n * d];
    for (i, s) in a.spans.iter().enumerate() {
        let row = out.row_mut(i);
        let (mean, max) = row.split_at_mut(d);
        max.copy_from_slice(c.row(s.start));
        argmax[i * d..(i + 1) * d].iter_mut().for_each(|m| *m = s.start);
        for t in s.start..s.end {
            let r = c.row(t);
            for k in 0..d {
                mean[k] += r[k];
                // Strict comparison keeps the earliest token on ties.
                if r[k] > max[k] {
                    max[k] = r[k];
                    argmax[i * d + k] = t;
                }
            }
        }
        let inv = 1.0 / s.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
    }
    let mut tie_margin = f64::INFINITY;
    for (i, s) in a.spans.iter().enumerate() {
        for k in 0..d {
            let best = argmax[i * d + k];
            for t in (s.start..s.end).filter(|&t| t != best) {
                tie_margin = tie_margin.min(c[(best, k)] - c[(t, k)]);
            }
        }
    }
    Ok((out, PoolCache { len: c.rows(), width: d, spans: a.spans.clone(), argmax, tie_margin }))
}

pub fn tok2graph_backward(cache: &PoolCache, d_nodes: &Matrix) -> Result<Matrix> {
    let d = cache.width;
    if d_nodes.shape() != (cache.spans.len(), 2 * d) {
        return Err(Error::State("node gradient does not match the pooling call".into()));
    }
    let mut dc = Matrix::zeros(cache.len, d);
    for (i, s) in cache.spans.iter().enumerate() {
        let (dmean, dmax) = d_nodes.row(i).split_at(d);
        let inv = 1.0 / s.len() as f64;
        for t in s.start..s.end {
            let r = dc.row_mut(t);
            for k in 0..d {
                r[k] += dmean[k] * inv;
            }
        }
        for k in 0..d {
            dc[(cache.argmax[i * d + k], k)] += dmax[k];
        }
    }
    Ok(dc)
}

impl PoolCache {
    /// Smallest gap between a pooled maximum and another entry of its span.
    pub fn tie_margin(&self) -> f64 {
        self.tie_margin
    }
}

#[derive(Clone, Debug)]
pub struct Graph2DocCache {
    joined: Matrix,
    pre: Matrix,
    covering: Vec<Vec<usize>>,
    token_width: usize,
    node_count: usize,
}

impl Graph2DocCache {
    /// Distance of the nearest pre-activation from the ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.pre.as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Mean of the node rows covering each token; zero for tokens outside every entity.
fn node_summary(h: &Matrix, a: &SpanAssignment) -> Matrix {
    let w = h.cols();
    let mut s = Matrix::zeros(a.len, w);
    for (t, ents) in a.covering.iter().enumerate() {
        if ents.is_empty() {
            continue;
        }
        let row = s.row_mut(t);
        for &e in ents {
            for (acc, v) in row.iter_mut().zip(h.row(e)) {
                *acc += v;
            }
        }
        let inv = 1.0 / ents.len() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    s
}

/// Token `t` becomes `ReLU([C_t, summary_t] · mix)`, with `mix` of shape `(d + node_width) × d`.
pub fn graph2doc(
    c: &TokenMatrix,
    h: &Matrix,
    a: &SpanAssignment,
    mix: &Matrix,
) -> Result<(TokenMatrix, Graph2DocCache)> {
    a.check_tokens(c)?;
    if h.rows() != a.num_entities() {
        return Err(shape_err!("{} node rows for {} entities", h.rows(), a.num_entities()));
    }
    if mix.rows() != c.cols() + h.cols() {
        return Err(shape_err!(
            "mix has {} rows, expected token width {} + node width {}",
            mix.rows(),
            c.cols(),
            h.cols()
        ));
    }
    let joined = c.hconcat(&node_summary(h, a))?;
    let pre = joined.matmul(mix)?;
    let out = pre.map(relu);
    Ok((out, Graph2DocCache { joined, pre, covering: a.covering.clone(), token_width: c.cols(), node_count: h.rows() }))
}

/// Returns `(dC, dH, dmix)`.
pub fn graph2doc_backward(cache: &Graph2DocCache, mix: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if d_out.shape() != cache.pre.shape() || mix.shape() != (cache.joined.cols(), cache.pre.cols()) {
        return Err(Error::State("gradient does not match the Graph2Doc call".into()));
    }
    let mut dz = d_out.clone();
    for (g, &z) in dz.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *g *= relu_grad(z);
    }
    let dmix = cache.joined.matmul_tn(&dz)?;
    let djoined = dz.matmul_nt(mix)?;
    let (dc, dsummary) = djoined.split_cols(cache.token_width)?;
    let mut dh = Matrix::zeros(cache.node_count, dsummary.cols());
    for (t, ents) in cache.covering.iter().enumerate() {
        if ents.is_empty() {
            continue;
        }
        let inv = 1.0 / ents.len() as f64;
        for &e in ents {
            let dst = dh.row_mut(e);
            for (acc, v) in dst.iter_mut().zip(dsummary.row(t)) {
                *acc += v * inv;
            }
        }
    }
    Ok((dc, dh, dmix))
}

/// Whether hops attend along the entity graph or over all node pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Graph,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopParams {
    /// Projects pooled nodes (`2d` wide) to `node_dim`.
    pub gat: GraphAttentionParams,
    /// `(d + node_dim) × d`.
    pub mix: Matrix,
}

impl ParamSet for HopParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.gat.visit(&join(prefix, "gat"), f);
        f(join(prefix, "mix"), &self.mix);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        self.gat.visit_mut(&join(prefix, "gat"), f);
        f(join(prefix, "mix"), &mut self.mix);
    }
}

/// One [`HopParams`] per hop; the hop count is `hops.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub hops: Vec<HopParams>,
}

impl FusionParams {
    /// Token width `d` in and out, node width `node_dim` inside each hop.
    pub fn init(hops: usize, d: usize, node_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / ((d + node_dim) as f64).sqrt();
        let hops = (0..hops)
            .map(|_| HopParams {
                gat: GraphAttentionParams::init(2 * d, node_dim, rng),
                mix: rng.uniform_matrix(d + node_dim, d, -bound, bound),
            })
            .collect();
        Self { hops }
    }
}

impl ParamSet for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (t, h) in self.hops.iter().enumerate() {
            h.visit(&join(prefix, &format!("hops.{t}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        for (t, h) in self.hops.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("hops.{t}")), f);
        }
    }
}

#[derive(Clone, Debug)]
struct HopCache {
    pool: PoolCache,
    gat: GraphAttentionCache,
    doc: Graph2DocCache,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    hops: Vec<HopCache>,
}

impl FusionCache {
    /// Distance to the nearest ReLU/LeakyReLU kink or max-pooling tie.
    pub fn kink_margin(&self) -> f64 {
        self.hops.iter().fold(f64::INFINITY, |m, h| {
            let doc = h.doc.pre.as_slice().iter().fold(m, |m, v| m.min(v.abs()));
            doc.min(h.gat.kink_margin()).min(h.pool.tie_margin)
        })
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub tokens: TokenMatrix,
    /// Attention of each hop, `N × N`.
    pub traces: Vec<Matrix>,
    pub cache: FusionCache,
}

/// Runs `params.hops.len()` rounds of pool → attend → Graph2Doc.
pub fn fusion_block_forward(
    c0: &TokenMatrix,
    g: &EntityGraph,
    a: &SpanAssignment,
    params: &FusionParams,
    mode: AttentionMode,
) -> Result<FusionOutput> {
    if params.hops.is_empty() {
        return Err(Error::Domain("the fusion block needs at least one hop".into()));
    }
    if g.n() != a.num_entities() {
        return Err(shape_err!("graph has {} nodes but {} entity spans", g.n(), a.num_entities()));
    }
    let full;
    let adjacency = match mode {
        AttentionMode::Graph => g.adjacency(),
        AttentionMode::Full => {
            full = Matrix::filled(g.n(), g.n(), 1.0);
            &full
        }
    };
    let mut c = c0.clone();
    let mut traces = Vec::with_capacity(params.hops.len());
    let mut hops = Vec::with_capacity(params.hops.len());
    for hp in &params.hops {
        let (nodes, pool) = tok2graph_meanmax(&c, a)?;
        let att = graph_attention_forward(&nodes, adjacency, &hp.gat)?;
        let (next, doc) = graph2doc(&c, &att.states, a, &hp.mix)?;
        traces.push(att.attention);
        hops.push(HopCache { pool, gat: att.cache, doc });
        c = next;
    }
    Ok(FusionOutput { tokens: c, traces, cache: FusionCache { hops } })
}

#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub input: Matrix,
    pub params: FusionParams,
}

pub fn fusion_block_backward(cache: &FusionCache, params: &FusionParams, d_tokens: &Matrix) -> Result<FusionGrads> {
    if cache.hops.len() != params.hops.len() {
        return Err(Error::State(format!("cache holds {} hops, parameters {}", cache.hops.len(), params.hops.len())));
    }
    let mut grads = params.clone();
    grads.zero();
    let mut dc = d_tokens.clone();
    for ((hp, hc), g) in params.hops.iter().zip(&cache.hops).zip(&mut grads.hops).rev() {
        let (dc_direct, dh, dmix) = graph2doc_backward(&hc.doc, &hp.mix, &dc)?;
        g.mix = dmix;
        let att = graph_attention_backward(&hc.gat, &hp.gat, &dh)?;
        g.gat = att.params;
        let mut next = tok2graph_backward(&hc.pool, &att.input)?;
        next.add_assign(&dc_direct)?;
        dc = next;
    }
    Ok(FusionGrads { input: dc, params: grads })
}
