//! Property suites run by `equivalence-check`, `gradcheck` and `probe-heads`.
//!
//! Every suite draws its instances from `suite_seed`, so reports are
//! reproducible byte for byte.

use anyhow::Result;
use attnlab_core::attention::{
    graph_attention_backward, graph_attention_forward, self_attention_forward, transformer_backward,
    transformer_forward, vanilla_self_attention, GraphAttentionParams, NormPlacement, TransformerParams,
};
use attnlab_core::entity_graph::{EntityGraph, TokenRange};
use attnlab_core::fusion::{
    fusion_block_backward, fusion_block_forward, graph2doc, graph2doc_backward, AttentionMode, FusionParams,
    SpanAssignment,
};
use attnlab_core::numerics::{finite_diff_grad, max_relative_error, softmax_row, Matrix, ParamSet, SeededRng};
use attnlab_core::probe::{rank_heads, AttentionTrace};
use serde::Serialize;

use crate::config::Config;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Resampling gives up after this many draws per instance.
const MAX_DRAWS: usize = 1000;

fn random_adjacency(rng: &mut SeededRng, n: usize, p: f64) -> Matrix {
    let mut adj = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.bernoulli(p) {
                adj[(i, j)] = 1.0;
                adj[(j, i)] = 1.0;
            }
        }
    }
    adj
}

/// Graph-attention parameters with an attention vector large enough that
/// the softmax is far from uniform.
fn sharp_params(rng: &mut SeededRng, d_in: usize, d_out: usize) -> GraphAttentionParams {
    let mut p = GraphAttentionParams::init(d_in, d_out, rng);
    p.attn_vec = rng.uniform_matrix(1, 2 * d_out, -1.5, 1.5);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub max_nodes: usize,
    pub max_dim: usize,
    pub tolerance: f64,
    /// Complete-graph graph attention against the independent vanilla self-attention.
    pub max_deviation: f64,
    /// Complete-graph graph attention against `self_attention_forward`.
    pub max_deviation_self_attention: f64,
    pub worst_instance: usize,
    /// Masked instances: α entries outside the adjacency that were not exactly 0.0.
    pub masking_instances: usize,
    pub nonzero_outside_adjacency: usize,
    pub max_row_sum_deviation: f64,
    pub passed: bool,
}

/// Degeneracy of graph attention to self-attention on complete graphs, plus
/// exact-zero masking on random sparse graphs.
pub fn equivalence_check(cfg: &Config) -> Result<EquivalenceReport> {
    let mut rng = SeededRng::new(cfg.suite_seed).derive("equivalence");
    let (mut max_dev, mut max_dev_sa, mut worst) = (0.0f64, 0.0f64, 0);
    for i in 0..cfg.equivalence_instances {
        let n = 1 + rng.below(cfg.equivalence_max_nodes);
        let d_in = 1 + rng.below(cfg.equivalence_max_dim);
        let d_out = 1 + rng.below(cfg.equivalence_max_dim);
        let p = sharp_params(&mut rng, d_in, d_out);
        let h = rng.uniform_matrix(n, d_in, -2.0, 2.0);
        let ga = graph_attention_forward(&h, &Matrix::filled(n, n, 1.0), &p)?;
        let (vanilla, alpha) = vanilla_self_attention(&h, &p)?;
        let dev = ga.states.max_abs_diff(&vanilla)?.max(ga.attention.max_abs_diff(&alpha)?);
        if dev > max_dev {
            (max_dev, worst) = (dev, i);
        }
        let sa = self_attention_forward(&h, &p)?;
        max_dev_sa = max_dev_sa.max(ga.states.max_abs_diff(&sa.states)?.max(ga.attention.max_abs_diff(&sa.attention)?));
    }

    let mut rng = SeededRng::new(cfg.suite_seed).derive("masking");
    let (mut nonzero, mut row_dev) = (0, 0.0f64);
    for _ in 0..cfg.equivalence_instances {
        let n = 1 + rng.below(cfg.equivalence_max_nodes);
        let d = 1 + rng.below(cfg.equivalence_max_dim);
        let p = sharp_params(&mut rng, d, d);
        let h = rng.uniform_matrix(n, d, -3.0, 3.0);
        let density = rng.uniform(0.0, 1.0);
        let adj = random_adjacency(&mut rng, n, density);
        let a = graph_attention_forward(&h, &adj, &p)?.attention;
        for r in 0..n {
            row_dev = row_dev.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
            nonzero += (0..n).filter(|&c| adj[(r, c)] == 0.0 && a[(r, c)].to_bits() != 0).count();
        }
    }

    let tol = cfg.equivalence_tolerance;
    Ok(EquivalenceReport {
        instances: cfg.equivalence_instances,
        max_nodes: cfg.equivalence_max_nodes,
        max_dim: cfg.equivalence_max_dim,
        tolerance: tol,
        max_deviation: max_dev,
        max_deviation_self_attention: max_dev_sa,
        worst_instance: worst,
        masking_instances: cfg.equivalence_instances,
        nonzero_outside_adjacency: nonzero,
        max_row_sum_deviation: row_dev,
        passed: max_dev <= tol && max_dev_sa <= tol && nonzero == 0 && row_dev <= tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    /// Draws rejected for landing too close to a kink.
    pub resampled: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub kink_margin: f64,
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

/// A scalar test function `f(flat inputs ++ flat params)` with its analytic gradient.
type Eval = Box<dyn Fn(&[f64]) -> f64>;

struct Instance {
    point: Vec<f64>,
    analytic: Vec<f64>,
    eval: Eval,
    margin: f64,
}

fn weighted_sum(out: &Matrix, w: &Matrix) -> f64 {
    out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

fn graph_attention_instance(rng: &mut SeededRng) -> Result<Instance> {
    let n = 1 + rng.below(8);
    let (d_in, d_out) = (1 + rng.below(6), 1 + rng.below(6));
    let p = sharp_params(rng, d_in, d_out);
    let h = rng.uniform_matrix(n, d_in, -1.0, 1.0);
    let adj = random_adjacency(rng, n, 0.5);
    let w = rng.uniform_matrix(n, d_out, -1.0, 1.0);
    let out = graph_attention_forward(&h, &adj, &p)?;
    let g = graph_attention_backward(&out.cache, &p, &w)?;
    let split = h.len();
    Ok(Instance {
        point: concat(&[h.as_slice(), &p.flatten()]),
        analytic: concat(&[g.input.as_slice(), &g.params.flatten()]),
        margin: out.cache.kink_margin(),
        eval: Box::new(move |v| {
            let hi = Matrix::from_vec(n, d_in, v[..split].to_vec()).expect("shape");
            let mut pi = p.clone();
            pi.assign_flat(&v[split..]).expect("shape");
            weighted_sum(&graph_attention_forward(&hi, &adj, &pi).expect("forward").states, &w)
        }),
    })
}

fn random_spans(rng: &mut SeededRng, len: usize, count: usize) -> Result<SpanAssignment> {
    let spans = (0..count)
        .map(|_| {
            let s = rng.below(len);
            TokenRange::new(s, (s + 1 + rng.below(3)).min(len))
        })
        .collect();
    Ok(SpanAssignment::new(len, spans)?)
}

fn graph2doc_instance(rng: &mut SeededRng) -> Result<Instance> {
    let len = 2 + rng.below(9);
    let n = 1 + rng.below(4);
    let (d, w_node) = (1 + rng.below(5), 1 + rng.below(5));
    let a = random_spans(rng, len, n)?;
    let c = rng.uniform_matrix(len, d, -1.0, 1.0);
    let h = rng.uniform_matrix(n, w_node, -1.0, 1.0);
    let mix = rng.uniform_matrix(d + w_node, d, -1.0, 1.0);
    let w = rng.uniform_matrix(len, d, -1.0, 1.0);
    let (_, cache) = graph2doc(&c, &h, &a, &mix)?;
    let (dc, dh, dmix) = graph2doc_backward(&cache, &mix, &w)?;
    let (sc, sh) = (c.len(), c.len() + h.len());
    Ok(Instance {
        point: concat(&[c.as_slice(), h.as_slice(), mix.as_slice()]),
        analytic: concat(&[dc.as_slice(), dh.as_slice(), dmix.as_slice()]),
        margin: cache.kink_margin(),
        eval: Box::new(move |v| {
            let ci = Matrix::from_vec(len, d, v[..sc].to_vec()).expect("shape");
            let hi = Matrix::from_vec(n, w_node, v[sc..sh].to_vec()).expect("shape");
            let mi = Matrix::from_vec(d + w_node, d, v[sh..].to_vec()).expect("shape");
            weighted_sum(&graph2doc(&ci, &hi, &a, &mi).expect("forward").0, &w)
        }),
    })
}

fn fusion_instance(rng: &mut SeededRng) -> Result<Instance> {
    let len = 3 + rng.below(8);
    let n = 1 + rng.below(4);
    let (d, node_dim) = (1 + rng.below(4), 1 + rng.below(4));
    let hops = 1 + rng.below(2);
    let a = random_spans(rng, len, n)?;
    let g = EntityGraph::new(vec![String::new(); n], random_adjacency(rng, n, 0.5))?;
    let mut p = FusionParams::init(hops, d, node_dim, rng);
    for hp in &mut p.hops {
        hp.gat.attn_vec = rng.uniform_matrix(1, 2 * node_dim, -1.5, 1.5);
    }
    let c = rng.uniform_matrix(len, d, -1.0, 1.0);
    let w = rng.uniform_matrix(len, d, -1.0, 1.0);
    let out = fusion_block_forward(&c, &g, &a, &p, AttentionMode::Graph)?;
    let grads = fusion_block_backward(&out.cache, &p, &w)?;
    let split = c.len();
    Ok(Instance {
        point: concat(&[c.as_slice(), &p.flatten()]),
        analytic: concat(&[grads.input.as_slice(), &grads.params.flatten()]),
        margin: out.cache.kink_margin(),
        eval: Box::new(move |v| {
            let ci = Matrix::from_vec(len, d, v[..split].to_vec()).expect("shape");
            let mut pi = p.clone();
            pi.assign_flat(&v[split..]).expect("shape");
            weighted_sum(&fusion_block_forward(&ci, &g, &a, &pi, AttentionMode::Graph).expect("forward").tokens, &w)
        }),
    })
}

fn transformer_instance(rng: &mut SeededRng) -> Result<Instance> {
    let len = 1 + rng.below(6);
    let heads = 1 + rng.below(2);
    let dim = heads * (2 + rng.below(3));
    let ff = 2 + rng.below(5);
    let mut p = TransformerParams::init(2, dim, heads, ff, rng);
    p.norm = if rng.bernoulli(0.5) { NormPlacement::Pre } else { NormPlacement::Post };
    for l in &mut p.layers {
        l.ln1_gain = rng.uniform_matrix(1, dim, 0.5, 1.5);
        l.ln2_gain = rng.uniform_matrix(1, dim, 0.5, 1.5);
        l.bv = rng.uniform_matrix(1, dim, -0.3, 0.3);
    }
    let mut pad: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.25)).collect();
    pad[rng.below(len)] = false;
    let x = rng.uniform_matrix(len, dim, -1.0, 1.0);
    let w = rng.uniform_matrix(len, dim, -1.0, 1.0);
    let out = transformer_forward(&x, &p, Some(&pad))?;
    let g = transformer_backward(&out.cache, &p, &w)?;
    let split = x.len();
    Ok(Instance {
        point: concat(&[x.as_slice(), &p.flatten()]),
        analytic: concat(&[g.input.as_slice(), &g.params.flatten()]),
        margin: out.cache.kink_margin(),
        eval: Box::new(move |v| {
            let xi = Matrix::from_vec(len, dim, v[..split].to_vec()).expect("shape");
            let mut pi = p.clone();
            pi.assign_flat(&v[split..]).expect("shape");
            weighted_sum(&transformer_forward(&xi, &pi, Some(&pad)).expect("forward").output, &w)
        }),
    })
}

type Generator = fn(&mut SeededRng) -> Result<Instance>;

fn check_layer(cfg: &Config, layer: &str, generate: Generator) -> Result<LayerCheck> {
    let mut rng = SeededRng::new(cfg.suite_seed).derive(layer);
    let (mut max_err, mut worst, mut resampled) = (0.0f64, 0, 0);
    for i in 0..cfg.gradcheck_instances {
        let mut draws = 0;
        let inst = loop {
            let inst = generate(&mut rng)?;
            draws += 1;
            if inst.margin > cfg.gradcheck_kink_margin {
                break inst;
            }
            if draws >= MAX_DRAWS {
                anyhow::bail!("{layer}: no kink-free instance in {MAX_DRAWS} draws");
            }
        };
        resampled += draws - 1;
        let numeric = finite_diff_grad(|v| (inst.eval)(v), &inst.point, cfg.gradcheck_eps)?;
        let err = max_relative_error(&inst.analytic, &numeric, GRADCHECK_FLOOR);
        if err > max_err || !err.is_finite() {
            (max_err, worst) = (err, i);
        }
    }
    Ok(LayerCheck {
        layer: layer.to_string(),
        instances: cfg.gradcheck_instances,
        max_relative_error: max_err,
        worst_instance: worst,
        resampled,
        passed: max_err <= cfg.gradcheck_tolerance,
    })
}

pub const GRADCHECK_LAYERS: [&str; 4] = ["graph_attention", "graph2doc", "fusion_block", "transformer"];

/// Central finite differences against every analytic backward pass.
pub fn gradcheck(cfg: &Config) -> Result<GradcheckReport> {
    let generators: [Generator; 4] =
        [graph_attention_instance, graph2doc_instance, fusion_instance, transformer_instance];
    let layers = GRADCHECK_LAYERS
        .iter()
        .zip(generators)
        .map(|(name, g)| check_layer(cfg, name, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        eps: cfg.gradcheck_eps,
        tolerance: cfg.gradcheck_tolerance,
        floor: GRADCHECK_FLOOR,
        kink_margin: cfg.gradcheck_kink_margin,
        passed: layers.iter().all(|l| l.passed),
        layers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlantingOutcome {
    pub planted_layer: usize,
    pub planted_head: usize,
    pub top_layer: usize,
    pub top_head: usize,
    pub planted_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSuiteReport {
    pub plantings: usize,
    pub decoys: usize,
    pub traces_per_planting: usize,
    pub recovered: usize,
    pub outcomes: Vec<PlantingOutcome>,
    pub passed: bool,
}

pub const PROBE_LAYERS: usize = 7;
pub const PROBE_HEADS: usize = 7;
pub const PROBE_TRACES: usize = 12;

/// Row-stochastic attention from Gaussian logits, plus `bonus` on entity columns.
fn attention_rows(rng: &mut SeededRng, mask: &[bool], bonus: f64) -> Result<Matrix> {
    let len = mask.len();
    let mut a = Matrix::zeros(len, len);
    for i in 0..len {
        let logits: Vec<f64> = mask.iter().map(|&m| rng.normal(0.0, 1.0) + if m { bonus } else { 0.0 }).collect();
        a.row_mut(i).copy_from_slice(&softmax_row(&logits)?);
    }
    Ok(a)
}

/// Synthetic traces with one entity-focused head among `PROBE_LAYERS × PROBE_HEADS - 1` decoys.
pub fn planted_traces(rng: &mut SeededRng, planted: (usize, usize)) -> Result<Vec<AttentionTrace>> {
    (0..PROBE_TRACES)
        .map(|t| {
            let len = 6 + rng.below(11);
            let mut mask: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.3)).collect();
            mask[rng.below(len)] = true;
            let layers = (0..PROBE_LAYERS)
                .map(|l| {
                    (0..PROBE_HEADS)
                        .map(|h| attention_rows(rng, &mask, if (l, h) == planted { 2.0 } else { 0.0 }))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AttentionTrace { example_id: format!("planted-{t:02}"), entity_mask: mask, layers })
        })
        .collect()
}

pub fn probe_planted_suite(cfg: &Config, plantings: usize) -> Result<ProbeSuiteReport> {
    let mut rng = SeededRng::new(cfg.suite_seed).derive("probe");
    let mut outcomes = Vec::with_capacity(plantings);
    for _ in 0..plantings {
        let planted = (rng.below(PROBE_LAYERS), rng.below(PROBE_HEADS));
        let traces = planted_traces(&mut rng, planted)?;
        let ranks = rank_heads(&traces, cfg.probe_direction, cfg.probe_rank_by)?;
        let planted_rank = ranks.iter().find(|r| (r.layer, r.head) == planted).map_or(0, |r| r.rank);
        outcomes.push(PlantingOutcome {
            planted_layer: planted.0,
            planted_head: planted.1,
            top_layer: ranks[0].layer,
            top_head: ranks[0].head,
            planted_rank,
        });
    }
    let recovered = outcomes.iter().filter(|o| (o.top_layer, o.top_head) == (o.planted_layer, o.planted_head)).count();
    Ok(ProbeSuiteReport {
        plantings,
        decoys: PROBE_LAYERS * PROBE_HEADS - 1,
        traces_per_planting: PROBE_TRACES,
        recovered,
        outcomes,
        passed: recovered == plantings,
    })
}
