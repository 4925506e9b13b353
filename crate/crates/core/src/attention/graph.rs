//! Single-head graph attention over an adjacency mask, and its fully
//! connected form.
//!
//! With projected states `g_i = projᵀ h_i`:
//!
//! ```text
//! β_ij = LeakyReLU(attn_vecᵀ [g_i ; g_j])          j ∈ N(i)
//! α_ij = exp(β_ij) / Σ_{k ∈ N(i)} exp(β_ik)
//! h'_i = ReLU(Σ_{k ∈ N(i)} α_ik g_k)
//! ```
//!
//! `N(i)` is row `i` of the adjacency; α is exactly zero outside it. Fixing
//! `proj` to the identity recovers the unprojected layer.

use crate::entity_graph::validate_adjacency;
use crate::error::{shape_err, Error, Result};
use crate::numerics::params::join;
use crate::numerics::{
    leaky_relu, leaky_relu_grad, masked_softmax_row, relu, relu_grad, softmax_row, Matrix, ParamSet, SeededRng,
    DEFAULT_LEAKY_SLOPE,
};

/// Node representations, one row per node.
pub type NodeStates = Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttentionParams {
    /// `d_in × d_out` input projection.
    pub proj: Matrix,
    /// `1 × 2·d_out`; the first half scores the attending node, the second the attended one.
    pub attn_vec: Matrix,
    pub leaky_slope: f64,
}

impl GraphAttentionParams {
    pub fn new(proj: Matrix, attn_vec: Matrix, leaky_slope: f64) -> Result<Self> {
        let p = Self { proj, attn_vec, leaky_slope };
        p.validate()?;
        Ok(p)
    }

    /// Identity projection with the given attention vector.
    pub fn unprojected(attn_vec: Matrix, leaky_slope: f64) -> Result<Self> {
        let d = attn_vec.cols() / 2;
        Self::new(Matrix::identity(d), attn_vec, leaky_slope)
    }

    /// Uniform `±1/√d_in` projection, small normal attention vector.
    pub fn init(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            proj: rng.uniform_matrix(d_in, d_out, -bound, bound),
            attn_vec: rng.normal_matrix(1, 2 * d_out, 0.05),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn d_in(&self) -> usize {
        self.proj.rows()
    }

    pub fn d_out(&self) -> usize {
        self.proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attn_vec.rows() != 1 || self.attn_vec.cols() != 2 * self.proj.cols() {
            return Err(shape_err!(
                "attention vector is {}x{}, expected 1x{}",
                self.attn_vec.rows(),
                self.attn_vec.cols(),
                2 * self.proj.cols()
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Domain(format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn halves(&self) -> (&[f64], &[f64]) {
        self.attn_vec.as_slice().split_at(self.d_out())
    }
}

impl ParamSet for GraphAttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "proj"), &self.proj);
        f(join(prefix, "attn_vec"), &self.attn_vec);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f(join(prefix, "proj"), &mut self.proj);
        f(join(prefix, "attn_vec"), &mut self.attn_vec);
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct GraphAttentionCache {
    input: Matrix,
    projected: Matrix,
    /// Pre-LeakyReLU scores `s_i + t_j`.
    logits: Matrix,
    attention: Matrix,
    aggregated: Matrix,
    mask: Vec<bool>,
    slope: f64,
}

impl GraphAttentionCache {
    pub fn attention(&self) -> &Matrix {
        &self.attention
    }

    /// Distance of the nearest LeakyReLU or ReLU input to its kink.
    pub fn kink_margin(&self) -> f64 {
        let n = self.logits.rows();
        let mut m = f64::INFINITY;
        for (idx, &z) in self.logits.as_slice().iter().enumerate() {
            if self.mask[idx] && n > 1 {
                m = m.min(z.abs());
            }
        }
        self.aggregated.as_slice().iter().fold(m, |m, u| m.min(u.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct GraphAttentionOutput {
    pub states: NodeStates,
    /// Row-stochastic `n × n` attention, zero outside the adjacency.
    pub attention: Matrix,
    pub cache: GraphAttentionCache,
}

pub fn graph_attention_forward(
    h: &NodeStates,
    adjacency: &Matrix,
    p: &GraphAttentionParams,
) -> Result<GraphAttentionOutput> {
    p.validate()?;
    let n = h.rows();
    if h.cols() != p.d_in() {
        return Err(shape_err!("node states have width {}, projection expects {}", h.cols(), p.d_in()));
    }
    if adjacency.rows() != n || adjacency.cols() != n {
        return Err(shape_err!("{n} nodes but a {}x{} adjacency", adjacency.rows(), adjacency.cols()));
    }
    validate_adjacency(adjacency)?;
    let mask: Vec<bool> = adjacency.as_slice().iter().map(|&v| v != 0.0).collect();

    let projected = h.matmul(&p.proj)?;
    let (src, dst) = p.halves();
    let s: Vec<f64> = (0..n).map(|i| dot(projected.row(i), src)).collect();
    let t: Vec<f64> = (0..n).map(|j| dot(projected.row(j), dst)).collect();

    let mut logits = Matrix::zeros(n, n);
    let mut attention = Matrix::zeros(n, n);
    let mut beta = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let z = s[i] + t[j];
            logits[(i, j)] = z;
            beta[j] = leaky_relu(z, p.leaky_slope);
        }
        masked_softmax_row(&beta, &mask[i * n..(i + 1) * n], attention.row_mut(i))?;
    }
    let aggregated = attention.matmul(&projected)?;
    let states = aggregated.map(relu);
    Ok(GraphAttentionOutput {
        states,
        attention: attention.clone(),
        cache: GraphAttentionCache {
            input: h.clone(),
            projected,
            logits,
            attention,
            aggregated,
            mask,
            slope: p.leaky_slope,
        },
    })
}

/// Graph attention with every node adjacent to every other.
pub fn self_attention_forward(h: &NodeStates, p: &GraphAttentionParams) -> Result<GraphAttentionOutput> {
    graph_attention_forward(h, &Matrix::filled(h.rows(), h.rows(), 1.0), p)
}

/// Gradients of a graph-attention call.
#[derive(Clone, Debug)]
pub struct GraphAttentionGrads {
    pub input: Matrix,
    pub params: GraphAttentionParams,
}

/// Backpropagates `d_states` (same shape as the forward output).
///
/// `p` must be the parameters the cache was produced with.
pub fn graph_attention_backward(
    cache: &GraphAttentionCache,
    p: &GraphAttentionParams,
    d_states: &Matrix,
) -> Result<GraphAttentionGrads> {
    let n = cache.input.rows();
    let d_out = cache.projected.cols();
    if cache.input.cols() != p.d_in() || d_out != p.d_out() || cache.slope != p.leaky_slope {
        return Err(Error::State("cache was produced with differently shaped parameters".into()));
    }
    if d_states.shape() != (n, d_out) {
        return Err(Error::State(format!(
            "output gradient is {}x{}, forward produced {n}x{d_out}",
            d_states.rows(),
            d_states.cols()
        )));
    }

    // Through the output ReLU.
    let mut d_agg = d_states.clone();
    for (g, &u) in d_agg.as_mut_slice().iter_mut().zip(cache.aggregated.as_slice()) {
        *g *= relu_grad(u);
    }
    let d_attention = d_agg.matmul_nt(&cache.projected)?;
    let mut d_projected = cache.attention.matmul_tn(&d_agg)?;

    // Masked softmax, then LeakyReLU, then the additive score split.
    let mut d_src_score = vec![0.0; n];
    let mut d_dst_score = vec![0.0; n];
    for i in 0..n {
        let a = cache.attention.row(i);
        let da = d_attention.row(i);
        let row_mask = &cache.mask[i * n..(i + 1) * n];
        let mut inner = 0.0;
        for j in 0..n {
            if row_mask[j] {
                inner += a[j] * da[j];
            }
        }
        for j in 0..n {
            if !row_mask[j] {
                continue;
            }
            let d_beta = a[j] * (da[j] - inner);
            let dz = d_beta * leaky_relu_grad(cache.logits[(i, j)], cache.slope);
            d_src_score[i] += dz;
            d_dst_score[j] += dz;
        }
    }

    let (src, dst) = p.halves();
    let mut d_attn_vec = Matrix::zeros(1, 2 * d_out);
    {
        let (d_src, d_dst) = d_attn_vec.as_mut_slice().split_at_mut(d_out);
        for i in 0..n {
            let g = cache.projected.row(i);
            for k in 0..d_out {
                d_src[k] += d_src_score[i] * g[k];
                d_dst[k] += d_dst_score[i] * g[k];
            }
        }
    }
    for i in 0..n {
        let row = d_projected.row_mut(i);
        for k in 0..d_out {
            row[k] += d_src_score[i] * src[k] + d_dst_score[i] * dst[k];
        }
    }

    let d_proj = cache.input.matmul_tn(&d_projected)?;
    let d_input = d_projected.matmul_nt(&p.proj)?;
    Ok(GraphAttentionGrads {
        input: d_input,
        params: GraphAttentionParams { proj: d_proj, attn_vec: d_attn_vec, leaky_slope: p.leaky_slope },
    })
}

/// Fully connected attention written the textbook way: build the full
/// score matrix from concatenated pairs, softmax each row, aggregate.
///
/// Shares no code with [`graph_attention_forward`] beyond the matrix
/// product, so agreement between the two is a real check.
pub fn vanilla_self_attention(h: &NodeStates, p: &GraphAttentionParams) -> Result<(NodeStates, Matrix)> {
    p.validate()?;
    if h.cols() != p.d_in() {
        return Err(shape_err!("node states have width {}, projection expects {}", h.cols(), p.d_in()));
    }
    let n = h.rows();
    let d = p.d_out();
    let g = h.matmul(&p.proj)?;
    let w = p.attn_vec.as_slice();
    let mut attention = Matrix::zeros(n, n);
    let mut pair = vec![0.0; 2 * d];
    for i in 0..n {
        let mut scores = Vec::with_capacity(n);
        for j in 0..n {
            pair[..d].copy_from_slice(g.row(i));
            pair[d..].copy_from_slice(g.row(j));
            scores.push(leaky_relu(dot(w, &pair), p.leaky_slope));
        }
        attention.row_mut(i).copy_from_slice(&softmax_row(&scores)?);
    }
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for k in 0..n {
            let a = attention[(i, k)];
            for c in 0..d {
                out[(i, c)] += a * g[(k, c)];
            }
        }
    }
    Ok((out.map(relu), attention))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
