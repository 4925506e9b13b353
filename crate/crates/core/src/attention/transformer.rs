//! Multi-head Transformer encoder stack with hand-written backward pass.
//!
//! Post-norm by default (`LN(x + Attn(x))`, then `LN(y + FFN(y))`); the
//! pre-norm arrangement is available through [`NormPlacement::Pre`]. No
//! positional encoding is applied here, so the stack is permutation
//! equivariant over rows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::params::join;
use crate::numerics::{masked_softmax_row, relu, relu_grad, Matrix, ParamSet, SeededRng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    Post,
    Pre,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub wq: Matrix,
    pub bq: Matrix,
    /// Keys carry no bias: softmax is invariant to a per-query shift, so it
    /// would never receive gradient.
    pub wk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ff1: Matrix,
    pub ff1_bias: Matrix,
    pub ff2: Matrix,
    pub ff2_bias: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl TransformerLayerParams {
    pub fn init(model_dim: usize, ff_dim: usize, rng: &mut SeededRng) -> Self {
        let d = model_dim;
        // Q/K/V share one Xavier bound over the stacked (3d × d) projection.
        let qkv = (6.0 / (4 * d) as f64).sqrt();
        let out = 1.0 / (d as f64).sqrt();
        let ff_in = 1.0 / (d as f64).sqrt();
        let ff_out = 1.0 / (ff_dim as f64).sqrt();
        Self {
            wq: rng.uniform_matrix(d, d, -qkv, qkv),
            bq: Matrix::zeros(1, d),
            wk: rng.uniform_matrix(d, d, -qkv, qkv),
            wv: rng.uniform_matrix(d, d, -qkv, qkv),
            bv: Matrix::zeros(1, d),
            wo: rng.uniform_matrix(d, d, -out, out),
            bo: Matrix::zeros(1, d),
            ff1: rng.uniform_matrix(d, ff_dim, -ff_in, ff_in),
            ff1_bias: rng.uniform_matrix(1, ff_dim, -ff_in, ff_in),
            ff2: rng.uniform_matrix(ff_dim, d, -ff_out, ff_out),
            ff2_bias: rng.uniform_matrix(1, d, -ff_out, ff_out),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    fn validate(&self, d: usize) -> Result<()> {
        let ff = self.ff1.cols();
        let expect: [(&str, &Matrix, (usize, usize)); 15] = [
            ("wq", &self.wq, (d, d)),
            ("bq", &self.bq, (1, d)),
            ("wk", &self.wk, (d, d)),
            ("wv", &self.wv, (d, d)),
            ("bv", &self.bv, (1, d)),
            ("wo", &self.wo, (d, d)),
            ("bo", &self.bo, (1, d)),
            ("ff1", &self.ff1, (d, ff)),
            ("ff1_bias", &self.ff1_bias, (1, ff)),
            ("ff2", &self.ff2, (ff, d)),
            ("ff2_bias", &self.ff2_bias, (1, d)),
            ("ln1_gain", &self.ln1_gain, (1, d)),
            ("ln1_bias", &self.ln1_bias, (1, d)),
            ("ln2_gain", &self.ln2_gain, (1, d)),
            ("ln2_bias", &self.ln2_bias, (1, d)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(shape_err!("{name} is {:?}, expected {:?}", m.shape(), shape));
            }
        }
        Ok(())
    }
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(wq, bq, wk, wv, bv, wo, bo, ff1, ff1_bias, ff2, ff2_bias, ln1_gain, ln1_bias, ln2_gain, ln2_bias)
    };
}

impl ParamSet for TransformerLayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        macro_rules! go { ($($field:ident),*) => { $( f(join(prefix, stringify!($field)), &self.$field); )* } }
        layer_fields!(go);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        macro_rules! go { ($($field:ident),*) => { $( f(join(prefix, stringify!($field)), &mut self.$field); )* } }
        layer_fields!(go);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub layers: Vec<TransformerLayerParams>,
    pub num_heads: usize,
    pub norm: NormPlacement,
}

impl TransformerParams {
    pub fn init(num_layers: usize, model_dim: usize, num_heads: usize, ff_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            layers: (0..num_layers).map(|_| TransformerLayerParams::init(model_dim, ff_dim, rng)).collect(),
            num_heads,
            norm: NormPlacement::Post,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.layers.first().map_or(0, TransformerLayerParams::model_dim)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Domain("a Transformer needs at least one layer".into()));
        }
        let d = self.model_dim();
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Domain(format!("{} heads do not divide model dimension {d}", self.num_heads)));
        }
        self.layers.iter().try_for_each(|l| l.validate(d))
    }
}

impl ParamSet for TransformerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

#[derive(Clone, Debug)]
struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LayerNormCache) {
    let (rows, d) = x.shape();
    let mut normalized = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    let (g, b) = (gain.as_slice(), bias.as_slice());
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let nr = normalized.row_mut(i);
        for k in 0..d {
            nr[k] = (r[k] - mean) * inv;
        }
        let or = out.row_mut(i);
        for k in 0..d {
            or[k] = nr[k] * g[k] + b[k];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Matrix,
    dy: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let (rows, d) = dy.shape();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.normalized.row(i);
        let dg = d_gain.as_mut_slice();
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
        }
        let db = d_bias.as_mut_slice();
        for k in 0..d {
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
        }
        let sum: f64 = dxhat.iter().sum();
        let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let inv = cache.inv_std[i];
        let dr = dx.row_mut(i);
        for k in 0..d {
            dr[k] = inv / d as f64 * (d as f64 * dxhat[k] - sum - xh[k] * dot);
        }
    }
    dx
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b.as_slice())?;
    Ok(y)
}

/// `dW += xᵀ dy`, `db += Σ_rows dy`, returns `dx = dy Wᵀ`.
fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Result<Matrix> {
    dw.add_assign(&x.matmul_tn(dy)?)?;
    db.add_assign(&dy.col_sums())?;
    dy.matmul_nt(w)
}

/// Rows `rows` and the columns of `head` from `m`.
fn head_block(m: &Matrix, rows: &Range<usize>, head: usize, dh: usize) -> Matrix {
    Matrix::from_fn(rows.len(), dh, |i, k| m[(rows.start + i, head * dh + k)])
}

fn add_head_block(dst: &mut Matrix, block: &Matrix, rows: &Range<usize>, head: usize, dh: usize) {
    for i in 0..block.rows() {
        let row = dst.row_mut(rows.start + i);
        for k in 0..dh {
            row[head * dh + k] += block[(i, k)];
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `probs[head][segment]`.
    probs: Vec<Vec<Matrix>>,
    concat: Matrix,
}

fn multi_head_attention(
    x: &Matrix,
    l: &TransformerLayerParams,
    heads: usize,
    allowed: &[bool],
    segments: &[Range<usize>],
) -> Result<(Matrix, AttentionCache)> {
    let (len, d) = x.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(x, &l.wq, &l.bq)?;
    let k = x.matmul(&l.wk)?;
    let v = affine(x, &l.wv, &l.bv)?;
    let mut concat = Matrix::zeros(len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut per_segment = Vec::with_capacity(segments.len());
        for seg in segments {
            let qh = head_block(&q, seg, h, dh);
            let kh = head_block(&k, seg, h, dh);
            let vh = head_block(&v, seg, h, dh);
            let scores = qh.matmul_nt(&kh)?.scale(scale);
            let mut p = Matrix::zeros(seg.len(), seg.len());
            for i in 0..seg.len() {
                masked_softmax_row(scores.row(i), &allowed[seg.clone()], p.row_mut(i))?;
            }
            add_head_block(&mut concat, &p.matmul(&vh)?, seg, h, dh);
            per_segment.push(p);
        }
        probs.push(per_segment);
    }
    let out = affine(&concat, &l.wo, &l.bo)?;
    Ok((out, AttentionCache { input: x.clone(), q, k, v, probs, concat }))
}

fn multi_head_attention_backward(
    c: &AttentionCache,
    l: &TransformerLayerParams,
    g: &mut TransformerLayerParams,
    d_out: &Matrix,
    segments: &[Range<usize>],
) -> Result<Matrix> {
    let heads = c.probs.len();
    let (len, d) = c.input.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_concat = affine_backward(&c.concat, &l.wo, d_out, &mut g.wo, &mut g.bo)?;
    let mut dq = Matrix::zeros(len, d);
    let mut dk = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    for h in 0..heads {
        for (seg, p) in segments.iter().zip(&c.probs[h]) {
            let n = seg.len();
            let d_oh = head_block(&d_concat, seg, h, dh);
            let vh = head_block(&c.v, seg, h, dh);
            let d_p = d_oh.matmul_nt(&vh)?;
            add_head_block(&mut dv, &p.matmul_tn(&d_oh)?, seg, h, dh);
            let mut d_scores = Matrix::zeros(n, n);
            for i in 0..n {
                let pr = p.row(i);
                let dpr = d_p.row(i);
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                let dsr = d_scores.row_mut(i);
                for j in 0..n {
                    dsr[j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            add_head_block(&mut dq, &d_scores.matmul(&head_block(&c.k, seg, h, dh))?, seg, h, dh);
            add_head_block(&mut dk, &d_scores.matmul_tn(&head_block(&c.q, seg, h, dh))?, seg, h, dh);
        }
    }
    let mut dx = affine_backward(&c.input, &l.wq, &dq, &mut g.wq, &mut g.bq)?;
    g.wk.add_assign(&c.input.matmul_tn(&dk)?)?;
    dx.add_assign(&dk.matmul_nt(&l.wk)?)?;
    dx.add_assign(&affine_backward(&c.input, &l.wv, &dv, &mut g.wv, &mut g.bv)?)?;
    Ok(dx)
}

#[derive(Clone, Debug)]
struct LayerCache {
    attn: AttentionCache,
    ln1: LayerNormCache,
    ln2: LayerNormCache,
    /// Input to the feed-forward block.
    ff_input: Matrix,
    ff_hidden_pre: Matrix,
    ff_hidden: Matrix,
}

#[derive(Clone, Debug)]
pub struct TransformerCache {
    layers: Vec<LayerCache>,
    segments: Vec<Range<usize>>,
    norm: NormPlacement,
    heads: usize,
    len: usize,
    model_dim: usize,
}

impl TransformerCache {
    /// `traces[layer][head]` restricted to one segment.
    pub fn traces(&self, segment: usize) -> Vec<Vec<Matrix>> {
        self.layers.iter().map(|l| l.attn.probs.iter().map(|h| h[segment].clone()).collect()).collect()
    }

    /// Distance of the nearest feed-forward ReLU input to zero, divided by the
    /// largest LayerNorm `1/σ`. A nearly constant row makes the norm amplify small
    /// input steps, so a raw ReLU margin alone overstates how far away the kink is.
    pub fn kink_margin(&self) -> f64 {
        let relu = self
            .layers
            .iter()
            .flat_map(|l| l.ff_hidden_pre.as_slice().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let gain =
            self.layers.iter().flat_map(|l| l.ln1.inv_std.iter().chain(&l.ln2.inv_std)).fold(1.0f64, |m, &v| m.max(v));
        relu / gain
    }
}

#[derive(Clone, Debug)]
pub struct TransformerOutput {
    pub output: Matrix,
    /// `traces[layer][head]` is the `L × L` attention of that head.
    pub traces: Vec<Vec<Matrix>>,
    pub cache: TransformerCache,
}

/// Runs the encoder stack over `x` (`L × model_dim`).
///
/// `pad_mask[j] == true` removes position `j` from every softmax as a key.
pub fn transformer_forward(x: &Matrix, p: &TransformerParams, pad_mask: Option<&[bool]>) -> Result<TransformerOutput> {
    let cache = transformer_forward_segments(x, p, pad_mask, std::slice::from_ref(&(0..x.rows())))?;
    Ok(TransformerOutput { output: cache.1, traces: cache.0.traces(0), cache: cache.0 })
}

/// Runs independent sequences stacked row-wise in `x` through the stack at once.
///
/// `segments` must tile `0..L` in order; attention never crosses a segment
/// boundary, so each segment's output equals running it on its own.
pub fn transformer_forward_segments(
    x: &Matrix,
    p: &TransformerParams,
    pad_mask: Option<&[bool]>,
    segments: &[Range<usize>],
) -> Result<(TransformerCache, Matrix)> {
    p.validate()?;
    let (len, d) = x.shape();
    if d != p.model_dim() {
        return Err(shape_err!("input width {d} but model dimension {}", p.model_dim()));
    }
    x.ensure_finite("transformer input")?;
    let allowed: Vec<bool> = match pad_mask {
        None => vec![true; len],
        Some(m) if m.len() == len => m.iter().map(|&pad| !pad).collect(),
        Some(m) => return Err(shape_err!("padding mask of length {} for {len} positions", m.len())),
    };
    let mut next_start = 0;
    for seg in segments {
        if seg.start != next_start || seg.end < seg.start {
            return Err(Error::Domain(format!("segments must tile 0..{len} in order; got {segments:?}")));
        }
        if !seg.is_empty() && !allowed[seg.clone()].iter().any(|&a| a) {
            return Err(Error::Domain(format!("every position of segment {seg:?} is padded")));
        }
        next_start = seg.end;
    }
    if next_start != len {
        return Err(Error::Domain(format!("segments must tile 0..{len} in order; got {segments:?}")));
    }

    let mut h = x.clone();
    let mut caches = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (next, cache) = match p.norm {
            NormPlacement::Post => {
                let (a, attn) = multi_head_attention(&h, l, p.num_heads, &allowed, segments)?;
                let (y, ln1) = layer_norm(&h.add(&a)?, &l.ln1_gain, &l.ln1_bias);
                let pre = affine(&y, &l.ff1, &l.ff1_bias)?;
                let hid = pre.map(relu);
                let f = affine(&hid, &l.ff2, &l.ff2_bias)?;
                let (z, ln2) = layer_norm(&y.add(&f)?, &l.ln2_gain, &l.ln2_bias);
                (z, LayerCache { attn, ln1, ln2, ff_input: y, ff_hidden_pre: pre, ff_hidden: hid })
            }
            NormPlacement::Pre => {
                let (xn, ln1) = layer_norm(&h, &l.ln1_gain, &l.ln1_bias);
                let (a, attn) = multi_head_attention(&xn, l, p.num_heads, &allowed, segments)?;
                let r = h.add(&a)?;
                let (yn, ln2) = layer_norm(&r, &l.ln2_gain, &l.ln2_bias);
                let pre = affine(&yn, &l.ff1, &l.ff1_bias)?;
                let hid = pre.map(relu);
                let f = affine(&hid, &l.ff2, &l.ff2_bias)?;
                (r.add(&f)?, LayerCache { attn, ln1, ln2, ff_input: yn, ff_hidden_pre: pre, ff_hidden: hid })
            }
        };
        caches.push(cache);
        h = next;
    }
    let cache = TransformerCache {
        layers: caches,
        segments: segments.to_vec(),
        norm: p.norm,
        heads: p.num_heads,
        len,
        model_dim: d,
    };
    Ok((cache, h))
}

#[derive(Clone, Debug)]
pub struct TransformerGrads {
    pub input: Matrix,
    pub params: TransformerParams,
}

pub fn transformer_backward(
    cache: &TransformerCache,
    p: &TransformerParams,
    d_output: &Matrix,
) -> Result<TransformerGrads> {
    if cache.layers.len() != p.layers.len()
        || cache.heads != p.num_heads
        || cache.norm != p.norm
        || cache.model_dim != p.model_dim()
    {
        return Err(Error::State("cache does not match these Transformer parameters".into()));
    }
    if d_output.shape() != (cache.len, cache.model_dim) {
        return Err(Error::State(format!(
            "output gradient is {}x{}, forward produced {}x{}",
            d_output.rows(),
            d_output.cols(),
            cache.len,
            cache.model_dim
        )));
    }
    let mut grads = p.clone();
    grads.zero();
    let mut dh = d_output.clone();
    for (idx, (l, c)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[idx];
        dh = match p.norm {
            NormPlacement::Post => {
                let d_r2 = layer_norm_backward(&c.ln2, &l.ln2_gain, &dh, &mut g.ln2_gain, &mut g.ln2_bias);
                let mut d_hid = affine_backward(&c.ff_hidden, &l.ff2, &d_r2, &mut g.ff2, &mut g.ff2_bias)?;
                relu_mask(&mut d_hid, &c.ff_hidden_pre);
                let mut dy = affine_backward(&c.ff_input, &l.ff1, &d_hid, &mut g.ff1, &mut g.ff1_bias)?;
                dy.add_assign(&d_r2)?;
                let d_r1 = layer_norm_backward(&c.ln1, &l.ln1_gain, &dy, &mut g.ln1_gain, &mut g.ln1_bias);
                let mut dx = multi_head_attention_backward(&c.attn, l, g, &d_r1, &cache.segments)?;
                dx.add_assign(&d_r1)?;
                dx
            }
            NormPlacement::Pre => {
                let mut d_hid = affine_backward(&c.ff_hidden, &l.ff2, &dh, &mut g.ff2, &mut g.ff2_bias)?;
                relu_mask(&mut d_hid, &c.ff_hidden_pre);
                let d_yn = affine_backward(&c.ff_input, &l.ff1, &d_hid, &mut g.ff1, &mut g.ff1_bias)?;
                let mut d_r = layer_norm_backward(&c.ln2, &l.ln2_gain, &d_yn, &mut g.ln2_gain, &mut g.ln2_bias);
                d_r.add_assign(&dh)?;
                let d_xn = multi_head_attention_backward(&c.attn, l, g, &d_r, &cache.segments)?;
                let mut dx = layer_norm_backward(&c.ln1, &l.ln1_gain, &d_xn, &mut g.ln1_gain, &mut g.ln1_bias);
                dx.add_assign(&d_r)?;
                dx
            }
        };
    }
    Ok(TransformerGrads { input: dh, params: grads })
}

fn relu_mask(d: &mut Matrix, pre: &Matrix) {
    for (g, &z) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *g *= relu_grad(z);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, norm: NormPlacement) -> (TransformerParams, Matrix) {
        let mut rng = SeededRng::new(seed);
        let mut p = TransformerParams::init(2, 8, 2, 6, &mut rng);
        p.norm = norm;
        // Non-trivial layer-norm parameters so their gradients are exercised.
        for l in &mut p.layers {
            l.ln1_gain = rng.uniform_matrix(1, 8, 0.5, 1.5);
            l.ln2_bias = rng.uniform_matrix(1, 8, -0.5, 0.5);
            l.bq = rng.uniform_matrix(1, 8, -0.2, 0.2);
        }
        let x = rng.uniform_matrix(5, 8, -1.0, 1.0);
        (p, x)
    }

    #[test]
    fn traces_are_row_stochastic_over_unpadded_keys() {
        let (p, x) = small(1, NormPlacement::Post);
        let pad = [false, false, true, false, true];
        let out = transformer_forward(&x, &p, Some(&pad)).unwrap();
        assert_eq!(out.traces.len(), 2);
        for layer in &out.traces {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for i in 0..5 {
                    let r = a.row(i);
                    assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    assert_eq!(r[2], 0.0);
                    assert_eq!(r[4], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        for norm in [NormPlacement::Post, NormPlacement::Pre] {
            let (p, x) = small(2, norm);
            let out = transformer_forward(&x, &p, None).unwrap();
            let g = transformer_backward(&out.cache, &p, &Matrix::zeros(5, 8)).unwrap();
            assert_eq!(g.input.max_abs(), 0.0);
            assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_shapes_and_head_counts() {
        let (mut p, x) = small(3, NormPlacement::Post);
        assert!(matches!(transformer_forward(&Matrix::zeros(3, 7), &p, None), Err(Error::Shape(_))));
        assert!(transformer_forward(&x, &p, Some(&[true; 5])).is_err());
        assert!(transformer_forward(&x, &p, Some(&[false; 4])).is_err());
        p.num_heads = 3;
        assert!(transformer_forward(&x, &p, None).is_err());
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let (p, x) = small(4, NormPlacement::Post);
        let out = transformer_forward(&x, &p, None).unwrap();
        let mut q = p.clone();
        q.norm = NormPlacement::Pre;
        assert!(matches!(transformer_backward(&out.cache, &q, &Matrix::zeros(5, 8)), Err(Error::State(_))));
        assert!(matches!(transformer_backward(&out.cache, &p, &Matrix::zeros(4, 8)), Err(Error::State(_))));
    }

    #[test]
    fn layer_norm_output_is_standardized_before_affine() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (y, _) = layer_norm(&x, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4));
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }
}
