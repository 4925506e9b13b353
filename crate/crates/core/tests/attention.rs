use attnlab_core::attention::*;
use attnlab_core::numerics::{leaky_relu, Matrix, ParamSet, SeededRng};
use attnlab_core::Error;

fn random_adjacency(rng: &mut SeededRng, n: usize, p: f64) -> Matrix {
    let mut a = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.bernoulli(p) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

/// Per-edge evaluation written out with plain loops.
fn loop_oracle(h: &Matrix, adj: &Matrix, p: &GraphAttentionParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = h.rows();
    let (din, dout) = (p.proj.rows(), p.proj.cols());
    let mut g = vec![vec![0.0; dout]; n];
    for i in 0..n {
        for k in 0..dout {
            for m in 0..din {
                g[i][k] += h[(i, m)] * p.proj[(m, k)];
            }
        }
    }
    let w = p.attn_vec.as_slice();
    let mut alpha = vec![vec![0.0; n]; n];
    let mut out = vec![vec![0.0; dout]; n];
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&j| adj[(i, j)] == 1.0).collect();
        let beta: Vec<f64> = nbrs
            .iter()
            .map(|&j| {
                let z: f64 = (0..dout).map(|k| w[k] * g[i][k] + w[dout + k] * g[j][k]).sum();
                leaky_relu(z, p.leaky_slope)
            })
            .collect();
        let m = beta.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = beta.iter().map(|b| (b - m).exp()).sum();
        for (&j, b) in nbrs.iter().zip(&beta) {
            alpha[i][j] = (b - m).exp() / z;
        }
        for k in 0..dout {
            let s: f64 = nbrs.iter().map(|&j| alpha[i][j] * g[j][k]).sum();
            out[i][k] = s.max(0.0);
        }
    }
    (out, alpha)
}

fn assert_close(a: &Matrix, b: &[Vec<f64>], tol: f64) {
    let b = Matrix::from_rows(b).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= tol, "deviation {}", a.max_abs_diff(&b).unwrap());
}

#[test]
fn single_node_passes_relu_through() {
    let p = GraphAttentionParams::unprojected(Matrix::from_rows(&[[0.3, -0.7]]).unwrap(), 0.2).unwrap();
    let h = Matrix::from_rows(&[[-2.0]]).unwrap();
    let out = graph_attention_forward(&h, &Matrix::identity(1), &p).unwrap();
    assert_eq!(out.attention.as_slice(), &[1.0]);
    assert_eq!(out.states.as_slice(), &[0.0]);
    assert_eq!(self_attention_forward(&h, &p).unwrap().states, out.states);
}

#[test]
fn zero_attention_vector_averages_uniformly() {
    let p = GraphAttentionParams::unprojected(Matrix::zeros(1, 2), 0.2).unwrap();
    let h = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
    let out = self_attention_forward(&h, &p).unwrap();
    assert_eq!(out.attention.as_slice(), &[0.5; 4]);
    assert_eq!(out.states.as_slice(), &[0.0, 0.0]);
}

#[test]
fn graph_attention_matches_loop_oracle() {
    let mut rng = SeededRng::new(8);
    for _ in 0..50 {
        let p = GraphAttentionParams::init(3, 3, &mut rng);
        let h = rng.uniform_matrix(5, 3, -2.0, 2.0);
        let adj = random_adjacency(&mut rng, 5, 0.5);
        let out = graph_attention_forward(&h, &adj, &p).unwrap();
        let (want, alpha) = loop_oracle(&h, &adj, &p);
        assert_close(&out.states, &want, 1e-12);
        assert_close(&out.attention, &alpha, 1e-12);
    }
    let p = GraphAttentionParams::init(4, 4, &mut rng);
    let h = rng.uniform_matrix(8, 4, -2.0, 2.0);
    let (want, _) = loop_oracle(&h, &Matrix::filled(8, 8, 1.0), &p);
    assert_close(&self_attention_forward(&h, &p).unwrap().states, &want, 1e-12);
}

#[test]
fn degeneracy_holds_bitwise_and_against_independent_code() {
    let mut rng = SeededRng::new(9);
    for _ in 0..200 {
        let n = 1 + rng.below(32);
        let d = 1 + rng.below(16);
        let p = GraphAttentionParams::init(d, d, &mut rng);
        let h = rng.uniform_matrix(n, d, -1.0, 1.0);
        let sa = self_attention_forward(&h, &p).unwrap();
        let ga = graph_attention_forward(&h, &Matrix::filled(n, n, 1.0), &p).unwrap();
        assert_eq!(sa.states, ga.states);
        assert_eq!(sa.attention, ga.attention);
        let (vanilla, alpha) = vanilla_self_attention(&h, &p).unwrap();
        assert!(vanilla.max_abs_diff(&ga.states).unwrap() <= 1e-12);
        assert!(alpha.max_abs_diff(&ga.attention).unwrap() <= 1e-12);
    }
}

#[test]
fn masked_entries_are_exactly_zero() {
    let mut rng = SeededRng::new(10);
    for _ in 0..200 {
        let n = 1 + rng.below(20);
        let p = GraphAttentionParams::init(4, 3, &mut rng);
        let h = rng.uniform_matrix(n, 4, -3.0, 3.0);
        let adj = random_adjacency(&mut rng, n, 0.3);
        let a = graph_attention_forward(&h, &adj, &p).unwrap().attention;
        for i in 0..n {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..n {
                if adj[(i, j)] == 0.0 {
                    assert_eq!(a[(i, j)].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}

#[test]
fn perturbing_a_non_neighbor_leaves_a_node_unchanged() {
    let mut rng = SeededRng::new(11);
    for _ in 0..100 {
        let n = 2 + rng.below(10);
        let p = GraphAttentionParams::init(3, 3, &mut rng);
        let h = rng.uniform_matrix(n, 3, -1.0, 1.0);
        let adj = random_adjacency(&mut rng, n, 0.3);
        let base = graph_attention_forward(&h, &adj, &p).unwrap().states;
        let j = rng.below(n);
        let mut h2 = h.clone();
        for k in 0..3 {
            h2[(j, k)] += rng.uniform(0.5, 1.0);
        }
        let moved = graph_attention_forward(&h2, &adj, &p).unwrap().states;
        for i in (0..n).filter(|&i| adj[(i, j)] == 0.0) {
            assert_eq!(base.row(i), moved.row(i), "node {i} saw a change at non-neighbour {j}");
        }
    }
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, k| m[(perm[i], k)])
}

fn permute_both(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(perm[i], perm[j])])
}

#[test]
fn relabelling_nodes_permutes_outputs() {
    let mut rng = SeededRng::new(12);
    for _ in 0..100 {
        let n = 1 + rng.below(12);
        let p = GraphAttentionParams::init(4, 4, &mut rng);
        let h = rng.uniform_matrix(n, 4, -1.0, 1.0);
        let adj = random_adjacency(&mut rng, n, 0.4);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let base = graph_attention_forward(&h, &adj, &p).unwrap();
        let moved = graph_attention_forward(&permute_rows(&h, &perm), &permute_both(&adj, &perm), &p).unwrap();
        assert!(moved.states.max_abs_diff(&permute_rows(&base.states, &perm)).unwrap() <= 1e-12);
        assert!(moved.attention.max_abs_diff(&permute_both(&base.attention, &perm)).unwrap() <= 1e-12);
    }
}

#[test]
fn equal_states_give_zero_attention_vector_gradient() {
    let p = GraphAttentionParams::unprojected(Matrix::zeros(1, 6), 0.2).unwrap();
    let h = Matrix::from_rows(&[[0.5, 1.0, 2.0]; 4]).unwrap();
    let out = self_attention_forward(&h, &p).unwrap();
    let g = graph_attention_backward(&out.cache, &p, &Matrix::filled(4, 3, 1.0)).unwrap();
    assert!(g.params.attn_vec.max_abs() <= 1e-15);
}

#[test]
fn shape_mismatches_are_reported() {
    let p = GraphAttentionParams::init(3, 2, &mut SeededRng::new(1));
    assert!(matches!(graph_attention_forward(&Matrix::zeros(2, 4), &Matrix::identity(2), &p), Err(Error::Shape(_))));
    assert!(matches!(graph_attention_forward(&Matrix::zeros(2, 3), &Matrix::identity(3), &p), Err(Error::Shape(_))));
    assert!(matches!(
        graph_attention_forward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &p),
        Err(Error::Validation(_))
    ));
}

/// Scaled dot-product attention of one head, spelled out with loops.
fn head_loop(x: &Matrix, l: &TransformerLayerParams, head: usize, dh: usize, pad: &[bool]) -> Vec<Vec<f64>> {
    let (len, d) = x.shape();
    let proj = |w: &Matrix, b: Option<&Matrix>, i: usize, k: usize| {
        let c = head * dh + k;
        (0..d).map(|m| x[(i, m)] * w[(m, c)]).sum::<f64>() + b.map_or(0.0, |b| b[(0, c)])
    };
    let mut a = vec![vec![0.0; len]; len];
    for i in 0..len {
        let scores: Vec<f64> = (0..len)
            .map(|j| {
                (0..dh).map(|k| proj(&l.wq, Some(&l.bq), i, k) * proj(&l.wk, None, j, k)).sum::<f64>()
                    / (dh as f64).sqrt()
            })
            .collect();
        let m = (0..len).filter(|&j| !pad[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
        let z: f64 = (0..len).filter(|&j| !pad[j]).map(|j| (scores[j] - m).exp()).sum();
        for j in (0..len).filter(|&j| !pad[j]) {
            a[i][j] = (scores[j] - m).exp() / z;
        }
    }
    a
}

#[test]
fn first_layer_heads_match_loop_reference() {
    let mut rng = SeededRng::new(13);
    let p = TransformerParams::init(2, 12, 3, 10, &mut rng);
    let x = rng.uniform_matrix(6, 12, -1.0, 1.0);
    let pad = [false, false, true, false, false, false];
    let out = transformer_forward(&x, &p, Some(&pad)).unwrap();
    for h in 0..3 {
        assert_close(&out.traces[0][h], &head_loop(&x, &p.layers[0], h, 4, &pad), 1e-12);
    }
}

#[test]
fn transformer_is_permutation_equivariant_without_positions() {
    let mut rng = SeededRng::new(14);
    let p = TransformerParams::init(2, 8, 2, 8, &mut rng);
    let x = rng.uniform_matrix(6, 8, -1.0, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let base = transformer_forward(&x, &p, None).unwrap();
    let moved = transformer_forward(&permute_rows(&x, &perm), &p, None).unwrap();
    assert!(moved.output.max_abs_diff(&permute_rows(&base.output, &perm)).unwrap() <= 1e-12);
    for (lb, lm) in base.traces.iter().zip(&moved.traces) {
        for (a, b) in lb.iter().zip(lm) {
            assert!(b.max_abs_diff(&permute_both(a, &perm)).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn padded_positions_receive_no_key_or_value_gradient() {
    let mut rng = SeededRng::new(15);
    let p = TransformerParams::init(1, 8, 2, 8, &mut rng);
    let x = rng.uniform_matrix(5, 8, -1.0, 1.0);
    let pad = [false, true, false, false, true];
    let out = transformer_forward(&x, &p, Some(&pad)).unwrap();
    // Only the unpadded rows feed the loss, so padded rows are reachable solely as keys/values.
    let mut w = rng.uniform_matrix(5, 8, -1.0, 1.0);
    for j in [1, 4] {
        w.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
    }
    let g = transformer_backward(&out.cache, &p, &w).unwrap();
    for j in [1, 4] {
        assert!(g.input.row(j).iter().all(|&v| v == 0.0), "padded row {j} got gradient");
    }
    assert!(g.params.num_params() == p.num_params());
}

#[test]
fn segments_run_like_separate_sequences() {
    let mut rng = SeededRng::new(16);
    let p = TransformerParams::init(2, 8, 2, 8, &mut rng);
    let x = rng.uniform_matrix(9, 8, -1.0, 1.0);
    let pad = [false, false, true, false, false, false, false, true, false];
    let segs = [0..4, 4..9];
    let (cache, out) = transformer_forward_segments(&x, &p, Some(&pad), &segs).unwrap();
    let w = rng.uniform_matrix(9, 8, -1.0, 1.0);
    let g = transformer_backward(&cache, &p, &w).unwrap();
    let rows = |m: &Matrix, r: std::ops::Range<usize>| Matrix::from_fn(r.len(), m.cols(), |i, j| m[(r.start + i, j)]);
    let mut wgrad = Matrix::zeros(8, 8);
    for (s, seg) in segs.iter().enumerate() {
        let alone = transformer_forward(&rows(&x, seg.clone()), &p, Some(&pad[seg.clone()])).unwrap();
        assert!(alone.output.max_abs_diff(&rows(&out, seg.clone())).unwrap() <= 1e-12);
        assert_eq!(alone.traces, cache.traces(s));
        let ga = transformer_backward(&alone.cache, &p, &rows(&w, seg.clone())).unwrap();
        assert!(ga.input.max_abs_diff(&rows(&g.input, seg.clone())).unwrap() <= 1e-12);
        wgrad.add_assign(&ga.params.layers[0].wq).unwrap();
    }
    assert!(wgrad.max_abs_diff(&g.params.layers[0].wq).unwrap() <= 1e-12);
    assert!(transformer_forward_segments(&x, &p, None, &[0..4, 5..9]).is_err());
    assert!(transformer_forward_segments(&x, &p, Some(&pad), &[0..4, 4..7, 7..8, 8..9]).is_err());
}
