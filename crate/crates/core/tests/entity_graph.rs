use attnlab_core::entity_graph::*;
use attnlab_core::numerics::{Matrix, SeededRng};
use proptest::prelude::*;

const NAMES: [&str; 6] = ["Paris", "paris", "  PARIS ", "Emil  Wolf", "emil wolf", "Rochester"];

/// Random valid example with up to `max_entities` single- or two-token mentions.
fn random_example(rng: &mut SeededRng, max_entities: usize) -> ContextExample {
    let sentences = 1 + rng.below(4);
    let mut tokens = Vec::new();
    let mut sentence_spans = Vec::new();
    let mut entity_spans = Vec::new();
    let budget = 1 + rng.below(max_entities);
    for s in 0..sentences {
        let start = tokens.len();
        let ents =
            if s + 1 == sentences { budget - entity_spans.len() } else { rng.below(budget - entity_spans.len() + 1) };
        for _ in 0..ents {
            tokens.push("w".to_string());
            let width = 1 + rng.below(2);
            let e = tokens.len();
            for _ in 0..width {
                tokens.push("x".to_string());
            }
            entity_spans.push(EntitySpan {
                start: e,
                end: e + width,
                mention: NAMES[rng.below(NAMES.len())].to_string(),
                sentence_index: s,
            });
        }
        tokens.push(".".to_string());
        sentence_spans.push(TokenRange::new(start, tokens.len()));
    }
    ContextExample { id: "r".into(), tokens, sentence_spans, entity_spans }
}

fn oracle(ex: &ContextExample) -> Vec<Vec<f64>> {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let n = ex.entity_spans.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let ei = &ex.entity_spans[i];
            let ej = &ex.entity_spans[j];
            if i == j || ei.sentence_index == ej.sentence_index || norm(&ei.mention) == norm(&ej.mention) {
                a[i][j] = 1.0;
            }
        }
    }
    a
}

#[test]
fn build_graph_matches_pairwise_rule_oracle() {
    let mut rng = SeededRng::new(3);
    for _ in 0..1000 {
        let ex = random_example(&mut rng, 12);
        let g = build_graph(&ex).unwrap();
        assert!(g.n() <= 12);
        assert_eq!(g.adjacency(), &Matrix::from_rows(&oracle(&ex)).unwrap());
    }
}

#[test]
fn density_matches_popcount_on_random_symmetric_matrices() {
    let mut rng = SeededRng::new(4);
    for _ in 0..1000 {
        let n = 1 + rng.below(8);
        let mut a = Matrix::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.bernoulli(0.4) {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        let ones = a.as_slice().iter().filter(|&&v| v == 1.0).count();
        let g = EntityGraph::new(vec![String::new(); n], a).unwrap();
        assert_eq!(density(&g), ones as f64 / (n * n) as f64);
    }
}

#[test]
fn quantile_boundaries_match_sort_then_index() {
    let mut rng = SeededRng::new(5);
    let quantiles = [0.2, 0.4, 0.6, 0.8, 1.0];
    for _ in 0..1000 {
        let len = 1 + rng.below(100);
        let d: Vec<f64> = (0..len).map(|_| rng.uniform(0.0, 1.0)).collect();
        let report = quantile_partition(&d, &quantiles).unwrap();
        let mut sorted = d.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (bin, q) in report.bins.iter().zip(quantiles) {
            let k = (q * len as f64).ceil() as usize;
            assert_eq!(bin.boundary_density, sorted[k.max(1) - 1]);
        }
        assert_eq!(report.bins.iter().map(|b| b.bin_size).sum::<usize>(), len);
        let mean = d.iter().sum::<f64>() / len as f64;
        assert_eq!(report.mean_density, mean);
    }
}

#[test]
fn constant_densities_share_one_boundary() {
    let r = quantile_partition(&[0.5; 9], &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
    assert!(r.bins.iter().all(|b| b.boundary_density == 0.5));
    assert_eq!(r.bins[0].bin_size, 9);
}

#[test]
fn density_of_complete_graph_is_one() {
    assert_eq!(density(&EntityGraph::fully_connected(4)), 1.0);
    assert_eq!(density(&EntityGraph::new(vec!["a".into(), "b".into()], Matrix::identity(2)).unwrap()), 0.5);
}

proptest! {
    #[test]
    fn adjacency_is_symmetric_with_unit_diagonal(seed in any::<u64>()) {
        let ex = random_example(&mut SeededRng::new(seed), 12);
        let g = build_graph(&ex).unwrap();
        let a = g.adjacency();
        for i in 0..g.n() {
            prop_assert_eq!(a[(i, i)], 1.0);
            for j in 0..g.n() {
                prop_assert_eq!(a[(i, j)], a[(j, i)]);
            }
        }
    }

    #[test]
    fn permuting_spans_permutes_adjacency(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let ex = random_example(&mut rng, 10);
        let n = ex.entity_spans.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = ex.clone();
        shuffled.entity_spans = perm.iter().map(|&p| ex.entity_spans[p].clone()).collect();
        let a = build_graph(&ex).unwrap();
        let b = build_graph(&shuffled).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(b.adjacency()[(i, j)], a.adjacency()[(perm[i], perm[j])]);
            }
        }
    }

    #[test]
    fn adding_an_edge_never_lowers_density(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let g = build_graph(&random_example(&mut rng, 12)).unwrap();
        let (i, j) = (rng.below(g.n()), rng.below(g.n()));
        prop_assert!(density(&g.with_edge(i, j)) >= density(&g));
    }
}
