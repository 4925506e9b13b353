//! Entity graphs built from annotated contexts, plus adjacency-density analytics.
//!
//! Two mentions are connected when their (normalized) surface text is equal
//! or when they sit in the same sentence. Every node carries a self-loop, and
//! density counts the diagonal.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Half-open token range `[start, end)`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains_range(&self, start: usize, end: usize) -> bool {
        self.start <= start && end <= self.end
    }
}

impl From<[usize; 2]> for TokenRange {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenRange> for [usize; 2] {
    fn from(r: TokenRange) -> Self {
        [r.start, r.end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub mention: String,
    pub sentence_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub sentence_spans: Vec<TokenRange>,
    pub entity_spans: Vec<EntitySpan>,
}

impl ContextExample {
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        let mut prev_end = 0;
        for (i, s) in self.sentence_spans.iter().enumerate() {
            if s.start > s.end || s.end > len {
                return Err(Error::Validation(format!(
                    "example {}: sentence {i} [{}, {}) lies outside the {len} tokens",
                    self.id, s.start, s.end
                )));
            }
            if s.start < prev_end {
                return Err(Error::Validation(format!(
                    "example {}: sentence {i} [{}, {}) overlaps or precedes the previous sentence",
                    self.id, s.start, s.end
                )));
            }
            prev_end = s.end;
        }
        for (i, e) in self.entity_spans.iter().enumerate() {
            if e.end <= e.start {
                return Err(Error::Validation(format!(
                    "example {}: entity span {i} ({:?}, tokens {}..{}) is empty",
                    self.id, e.mention, e.start, e.end
                )));
            }
            let Some(sentence) = self.sentence_spans.get(e.sentence_index) else {
                return Err(Error::Validation(format!(
                    "example {}: entity span {i} ({:?}) names sentence {} but only {} exist",
                    self.id,
                    e.mention,
                    e.sentence_index,
                    self.sentence_spans.len()
                )));
            };
            if !sentence.contains_range(e.start, e.end) {
                return Err(Error::Validation(format!(
                    "example {}: entity span {i} ({:?}, tokens {}..{}) is not inside sentence {} [{}, {})",
                    self.id, e.mention, e.start, e.end, e.sentence_index, sentence.start, sentence.end
                )));
            }
        }
        Ok(())
    }

    /// Index of the sentence containing `token`, if any.
    pub fn sentence_of(&self, token: usize) -> Option<usize> {
        self.sentence_spans.iter().position(|s| s.start <= token && token < s.end)
    }
}

/// Parses and validates one JSONL record per non-blank line.
///
/// Errors carry the 1-based line number.
pub fn read_context_jsonl<R: BufRead>(reader: R) -> Result<Vec<ContextExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Validation(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let example: ContextExample =
            serde_json::from_str(&line).map_err(|e| Error::Validation(format!("line {lineno}: {e}")))?;
        example.validate().map_err(|e| Error::Validation(format!("line {lineno}: {e}")))?;
        out.push(example);
    }
    Ok(out)
}

/// How mention strings are compared by the same-mention rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionMode {
    /// Case-folded, trimmed, internal whitespace collapsed.
    #[default]
    Normalized,
    Exact,
}

pub fn normalize_mention(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct EntityGraph {
    n: usize,
    mentions: Vec<String>,
    adjacency: Matrix,
}

#[derive(Deserialize)]
struct RawGraph {
    n: usize,
    mentions: Vec<String>,
    adjacency: Matrix,
}

impl TryFrom<RawGraph> for EntityGraph {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        let g = EntityGraph::new(raw.mentions, raw.adjacency)?;
        if g.n != raw.n {
            return Err(Error::Validation(format!("graph declares n = {} but has {} nodes", raw.n, g.n)));
        }
        Ok(g)
    }
}

impl EntityGraph {
    /// Checks symmetry, unit diagonal and binary entries.
    pub fn new(mentions: Vec<String>, adjacency: Matrix) -> Result<Self> {
        let n = mentions.len();
        if adjacency.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "{n} mentions but a {}x{} adjacency",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        validate_adjacency(&adjacency)?;
        Ok(Self { n, mentions, adjacency })
    }

    /// All-ones adjacency over `n` anonymous nodes.
    pub fn fully_connected(n: usize) -> Self {
        Self { n, mentions: vec![String::new(); n], adjacency: Matrix::filled(n, n, 1.0) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mentions(&self) -> &[String] {
        &self.mentions
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[(i, j)] != 0.0
    }

    /// Neighbour set of node `i`, itself included.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_adjacent(i, j)).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.as_slice().iter().filter(|&&v| v != 0.0).count()
    }

    /// Block-diagonal graph with each of `graphs` as one component, in order.
    pub fn disjoint_union(graphs: &[&EntityGraph]) -> Self {
        let n = graphs.iter().map(|g| g.n).sum();
        let mut adjacency = Matrix::zeros(n, n);
        let mut mentions = Vec::with_capacity(n);
        let mut offset = 0;
        for g in graphs {
            for i in 0..g.n {
                adjacency.row_mut(offset + i)[offset..offset + g.n].copy_from_slice(g.adjacency.row(i));
            }
            mentions.extend(g.mentions.iter().cloned());
            offset += g.n;
        }
        Self { n, mentions, adjacency }
    }

    /// Returns a copy with the (i, j) and (j, i) entries set to one.
    pub fn with_edge(&self, i: usize, j: usize) -> Self {
        let mut adjacency = self.adjacency.clone();
        adjacency[(i, j)] = 1.0;
        adjacency[(j, i)] = 1.0;
        Self { n: self.n, mentions: self.mentions.clone(), adjacency }
    }
}

/// Adjacency must be square, symmetric, binary, with a unit diagonal.
pub fn validate_adjacency(adjacency: &Matrix) -> Result<()> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::Validation(format!("adjacency is {}x{}", n, adjacency.cols())));
    }
    for i in 0..n {
        if adjacency[(i, i)] != 1.0 {
            return Err(Error::Validation(format!("adjacency diagonal entry {i} is {}", adjacency[(i, i)])));
        }
        for j in 0..n {
            let v = adjacency[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("adjacency entry ({i}, {j}) is {v}, not 0 or 1")));
            }
            if v != adjacency[(j, i)] {
                return Err(Error::Validation(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

pub fn build_graph(example: &ContextExample) -> Result<EntityGraph> {
    build_graph_with(example, MentionMode::Normalized)
}

/// Node order follows `entity_spans`.
pub fn build_graph_with(example: &ContextExample, mode: MentionMode) -> Result<EntityGraph> {
    example.validate()?;
    let mentions: Vec<String> = example
        .entity_spans
        .iter()
        .map(|e| match mode {
            MentionMode::Normalized => normalize_mention(&e.mention),
            MentionMode::Exact => e.mention.clone(),
        })
        .collect();
    let n = mentions.len();
    let mut adjacency = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let same_sentence = example.entity_spans[i].sentence_index == example.entity_spans[j].sentence_index;
            if same_sentence || mentions[i] == mentions[j] {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    Ok(EntityGraph { n, mentions, adjacency })
}

/// Fraction of ones in the full `n × n` adjacency, diagonal included.
pub fn density(g: &EntityGraph) -> f64 {
    if g.n == 0 {
        return 0.0;
    }
    g.edge_count() as f64 / (g.n * g.n) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityBin {
    pub quantile: f64,
    /// Nearest-rank density at this quantile; the bin holds densities in
    /// `(previous boundary, boundary]`.
    pub boundary_density: f64,
    pub bin_size: usize,
    /// Indices into the input slice.
    pub members: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub example_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub bins: Vec<DensityBin>,
    pub mean_density: f64,
    pub count: usize,
}

impl DensityReport {
    /// Fills `example_ids` of every bin from `ids[member]`.
    pub fn attach_ids(&mut self, ids: &[String]) -> Result<()> {
        if ids.len() != self.count {
            return Err(Error::Domain(format!("{} ids for {} densities", ids.len(), self.count)));
        }
        for bin in &mut self.bins {
            bin.example_ids = bin.members.iter().map(|&m| ids[m].clone()).collect();
        }
        Ok(())
    }

    /// Which bin each input landed in.
    pub fn bin_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for (b, bin) in self.bins.iter().enumerate() {
            for &m in &bin.members {
                out[m] = b;
            }
        }
        out
    }

    /// CSV with columns `quantile,boundary_density,bin_size`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantile,boundary_density,bin_size\n");
        for bin in &self.bins {
            s.push_str(&format!("{},{},{}\n", bin.quantile, bin.boundary_density, bin.bin_size));
        }
        s
    }
}

/// Nearest-rank boundary of sorted `values` at quantile `q ∈ (0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Splits densities into quantile bins.
///
/// Boundaries use the nearest-rank rule on the sorted densities. A density
/// goes to the first bin whose boundary is at least its value, so ties
/// collapse into the earliest bin. When the last quantile is below one, an
/// extra bin at quantile 1.0 catches the remainder so that the bins always
/// partition the input.
pub fn quantile_partition(densities: &[f64], quantiles: &[f64]) -> Result<DensityReport> {
    if densities.is_empty() {
        return Err(Error::Domain("quantile partition of no densities".into()));
    }
    if quantiles.is_empty() {
        return Err(Error::Domain("no quantiles requested".into()));
    }
    if let Some(bad) = densities.iter().find(|d| !d.is_finite()) {
        return Err(Error::Domain(format!("density {bad} is not finite")));
    }
    let mut prev = 0.0;
    for &q in quantiles {
        if !(q > prev && q <= 1.0) {
            return Err(Error::Domain(format!(
                "quantiles must be strictly increasing within (0, 1]; got {quantiles:?}"
            )));
        }
        prev = q;
    }
    let mut qs = quantiles.to_vec();
    if prev < 1.0 {
        qs.push(1.0);
    }
    let mut sorted = densities.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut bins: Vec<DensityBin> = qs
        .iter()
        .map(|&q| DensityBin {
            quantile: q,
            boundary_density: nearest_rank(&sorted, q),
            bin_size: 0,
            members: Vec::new(),
            example_ids: Vec::new(),
        })
        .collect();
    for (i, &d) in densities.iter().enumerate() {
        // The final boundary is the maximum, so a bin always exists.
        let b = bins.iter().position(|bin| d <= bin.boundary_density).unwrap_or(bins.len() - 1);
        bins[b].members.push(i);
    }
    for bin in &mut bins {
        bin.bin_size = bin.members.len();
    }
    let mean_density = densities.iter().sum::<f64>() / densities.len() as f64;
    Ok(DensityReport { bins, mean_density, count: densities.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: usize, end: usize, mention: &str, sentence_index: usize) -> EntitySpan {
        EntitySpan { start, end, mention: mention.into(), sentence_index }
    }

    fn emil_wolf() -> ContextExample {
        // "Emil Wolf was a physicist . Born in Prague , Emil Wolf moved to Rochester ."
        let tokens: Vec<String> = "Emil Wolf was a physicist . Born in Prague , Emil Wolf moved to Rochester ."
            .split(' ')
            .map(String::from)
            .collect();
        ContextExample {
            id: "wolf".into(),
            tokens,
            sentence_spans: vec![TokenRange::new(0, 6), TokenRange::new(6, 16)],
            entity_spans: vec![
                span(0, 2, "Emil Wolf", 0),
                span(8, 9, "Prague", 1),
                span(10, 12, "emil  wolf", 1),
                span(14, 15, "Rochester", 1),
            ],
        }
    }

    #[test]
    fn same_mention_in_different_sentences_is_connected() {
        let g = build_graph(&emil_wolf()).unwrap();
        assert!(g.is_adjacent(0, 2));
        assert!(!g.is_adjacent(0, 1));
        assert!(g.is_adjacent(1, 3));
        let exact = build_graph_with(&emil_wolf(), MentionMode::Exact).unwrap();
        assert!(!exact.is_adjacent(0, 2));
    }

    #[test]
    fn single_entity_has_only_its_self_loop() {
        let ex = ContextExample {
            id: "one".into(),
            tokens: vec!["Prague".into()],
            sentence_spans: vec![TokenRange::new(0, 1)],
            entity_spans: vec![span(0, 1, "Prague", 0)],
        };
        let g = build_graph(&ex).unwrap();
        assert_eq!(g.adjacency(), &Matrix::identity(1));
        assert_eq!(density(&g), 1.0);
    }

    #[test]
    fn invalid_spans_are_named() {
        let mut ex = emil_wolf();
        ex.entity_spans[1] = span(4, 8, "physicist Born", 1);
        let msg = build_graph(&ex).unwrap_err().to_string();
        assert!(msg.contains("entity span 1"), "{msg}");

        let mut ex = emil_wolf();
        ex.entity_spans[3].end = ex.entity_spans[3].start;
        assert!(build_graph(&ex).unwrap_err().to_string().contains("entity span 3"));

        let mut ex = emil_wolf();
        ex.sentence_spans = vec![TokenRange::new(0, 7), TokenRange::new(6, 16)];
        assert!(build_graph(&ex).unwrap_err().to_string().contains("sentence 1"));
    }

    #[test]
    fn density_of_full_and_identity_graphs() {
        assert_eq!(density(&EntityGraph::fully_connected(4)), 1.0);
        let g = EntityGraph::new(vec!["a".into(), "b".into()], Matrix::identity(2)).unwrap();
        assert_eq!(density(&g), 0.5);
    }

    #[test]
    fn graph_constructor_rejects_bad_adjacency() {
        let asym = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(EntityGraph::new(vec!["a".into(), "b".into()], asym).is_err());
        let no_loop = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(EntityGraph::new(vec!["a".into(), "b".into()], no_loop).is_err());
        let weighted = Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        assert!(EntityGraph::new(vec!["a".into(), "b".into()], weighted).is_err());
    }

    #[test]
    fn constant_densities_share_every_boundary() {
        let r = quantile_partition(&[0.5; 7], &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        assert!(r.bins.iter().all(|b| b.boundary_density == 0.5));
        assert_eq!(r.bins[0].bin_size, 7);
        assert_eq!(r.mean_density, 0.5);
    }

    #[test]
    fn partition_rejects_bad_inputs() {
        assert!(quantile_partition(&[], &[1.0]).is_err());
        assert!(quantile_partition(&[0.1], &[0.5, 0.5]).is_err());
        assert!(quantile_partition(&[0.1], &[0.0, 1.0]).is_err());
        assert!(quantile_partition(&[0.1], &[1.5]).is_err());
    }

    #[test]
    fn partial_quantiles_get_a_remainder_bin() {
        let r = quantile_partition(&[0.1, 0.2, 0.3, 0.4], &[0.5]).unwrap();
        assert_eq!(r.bins.len(), 2);
        assert_eq!(r.bins[0].members, vec![0, 1]);
        assert_eq!(r.bins[1].members, vec![2, 3]);
        assert_eq!(r.bins[1].quantile, 1.0);
    }

    #[test]
    fn report_csv_has_expected_columns() {
        let mut r = quantile_partition(&[0.25, 1.0], &[0.5, 1.0]).unwrap();
        r.attach_ids(&["x".into(), "y".into()]).unwrap();
        assert_eq!(r.to_csv(), "quantile,boundary_density,bin_size\n0.5,0.25,1\n1,1,1\n");
        assert_eq!(r.bins[1].example_ids, vec!["y".to_string()]);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let good = serde_json::to_string(&emil_wolf()).unwrap();
        let text = format!("{good}\n\n{{\"id\": 3}}\n");
        let err = read_context_jsonl(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let parsed = read_context_jsonl(good.as_bytes()).unwrap();
        assert_eq!(parsed, vec![emil_wolf()]);
    }
}
