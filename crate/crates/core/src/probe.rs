//! Scores attention heads by how much weight lands on entity tokens and
//! ranks heads over a collection of traces.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const ROW_SUM_TOL: f64 = 1e-6;

/// Attention of every layer and head for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrace", into = "RawTrace")]
pub struct AttentionTrace {
    pub example_id: String,
    /// `true` where the token belongs to an entity span.
    pub entity_mask: Vec<bool>,
    /// `layers[l][h]` is an `L × L` row-stochastic matrix.
    pub layers: Vec<Vec<Matrix>>,
}

#[derive(Serialize, Deserialize)]
struct RawTrace {
    example_id: String,
    entity_mask: Vec<bool>,
    layers: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TryFrom<RawTrace> for AttentionTrace {
    type Error = Error;

    fn try_from(raw: RawTrace) -> Result<Self> {
        let layers = raw
            .layers
            .into_iter()
            .map(|heads| heads.iter().map(|rows| Matrix::from_rows(rows)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let t = AttentionTrace { example_id: raw.example_id, entity_mask: raw.entity_mask, layers };
        t.validate()?;
        Ok(t)
    }
}

impl From<AttentionTrace> for RawTrace {
    fn from(t: AttentionTrace) -> Self {
        let layers = t
            .layers
            .iter()
            .map(|heads| heads.iter().map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect()).collect())
            .collect();
        RawTrace { example_id: t.example_id, entity_mask: t.entity_mask, layers }
    }
}

impl AttentionTrace {
    pub fn validate(&self) -> Result<()> {
        let len = self.entity_mask.len();
        for (l, heads) in self.layers.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                if a.shape() != (len, len) {
                    return Err(Error::Validation(format!(
                        "{}: layer {l} head {h} is {}x{}, mask has length {len}",
                        self.example_id,
                        a.rows(),
                        a.cols()
                    )));
                }
                for i in 0..len {
                    let s: f64 = a.row(i).iter().sum();
                    if (s - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::Validation(format!(
                            "{}: layer {l} head {h} row {i} sums to {s}",
                            self.example_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `(layers, heads per layer)`, provided every layer has the same head count.
    pub fn geometry(&self) -> Result<(usize, usize)> {
        let heads = self.layers.first().map_or(0, Vec::len);
        if self.layers.iter().any(|l| l.len() != heads) {
            return Err(Error::Validation(format!("{}: layers have differing head counts", self.example_id)));
        }
        Ok((self.layers.len(), heads))
    }
}

/// Which side of the attention matrix the entity mask selects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    /// Weight received by entity tokens (keys).
    #[default]
    Columns,
    /// Weight that entity tokens (queries) place on entity tokens.
    Rows,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// Mean per token group, so groups of different size compare fairly.
    #[default]
    GroupMean,
    RawSum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub direction: ScoreDirection,
    pub normalization: ScoreNormalization,
}

/// Entity-group score minus non-entity-group score with the default options.
pub fn head_entity_score(a: &Matrix, mask: &[bool]) -> Result<f64> {
    head_entity_score_with(a, mask, ScoreOptions::default())
}

pub fn head_entity_score_with(a: &Matrix, mask: &[bool], opts: ScoreOptions) -> Result<f64> {
    let len = mask.len();
    if a.shape() != (len, len) {
        return Err(Error::Domain(format!("{}x{} attention with a mask of length {len}", a.rows(), a.cols())));
    }
    let ents = mask.iter().filter(|&&m| m).count();
    if ents == 0 || ents == len {
        return Err(Error::Domain("entity mask must contain both entity and non-entity tokens".into()));
    }
    // Per-token mass: incoming column totals, or each row's weight on entity columns.
    let mass: Vec<f64> = match opts.direction {
        ScoreDirection::Columns => (0..len).map(|j| (0..len).map(|i| a[(i, j)].abs()).sum()).collect(),
        ScoreDirection::Rows => {
            (0..len).map(|i| a.row(i).iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v.abs()).sum()).collect()
        }
    };
    let (mut s_ent, mut s_non) = (0.0, 0.0);
    for (v, &m) in mass.iter().zip(mask) {
        if m {
            s_ent += v;
        } else {
            s_non += v;
        }
    }
    Ok(match opts.normalization {
        ScoreNormalization::GroupMean => s_ent / ents as f64 - s_non / (len - ents) as f64,
        ScoreNormalization::RawSum => s_ent - s_non,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadRank {
    pub layer: usize,
    pub head: usize,
    pub score_colmean: f64,
    pub score_rawsum: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
}

fn order_free_mean(mut v: Vec<f64>) -> f64 {
    // Summing in sorted order makes the mean independent of example order.
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Averages per-head scores over `traces` and sorts heads by descending score
/// under `rank_by`, ties broken by `(layer, head)`. Both scores are reported.
pub fn rank_heads(
    traces: &[AttentionTrace],
    direction: ScoreDirection,
    rank_by: ScoreNormalization,
) -> Result<Vec<HeadRank>> {
    let first = traces.first().ok_or_else(|| Error::Domain("no traces to rank".into()))?;
    let geometry = first.geometry()?;
    let mut per_head =
        vec![(Vec::with_capacity(traces.len()), Vec::with_capacity(traces.len())); geometry.0 * geometry.1];
    for t in traces {
        if t.geometry()? != geometry {
            return Err(Error::Domain(format!(
                "{} has {:?} layers x heads, expected {geometry:?}",
                t.example_id,
                t.geometry()?
            )));
        }
        for (l, heads) in t.layers.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                let opts = |normalization| ScoreOptions { direction, normalization };
                let slot = &mut per_head[l * geometry.1 + h];
                slot.0.push(head_entity_score_with(a, &t.entity_mask, opts(ScoreNormalization::GroupMean))?);
                slot.1.push(head_entity_score_with(a, &t.entity_mask, opts(ScoreNormalization::RawSum))?);
            }
        }
    }
    let mut ranks: Vec<HeadRank> = per_head
        .into_iter()
        .enumerate()
        .map(|(idx, (mean, raw))| HeadRank {
            layer: idx / geometry.1,
            head: idx % geometry.1,
            score_colmean: order_free_mean(mean),
            score_rawsum: order_free_mean(raw),
            rank: 0,
        })
        .collect();
    let key = |r: &HeadRank| match rank_by {
        ScoreNormalization::GroupMean => r.score_colmean,
        ScoreNormalization::RawSum => r.score_rawsum,
    };
    ranks.sort_by(|a, b| match key(b).total_cmp(&key(a)) {
        Ordering::Equal => (a.layer, a.head).cmp(&(b.layer, b.head)),
        o => o,
    });
    for (i, r) in ranks.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ranks)
}

/// Column `target` of `a`: how much each token attends to it.
pub fn attention_to_token(a: &Matrix, target: usize) -> Result<Vec<f64>> {
    if target >= a.cols() {
        return Err(Error::Domain(format!("token {target} out of range for {} columns", a.cols())));
    }
    Ok(a.col(target))
}

pub fn ranks_to_csv(ranks: &[HeadRank]) -> String {
    let mut out = String::from("layer,head,score_colmean,score_rawsum,rank\n");
    for r in ranks {
        out.push_str(&format!("{},{},{},{},{}\n", r.layer, r.head, r.score_colmean, r.score_rawsum, r.rank));
    }
    out
}

pub fn read_traces_jsonl<R: BufRead>(reader: R) -> Result<Vec<AttentionTrace>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: AttentionTrace =
            serde_json::from_str(&line).map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_traces_jsonl<W: Write>(mut w: W, traces: &[AttentionTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::Validation(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(l: usize) -> Matrix {
        Matrix::filled(l, l, 1.0 / l as f64)
    }

    #[test]
    fn uniform_attention_scores_zero_in_every_mode() {
        let mask = [true, false, false, false, true, false, false];
        for direction in [ScoreDirection::Columns, ScoreDirection::Rows] {
            let opts = ScoreOptions { direction, normalization: ScoreNormalization::GroupMean };
            let s = head_entity_score_with(&uniform(7), &mask, opts).unwrap();
            assert!(s.abs() < 1e-15, "{direction:?}: {s}");
        }
    }

    #[test]
    fn concentrated_attention_scores_l_over_e() {
        let mut a = Matrix::zeros(6, 6);
        for i in 0..6 {
            a[(i, 2)] = 1.0;
        }
        let mask = [false, true, true, false, false, false];
        assert_eq!(head_entity_score(&a, &mask).unwrap(), 3.0);
    }

    #[test]
    fn degenerate_masks_are_domain_errors() {
        assert!(matches!(head_entity_score(&uniform(3), &[true; 3]), Err(Error::Domain(_))));
        assert!(matches!(head_entity_score(&uniform(3), &[false; 3]), Err(Error::Domain(_))));
        assert!(head_entity_score(&uniform(3), &[true, false]).is_err());
    }

    #[test]
    fn attention_to_token_extracts_columns() {
        assert_eq!(attention_to_token(&uniform(4), 3).unwrap(), vec![0.25; 4]);
        let mut a = Matrix::zeros(3, 3);
        (0..3).for_each(|i| a[(i, 1)] = 1.0);
        assert_eq!(attention_to_token(&a, 1).unwrap(), vec![1.0; 3]);
        assert!(attention_to_token(&a, 3).is_err());
    }

    #[test]
    fn concentrated_head_outranks_uniform_head() {
        let mut focused = Matrix::zeros(4, 4);
        (0..4).for_each(|i| focused[(i, 0)] = 1.0);
        let t = AttentionTrace {
            example_id: "x".into(),
            entity_mask: vec![true, false, false, false],
            layers: vec![vec![uniform(4), focused]],
        };
        let r = rank_heads(&[t], ScoreDirection::Columns, ScoreNormalization::GroupMean).unwrap();
        assert_eq!((r[0].layer, r[0].head, r[0].rank), (0, 1, 1));
        assert_eq!((r[1].head, r[1].score_colmean), (0, 0.0));
        assert!(rank_heads(&[], ScoreDirection::Columns, ScoreNormalization::GroupMean).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let t = AttentionTrace {
            example_id: "e1".into(),
            entity_mask: vec![true, false],
            layers: vec![vec![uniform(2)], vec![Matrix::identity(2)]],
        };
        let mut buf = Vec::new();
        write_traces_jsonl(&mut buf, std::slice::from_ref(&t)).unwrap();
        assert_eq!(read_traces_jsonl(&buf[..]).unwrap(), vec![t]);
        let bad = br#"{"example_id":"b","entity_mask":[true,false],"layers":[[[[0.5,0.4],[0.5,0.5]]]]}"#;
        let err = read_traces_jsonl(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("row 0"), "{err}");
    }
}
