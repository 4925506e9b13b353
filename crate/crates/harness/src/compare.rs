//! Cross-variant checks: the accuracy table and the per-density-bin gaps.

use serde::Serialize;

use crate::config::{Config, Variant};
use crate::train::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `value <= threshold` when `at_most`, else `value >= threshold`.
    pub threshold: f64,
    pub at_most: bool,
    pub passed: bool,
}

impl Check {
    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, at_most: false, passed: value >= threshold }
    }

    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, at_most: true, passed: value <= threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinGap {
    pub quantile: f64,
    pub boundary_density: f64,
    pub bin_size: usize,
    pub graph_attention: Option<f64>,
    pub self_attention: Option<f64>,
    /// `None` for an empty bin.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub data_seed: u64,
    pub variants: Vec<VariantSummary>,
    pub bin_gaps: Vec<BinGap>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ComparisonReport {
    pub fn bin_gaps_csv(&self) -> String {
        let mut s = String::from("quantile,boundary_density,bin_size,graph_attention,self_attention,gap\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for b in &self.bin_gaps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.quantile,
                b.boundary_density,
                b.bin_size,
                opt(b.graph_attention),
                opt(b.self_attention),
                opt(b.gap)
            ));
        }
        s
    }
}

/// Applies every check whose variants are present in `reports`.
pub fn compare(cfg: &Config, reports: &[MetricsReport]) -> ComparisonReport {
    let get = |v: Variant| reports.iter().find(|r| r.variant == v);
    let mut checks = Vec::new();
    let mut bin_gaps = Vec::new();
    for v in [Variant::GraphAttention, Variant::SelfAttention, Variant::Transformer] {
        if let Some(r) = get(v) {
            checks.push(Check::at_least(format!("{v}_accuracy"), r.accuracy, cfg.min_accuracy));
        }
    }
    if let (Some(ga), Some(sa)) = (get(Variant::GraphAttention), get(Variant::SelfAttention)) {
        checks.push(Check::at_most("accuracy_gap", (ga.accuracy - sa.accuracy).abs(), cfg.max_variant_gap));
        for (a, b) in ga.density.bins.iter().zip(&sa.density.bins) {
            let gap = a.accuracy.zip(b.accuracy).map(|(x, y)| (x - y).abs());
            bin_gaps.push(BinGap {
                quantile: a.quantile,
                boundary_density: a.boundary_density,
                bin_size: a.bin_size,
                graph_attention: a.accuracy,
                self_attention: b.accuracy,
                gap,
            });
        }
        let worst = bin_gaps.iter().filter_map(|b| b.gap).fold(0.0, f64::max);
        checks.push(Check::at_most("max_bin_gap", worst, cfg.max_bin_gap));
    }
    if let Some(r) = get(Variant::None) {
        checks.push(Check::at_most("none_accuracy", r.accuracy, cfg.max_baseline_accuracy));
    }
    ComparisonReport {
        seed: cfg.seed,
        data_seed: cfg.synthetic.data_seed,
        variants: reports
            .iter()
            .map(|r| VariantSummary {
                variant: r.variant,
                accuracy: r.accuracy,
                train_accuracy: r.train_accuracy,
                epochs_run: r.epochs_run,
                stopped_early: r.stopped_early,
            })
            .collect(),
        passed: checks.iter().all(|c| c.passed),
        bin_gaps,
        checks,
    }
}
