//! Flat `key = value` configuration shared by every subcommand.
//!
//! A config file is a TOML table without sections. `--set key=value`
//! overrides are applied on top before validation, so a run is fully
//! described by the file plus its overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use attnlab_core::attention::NormPlacement;
use attnlab_core::entity_graph::MentionMode;
use attnlab_core::probe::{ScoreDirection, ScoreNormalization};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GraphAttention,
    SelfAttention,
    Transformer,
    None,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::GraphAttention, Variant::SelfAttention, Variant::Transformer, Variant::None];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GraphAttention => "graph_attention",
            Variant::SelfAttention => "self_attention",
            Variant::Transformer => "transformer",
            Variant::None => "none",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).with_context(|| {
            format!("unknown variant {s:?}; expected one of graph_attention, self_attention, transformer, none")
        })
    }
}

/// Synthetic 2-hop task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    /// Training examples.
    pub num_examples: usize,
    pub num_test_examples: usize,
    pub num_entities_pool: usize,
    /// Upper bound on sentences per context, the two reasoning sentences included.
    pub sentences_per_context: usize,
    /// Entities in each distractor sentence; reasoning sentences always hold two.
    pub entities_per_sentence: usize,
    /// Lower bound on distractor sentences. Each context draws its count
    /// uniformly from `distractor_count ..= sentences_per_context - 2`.
    pub distractor_count: usize,
    /// Chance that a distractor sentence reuses a name from an earlier distractor sentence.
    pub collision_rate: f64,
    pub data_seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_examples: 5000,
            num_test_examples: 1000,
            num_entities_pool: 10,
            sentences_per_context: 4,
            entities_per_sentence: 2,
            distractor_count: 2,
            collision_rate: 0.5,
            data_seed: 7,
        }
    }
}

/// Every key recognised in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    #[serde(flatten)]
    pub synthetic: SyntheticTaskConfig,

    pub variant: Variant,
    /// Fusion hops for the graph variants, encoder layers for the Transformer.
    pub hops: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub heads: usize,
    pub ff_dim: usize,
    pub norm: NormPlacement,
    pub leaky_slope: f64,
    pub mention_mode: MentionMode,
    /// Add each sentence's mean token embedding to its tokens.
    pub sentence_context: bool,
    /// Stop once an epoch's mean training loss falls below this; 0 disables.
    pub early_stop_loss: f64,
    /// Run the graph-attention variant on complete graphs.
    pub adjacency_override_all_ones: bool,
    pub density_quantiles: Vec<f64>,

    pub min_accuracy: f64,
    pub max_variant_gap: f64,
    pub max_bin_gap: f64,
    pub max_baseline_accuracy: f64,

    pub equivalence_instances: usize,
    pub equivalence_max_nodes: usize,
    pub equivalence_max_dim: usize,
    pub equivalence_tolerance: f64,
    pub gradcheck_instances: usize,
    pub gradcheck_eps: f64,
    pub gradcheck_tolerance: f64,
    /// Instances with an activation this close to a kink are resampled.
    pub gradcheck_kink_margin: f64,
    pub suite_seed: u64,

    pub probe_direction: ScoreDirection,
    pub probe_rank_by: ScoreNormalization,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            synthetic: SyntheticTaskConfig::default(),
            variant: Variant::GraphAttention,
            hops: 2,
            hidden_dim: 300,
            learning_rate: 2e-4,
            epochs: 30,
            batch_size: 24,
            seed: 1,
            heads: 4,
            ff_dim: 300,
            norm: NormPlacement::Post,
            leaky_slope: 0.2,
            mention_mode: MentionMode::Normalized,
            sentence_context: true,
            early_stop_loss: 1e-3,
            adjacency_override_all_ones: false,
            density_quantiles: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            min_accuracy: 0.90,
            max_variant_gap: 0.05,
            max_bin_gap: 0.07,
            max_baseline_accuracy: 0.55,
            equivalence_instances: 1000,
            equivalence_max_nodes: 32,
            equivalence_max_dim: 16,
            equivalence_tolerance: 1e-12,
            gradcheck_instances: 100,
            gradcheck_eps: 1e-5,
            gradcheck_tolerance: 1e-4,
            gradcheck_kink_margin: 1e-3,
            suite_seed: 2020,
            probe_direction: ScoreDirection::Columns,
            probe_rank_by: ScoreNormalization::GroupMean,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_override(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl Config {
    /// Loads `path` (if any), applies `key=value` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        Self::from_table_with(table, overrides)
    }

    /// Applies `key=value` overrides to `table`, then parses and validates it.
    pub fn from_table_with(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
            table.insert(k.trim().to_string(), parse_override(v.trim()));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            bail!("config must be flat; [{k}] sections are not supported");
        }
        // `serde(flatten)` cannot deny unknown fields, so compare against the defaults' keys.
        let known: toml::Table = Config::default().to_toml().parse().expect("defaults parse");
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            bail!("unknown config key {k:?}");
        }
        let cfg: Config = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synthetic;
        for (name, v) in [
            ("num_examples", s.num_examples),
            ("num_test_examples", s.num_test_examples),
            ("num_entities_pool", s.num_entities_pool),
            ("entities_per_sentence", s.entities_per_sentence),
            ("hops", self.hops),
            ("hidden_dim", self.hidden_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("equivalence_max_nodes", self.equivalence_max_nodes),
            ("equivalence_max_dim", self.equivalence_max_dim),
        ] {
            if v == 0 {
                bail!("{name} must be at least 1");
            }
        }
        if s.entities_per_sentence < 2 {
            bail!("entities_per_sentence must be at least 2");
        }
        if s.sentences_per_context < 2 + s.distractor_count {
            bail!(
                "sentences_per_context ({}) must leave room for 2 reasoning sentences and {} distractor sentences",
                s.sentences_per_context,
                s.distractor_count
            );
        }
        if !(0.0..=1.0).contains(&s.collision_rate) {
            bail!("collision_rate must lie in [0, 1]");
        }
        if self.variant == Variant::Transformer && !self.hidden_dim.is_multiple_of(self.heads) {
            bail!("heads ({}) must divide hidden_dim ({})", self.heads, self.hidden_dim);
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gradcheck_eps", self.gradcheck_eps),
            ("gradcheck_tolerance", self.gradcheck_tolerance),
            ("equivalence_tolerance", self.equivalence_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive");
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!("leaky_slope must lie in (0, 1)");
        }
        if self.early_stop_loss.is_nan() || self.early_stop_loss < 0.0 {
            bail!("early_stop_loss must be non-negative");
        }
        if self.density_quantiles.is_empty() {
            bail!("density_quantiles must not be empty");
        }
        Ok(())
    }
}
