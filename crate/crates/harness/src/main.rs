use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnlab::compare::compare;
use attnlab::config::{Config, Variant};
use attnlab::model::{from_checkpoint, prepare, to_checkpoint};
use attnlab::suites::{equivalence_check, gradcheck, probe_planted_suite};
use attnlab::synthetic::{check_two_hop, generate_synthetic, LabeledExample};
use attnlab::train::{evaluate_by_density, train_with_progress, MetricsReport};
use attnlab_core::checkpoint::Checkpoint;
use attnlab_core::entity_graph::{build_graph_with, density, quantile_partition, read_context_jsonl};
use attnlab_core::probe::{rank_heads, ranks_to_csv, read_traces_jsonl, write_traces_jsonl};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "attnlab", version, about = "Graph-attention vs self-attention experiments")]
struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Artifact directory.
    #[arg(long, env = "ATTNLAB_OUT", default_value = "attnlab-out", global = true)]
    out: PathBuf,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build entity graphs for a JSONL file of contexts.
    BuildGraph {
        #[arg(long)]
        input: PathBuf,
    },
    /// Density quantile bins of a JSONL corpus, or of the synthetic test split.
    DensityReport {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Complete-graph graph attention against self-attention, and exact-zero masking.
    EquivalenceCheck,
    /// Finite-difference check of every backward pass.
    Gradcheck,
    /// Write the synthetic 2-hop task as JSONL.
    GenSynthetic,
    /// Train one or more variants and compare them.
    Train {
        /// Comma-separated; defaults to the config's variant.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Re-evaluate a checkpoint per density bin.
    EvalDensity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled JSONL to evaluate on instead of the synthetic test split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rank attention heads by entity focus.
    ProbeHeads {
        /// Attention traces JSONL to rank.
        #[arg(long, conflicts_with = "checkpoint")]
        traces: Option<PathBuf>,
        /// Transformer checkpoint whose traces on the test split are ranked.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test examples traced from the checkpoint.
        #[arg(long, default_value_t = 64)]
        examples: usize,
        /// Planted-head trials when neither traces nor a checkpoint is given.
        #[arg(long, default_value_t = 50)]
        plantings: usize,
    },
}

struct Ctx {
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn jsonl<T: Serialize>(&self, name: &str, items: &[T]) -> Result<()> {
        let mut s = String::new();
        for it in items {
            s.push_str(&serde_json::to_string(it)?);
            s.push('\n');
        }
        self.write(name, &s)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_labeled(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ex: LabeledExample =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        ex.example.validate().with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Serialize)]
struct GraphRecord<'a> {
    id: &'a str,
    graph: attnlab_core::entity_graph::EntityGraph,
}

fn build_graph_cmd(ctx: &Ctx, cfg: &Config, input: &Path) -> Result<bool> {
    let examples = read_context_jsonl(open(input)?).with_context(|| format!("{}", input.display()))?;
    let mut records = Vec::with_capacity(examples.len());
    let mut csv = String::from("id,nodes,edges,density\n");
    for ex in &examples {
        let g = build_graph_with(ex, cfg.mention_mode).with_context(|| format!("example {}", ex.id))?;
        csv.push_str(&format!("{},{},{},{}\n", ex.id, g.n(), g.edge_count(), density(&g)));
        records.push(GraphRecord { id: &ex.id, graph: g });
    }
    ctx.jsonl("graphs.jsonl", &records)?;
    ctx.write("graphs.csv", &csv)?;
    ctx.say(format!("built {} graphs", records.len()));
    Ok(true)
}

fn density_report_cmd(ctx: &Ctx, cfg: &Config, input: Option<&Path>) -> Result<bool> {
    let examples = match input {
        Some(p) => read_context_jsonl(open(p)?).with_context(|| format!("{}", p.display()))?,
        None => generate_synthetic(&cfg.synthetic)?.test.into_iter().map(|e| e.example).collect(),
    };
    let densities = examples
        .iter()
        .map(|e| Ok(density(&build_graph_with(e, cfg.mention_mode).with_context(|| format!("example {}", e.id))?)))
        .collect::<Result<Vec<f64>>>()?;
    let mut report = quantile_partition(&densities, &cfg.density_quantiles)?;
    report.attach_ids(&examples.iter().map(|e| e.id.clone()).collect::<Vec<_>>())?;
    let mut csv = String::from("quantile,boundary_density,bin_size\n");
    for b in &report.bins {
        csv.push_str(&format!("{},{},{}\n", b.quantile, b.boundary_density, b.bin_size));
    }
    ctx.json("density_report.json", &report)?;
    ctx.write("density_report.csv", &csv)?;
    ctx.say(format!("{} examples, mean density {:.4}", report.count, report.mean_density));
    Ok(true)
}

fn equivalence_cmd(ctx: &Ctx, cfg: &Config) -> Result<bool> {
    let r = equivalence_check(cfg)?;
    ctx.json("equivalence.json", &r)?;
    ctx.say(format!(
        "{} instances: max deviation {:e}, masking leaks {}, row-sum deviation {:e} -> {}",
        r.instances,
        r.max_deviation,
        r.nonzero_outside_adjacency,
        r.max_row_sum_deviation,
        if r.passed { "pass" } else { "FAIL" }
    ));
    Ok(r.passed)
}

fn gradcheck_cmd(ctx: &Ctx, cfg: &Config) -> Result<bool> {
    let r = gradcheck(cfg)?;
    let mut csv = String::from("layer,instances,max_relative_error,resampled,passed\n");
    for l in &r.layers {
        csv.push_str(&format!("{},{},{},{},{}\n", l.layer, l.instances, l.max_relative_error, l.resampled, l.passed));
        ctx.say(format!(
            "{:16} max rel err {:.3e} {}",
            l.layer,
            l.max_relative_error,
            if l.passed { "pass" } else { "FAIL" }
        ));
    }
    ctx.json("gradcheck.json", &r)?;
    ctx.write("gradcheck.csv", &csv)?;
    Ok(r.passed)
}

#[derive(Serialize)]
struct SyntheticSummary {
    train: usize,
    test: usize,
    data_seed: u64,
    two_hop_failures: usize,
}

fn gen_synthetic_cmd(ctx: &Ctx, cfg: &Config) -> Result<bool> {
    let data = generate_synthetic(&cfg.synthetic)?;
    let failures = data.train.iter().chain(&data.test).filter(|e| check_two_hop(e).is_err()).count();
    ctx.jsonl("synthetic_train.jsonl", &data.train)?;
    ctx.jsonl("synthetic_test.jsonl", &data.test)?;
    ctx.json(
        "synthetic_summary.json",
        &SyntheticSummary {
            train: data.train.len(),
            test: data.test.len(),
            data_seed: cfg.synthetic.data_seed,
            two_hop_failures: failures,
        },
    )?;
    ctx.say(format!(
        "{} train / {} test examples, {failures} failing the 2-hop check",
        data.train.len(),
        data.test.len()
    ));
    Ok(failures == 0)
}

fn loss_csv(r: &MetricsReport) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (e, l) in r.loss_curve.iter().enumerate() {
        s.push_str(&format!("{e},{l}\n"));
    }
    s
}

fn train_cmd(ctx: &Ctx, cfg: &Config, variants: &[Variant]) -> Result<bool> {
    let variants = if variants.is_empty() { vec![cfg.variant] } else { variants.to_vec() };
    let data = generate_synthetic(&cfg.synthetic)?;
    let mut reports = Vec::new();
    for &v in &variants {
        let vcfg = Config { variant: v, ..cfg.clone() };
        vcfg.validate()?;
        let out = train_with_progress(&vcfg, &data, |e, loss, acc| {
            ctx.say(format!("{v} epoch {e}: loss {loss:.4}, running accuracy {acc:.4}"))
        })?;
        ctx.say(format!("{v}: test accuracy {:.4} ({:.1}s)", out.report.accuracy, out.wall_clock.as_secs_f64()));
        ctx.json(&format!("train_{v}_metrics.json"), &out.report)?;
        ctx.write(&format!("train_{v}_loss.csv"), &loss_csv(&out.report))?;
        ctx.write(&format!("train_{v}_density.csv"), &out.report.density.to_csv())?;
        ctx.write(&format!("train_{v}_checkpoint.json"), &to_checkpoint(&out.model, &out.vocab, &vcfg).to_json()?)?;
        reports.push(out.report);
    }
    let cmp = compare(cfg, &reports);
    ctx.json("comparison.json", &cmp)?;
    ctx.write("comparison_density.csv", &cmp.bin_gaps_csv())?;
    for c in &cmp.checks {
        let op = if c.at_most { "<=" } else { ">=" };
        ctx.say(format!(
            "{:20} {:.4} {op} {} {}",
            c.name,
            c.value,
            c.threshold,
            if c.passed { "pass" } else { "FAIL" }
        ));
    }
    Ok(cmp.passed)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn eval_density_cmd(ctx: &Ctx, overrides: &[String], checkpoint: &Path, input: Option<&Path>) -> Result<bool> {
    let (cfg, vocab, model) = from_checkpoint(&load_checkpoint(checkpoint)?, overrides)?;
    let examples = match input {
        Some(p) => read_labeled(p)?,
        None => generate_synthetic(&cfg.synthetic)?.test,
    };
    if examples.is_empty() {
        bail!("nothing to evaluate");
    }
    let prepared = examples.iter().map(|e| prepare(e, &vocab, &cfg)).collect::<Result<Vec<_>>>()?;
    let report = evaluate_by_density(&model, &prepared, &cfg.density_quantiles)?;
    ctx.json("eval_density.json", &report)?;
    ctx.write("eval_density.csv", &report.to_csv())?;
    ctx.say(format!("{}: accuracy {:.4} on {} examples", cfg.variant, report.accuracy, report.count));
    Ok(true)
}

fn probe_heads_cmd(
    ctx: &Ctx,
    cfg: &Config,
    overrides: &[String],
    traces: Option<&Path>,
    checkpoint: Option<&Path>,
    examples: usize,
    plantings: usize,
) -> Result<bool> {
    let traces = match (traces, checkpoint) {
        (Some(p), _) => read_traces_jsonl(open(p)?).with_context(|| format!("{}", p.display()))?,
        (None, Some(c)) => {
            let (mcfg, vocab, model) = from_checkpoint(&load_checkpoint(c)?, overrides)?;
            let test = generate_synthetic(&mcfg.synthetic)?.test;
            let traces = test
                .iter()
                .take(examples)
                .map(|e| model.attention_trace(&prepare(e, &vocab, &mcfg)?))
                .collect::<Result<Vec<_>>>()?;
            let mut buf = Vec::new();
            write_traces_jsonl(&mut buf, &traces)?;
            ctx.write("traces.jsonl", &String::from_utf8(buf)?)?;
            traces
        }
        (None, None) => {
            let r = probe_planted_suite(cfg, plantings)?;
            ctx.json("probe_planted.json", &r)?;
            ctx.say(format!("planted head recovered {}/{} times among {} decoys", r.recovered, r.plantings, r.decoys));
            return Ok(r.passed);
        }
    };
    let ranks = rank_heads(&traces, cfg.probe_direction, cfg.probe_rank_by)?;
    ctx.json("head_ranks.json", &ranks)?;
    ctx.write("head_ranks.csv", &ranks_to_csv(&ranks))?;
    if let Some(top) = ranks.first() {
        ctx.say(format!("top head: layer {} head {} (score {:.4})", top.layer, top.head, top.score_colmean));
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx { out: cli.out.clone(), quiet: cli.quiet };
    // Checkpoint commands take their config from the checkpoint; `--set` still applies.
    let cfg = match &cli.command {
        Command::EvalDensity { .. } => None,
        _ => Some(Config::load(cli.config.as_deref(), &cli.set)?),
    };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    if let Some(cfg) = &cfg {
        ctx.write("config_used.toml", &cfg.to_toml())?;
    }
    let cfg = cfg.as_ref();
    match &cli.command {
        Command::BuildGraph { input } => build_graph_cmd(&ctx, cfg.unwrap(), input),
        Command::DensityReport { input } => density_report_cmd(&ctx, cfg.unwrap(), input.as_deref()),
        Command::EquivalenceCheck => equivalence_cmd(&ctx, cfg.unwrap()),
        Command::Gradcheck => gradcheck_cmd(&ctx, cfg.unwrap()),
        Command::GenSynthetic => gen_synthetic_cmd(&ctx, cfg.unwrap()),
        Command::Train { variants } => train_cmd(&ctx, cfg.unwrap(), variants),
        Command::EvalDensity { checkpoint, input } => eval_density_cmd(&ctx, &cli.set, checkpoint, input.as_deref()),
        Command::ProbeHeads { traces, checkpoint, examples, plantings } => probe_heads_cmd(
            &ctx,
            cfg.unwrap(),
            &cli.set,
            traces.as_deref(),
            checkpoint.as_deref(),
            *examples,
            *plantings,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
