//! Mini-batch Adam training and density-stratified evaluation.

use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use attnlab_core::entity_graph::quantile_partition;
use attnlab_core::numerics::{Matrix, ParamSet, SeededRng};
use serde::Serialize;

use crate::config::{Config, Variant};
use crate::model::{argmax, prepare, Model, Prepared, Vocab};
use crate::synthetic::SyntheticDataset;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new<P: ParamSet>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Matrix> =
            params.named_tensors().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { lr, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let gs = grads.named_tensors();
        for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            let (p, g) = (p.as_mut_slice(), g.as_slice());
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinAccuracy {
    pub quantile: f64,
    pub boundary_density: f64,
    pub bin_size: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityAccuracy {
    pub bins: Vec<BinAccuracy>,
    pub mean_density: f64,
    pub accuracy: f64,
    pub count: usize,
}

impl DensityAccuracy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantile,boundary_density,bin_size,accuracy\n");
        for b in &self.bins {
            let acc = b.accuracy.map_or(String::new(), |a| a.to_string());
            s.push_str(&format!("{},{},{},{}\n", b.quantile, b.boundary_density, b.bin_size, acc));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub data_seed: u64,
    pub adjacency_override_all_ones: bool,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub stopped_early: bool,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub density: DensityAccuracy,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocab,
    pub report: MetricsReport,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Kept out of the report so that reports stay byte-reproducible.
    pub wall_clock: Duration,
}

pub fn prepare_all(
    examples: &[crate::synthetic::LabeledExample],
    vocab: &Vocab,
    cfg: &Config,
) -> Result<Vec<Prepared>> {
    examples.iter().map(|e| prepare(e, vocab, cfg)).collect()
}

pub fn train(cfg: &Config, data: &SyntheticDataset) -> Result<TrainOutcome> {
    train_with_progress(cfg, data, |_, _, _| {})
}

/// As [`train`], calling `progress(epoch, mean_loss, running_accuracy)` after every epoch.
/// The running accuracy counts argmax hits during the epoch's forward passes.
pub fn train_with_progress(
    cfg: &Config,
    data: &SyntheticDataset,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        bail!("training set is empty");
    }
    let started = Instant::now();
    let vocab = Vocab::build(data.train.iter().map(|e| &e.example));
    let train_set = prepare_all(&data.train, &vocab, cfg)?;
    let test_set = prepare_all(&data.test, &vocab, cfg)?;
    let mut model = Model::init(cfg, vocab.len());
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut shuffle = SeededRng::new(cfg.seed).derive("shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = model.zeros_like();
    let mut step_losses = Vec::new();
    let mut loss_curve = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_hits = 0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let examples: Vec<&Prepared> = batch.iter().map(|&i| &train_set[i]).collect();
            let step = step_losses.len();
            let (batch_loss, hits) =
                model.accumulate(&examples, &mut grads).with_context(|| format!("training diverged at step {step}"))?;
            epoch_hits += hits;
            if !batch_loss.is_finite() {
                bail!("training diverged at step {step}: loss {batch_loss}");
            }
            let scale = 1.0 / batch.len() as f64;
            grads.tensors_mut().into_iter().for_each(|g| g.as_mut_slice().iter_mut().for_each(|v| *v *= scale));
            if let Some((name, _)) = grads.named_tensors().into_iter().find(|(_, g)| !g.is_finite()) {
                bail!("training diverged at step {step}: non-finite gradient in {name}");
            }
            adam.step(&mut model, &grads);
            step_losses.push(batch_loss * scale);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / train_set.len() as f64;
        loss_curve.push(mean);
        progress(epoch, mean, epoch_hits as f64 / train_set.len() as f64);
        if mean < cfg.early_stop_loss {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }

    let train_accuracy = accuracy(&model, &train_set)?;
    let density = if test_set.is_empty() {
        DensityAccuracy { bins: Vec::new(), mean_density: 0.0, accuracy: 0.0, count: 0 }
    } else {
        evaluate_by_density(&model, &test_set, &cfg.density_quantiles)?
    };
    let report = MetricsReport {
        variant: cfg.variant,
        seed: cfg.seed,
        data_seed: cfg.synthetic.data_seed,
        adjacency_override_all_ones: cfg.adjacency_override_all_ones,
        accuracy: density.accuracy,
        train_accuracy,
        epochs_run: loss_curve.len(),
        steps: step_losses.len(),
        stopped_early,
        loss_curve,
        density,
    };
    Ok(TrainOutcome { model, vocab, report, step_losses, wall_clock: started.elapsed() })
}

/// Examples scored per stacked forward pass at evaluation time.
const EVAL_CHUNK: usize = 64;

pub fn predictions(model: &Model, examples: &[Prepared]) -> Result<Vec<bool>> {
    let mut hits = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        for (ex, logits) in chunk.iter().zip(model.batch_logits(&batch)?) {
            hits.push(argmax(&logits) == ex.answer);
        }
    }
    Ok(hits)
}

pub fn accuracy(model: &Model, examples: &[Prepared]) -> Result<f64> {
    let hits = predictions(model, examples)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

/// Accuracy within each density-quantile bin of `examples`.
pub fn evaluate_by_density(model: &Model, examples: &[Prepared], quantiles: &[f64]) -> Result<DensityAccuracy> {
    let hits = predictions(model, examples)?;
    let densities: Vec<f64> = examples.iter().map(|e| e.density).collect();
    let report = quantile_partition(&densities, quantiles)?;
    let bins = report
        .bins
        .iter()
        .map(|b| BinAccuracy {
            quantile: b.quantile,
            boundary_density: b.boundary_density,
            bin_size: b.bin_size,
            accuracy: (b.bin_size > 0)
                .then(|| b.members.iter().filter(|&&m| hits[m]).count() as f64 / b.bin_size as f64),
        })
        .collect();
    Ok(DensityAccuracy {
        bins,
        mean_density: report.mean_density,
        accuracy: hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64,
        count: hits.len(),
    })
}
