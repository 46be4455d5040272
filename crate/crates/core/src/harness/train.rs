//! Training loop and evaluation.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::{ImageBatch, PairedDataset};
use crate::losses::{compound_loss_with_grad, LossComponents};
use crate::metrics::{aggregate, evaluate_pair, MetricRecord, MetricSummary};
use crate::network::{build_model, model_backward, model_forward, model_forward_cached, Checkpoint, ModelParams};
use crate::ops::Parameters;
use crate::optim::AdamState;

/// One optimizer step's losses. Components are unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    pub total: f64,
    pub components: LossComponents,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History(pub Vec<HistoryEntry>);

impl History {
    /// CSV with columns `step,total,mse,ssim,perc`; terms that were not
    /// evaluated are left empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("step,total,mse,ssim,perc\n");
        for e in &self.0 {
            let c = e.components;
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.step,
                e.total,
                cell(c.mse),
                cell(c.ssim),
                cell(c.perceptual)
            );
        }
        out
    }

    fn window_mean(entries: &[HistoryEntry]) -> Option<f64> {
        (!entries.is_empty()).then(|| entries.iter().map(|e| e.total).sum::<f64>() / entries.len() as f64)
    }

    /// Mean total loss over the first `n` steps.
    pub fn head_mean(&self, n: usize) -> Option<f64> {
        Self::window_mean(&self.0[..n.min(self.0.len())])
    }

    /// Mean total loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        Self::window_mean(&self.0[self.0.len().saturating_sub(n)..])
    }
}

/// Training indices for `step` (0-based). Each epoch is a fresh seeded
/// shuffle, so a resumed run draws the same batches as an uninterrupted one.
fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step as usize * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().expect("filled above").1[pos % n]);
        pos += 1;
    }
    out
}

/// Fresh model for `cfg`.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<ModelParams> {
    build_model(&cfg.unet, cfg.with_wiener.then_some(&cfg.wiener), cfg.seed)
}

/// Trains on the training partition of `data` from a fresh initialization.
pub fn train(cfg: &ExperimentConfig, data: &PairedDataset) -> Result<(Checkpoint, History)> {
    train_with_snapshots(cfg, data, None, 0, &mut |_| Ok(()))
}

/// Like [`train`] and [`resume`], but hands a snapshot to `sink` every
/// `every` steps (0 disables snapshots). Pass `from` to continue a checkpoint.
pub fn train_with_snapshots(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    from: Option<Checkpoint>,
    every: u64,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, History)> {
    let start = match from {
        Some(ckpt) => {
            check_hash(cfg, &ckpt)?;
            ckpt
        }
        None => {
            let params = initial_model(cfg)?;
            Checkpoint {
                optimizer: Some(AdamState::new(params.parameter_count())),
                params,
                step: 0,
                config_hash: cfg.hash(),
            }
        }
    };
    let (train_set, _, _) = cfg.split(data)?;
    train_on(cfg, &train_set, start, every, sink)
}

fn check_hash(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint was written for {}, current config is {}",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

/// Continues `ckpt` up to `cfg.optim.steps`. The checkpoint must carry the
/// config hash of `cfg`.
pub fn resume(cfg: &ExperimentConfig, data: &PairedDataset, ckpt: Checkpoint) -> Result<(Checkpoint, History)> {
    train_with_snapshots(cfg, data, Some(ckpt), 0, &mut |_| Ok(()))
}

fn train_on(
    cfg: &ExperimentConfig,
    train_set: &PairedDataset,
    mut ckpt: Checkpoint,
    every: u64,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, History)> {
    cfg.validate()?;
    for s in train_set.samples() {
        s.smoky.check_divisible(cfg.unet.depth)?;
    }
    let loss_cfg = cfg.loss.build()?;
    let adam = cfg.optim.adam();
    let n = train_set.len();
    let mut opt = ckpt
        .optimizer
        .take()
        .unwrap_or_else(|| AdamState::new(ckpt.params.parameter_count()));
    let mut history = History::default();
    let report_every = (cfg.optim.steps / 10).max(1);
    while ckpt.step < cfg.optim.steps {
        let idx = batch_indices(cfg.seed, n, cfg.optim.batch_size, ckpt.step);
        let (smoky, clean) = train_set.batch(&idx)?;
        let (pred, cache) = model_forward_cached(&ckpt.params, smoky.data())?;
        let (loss, dpred) = compound_loss_with_grad(&loss_cfg, &pred, clean.data())?;
        ckpt.step += 1;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                step: ckpt.step,
                detail: format!("loss became non-finite ({})", loss.total),
            });
        }
        let grads = model_backward(&ckpt.params, &cache, &dpred);
        opt.step(&adam, &mut ckpt.params, &grads);
        let c = loss.components;
        if ckpt.step.is_multiple_of(report_every) || ckpt.step == cfg.optim.steps {
            info!(
                "step {}/{} total {:.5} mse {:?} ssim {:?} perc {:?}",
                ckpt.step, cfg.optim.steps, loss.total, c.mse, c.ssim, c.perceptual
            );
        } else {
            debug!("step {} total {:.6}", ckpt.step, loss.total);
        }
        history.0.push(HistoryEntry {
            step: ckpt.step,
            total: loss.total,
            components: c,
        });
        if every > 0 && ckpt.step.is_multiple_of(every) && ckpt.step < cfg.optim.steps {
            let snap = Checkpoint {
                optimizer: Some(opt.clone()),
                ..ckpt.clone()
            };
            sink(&snap)?;
        }
    }
    ckpt.optimizer = Some(opt);
    Ok((ckpt, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: MetricSummary,
    pub samples: Vec<SampleMetrics>,
}

/// Runs the model on every smoky input and scores it against the clean
/// target. Reads `params` only.
pub fn evaluate(params: &ModelParams, data: &PairedDataset) -> Result<Evaluation> {
    let samples = data
        .samples()
        .iter()
        .map(|s| {
            let pred = model_forward(params, &s.smoky)?;
            Ok(SampleMetrics {
                id: s.id.clone(),
                metrics: evaluate_pair(&pred, &s.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricRecord> = samples.iter().map(|s| s.metrics).collect();
    Ok(Evaluation {
        summary: aggregate(&records)?,
        samples,
    })
}

/// Scores the smoky inputs themselves, the no-op baseline.
pub fn evaluate_baseline(data: &PairedDataset) -> Result<Evaluation> {
    let samples = data
        .samples()
        .iter()
        .map(|s| {
            Ok(SampleMetrics {
                id: s.id.clone(),
                metrics: evaluate_pair(&s.smoky, &s.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricRecord> = samples.iter().map(|s| s.metrics).collect();
    Ok(Evaluation {
        summary: aggregate(&records)?,
        samples,
    })
}

/// Per-sample metric CSV (`id,ssim,psnr_db,mse,ciede2000`).
pub fn metrics_csv(samples: &[SampleMetrics]) -> String {
    use crate::metrics::format_value;
    let mut out = String::from("id,ssim,psnr_db,mse,ciede2000\n");
    for s in samples {
        let m = s.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.id,
            format_value(m.ssim, 6),
            format_value(m.psnr_db, 6),
            format_value(m.mse, 8),
            format_value(m.ciede2000, 6)
        );
    }
    out
}

/// Model output for one sample, as an image.
pub fn predict(params: &ModelParams, smoky: &ImageBatch) -> Result<ImageBatch> {
    model_forward(params, smoky)
}
