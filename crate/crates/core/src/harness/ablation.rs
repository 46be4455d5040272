//! Four-variant ablation: the full model and one variant per removed
//! component.

use std::fmt;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{emit_image_grid, emit_report, ReportFormat};
use super::train::{evaluate, metrics_csv, train, Evaluation, History};
use crate::error::{Error, Result};
use crate::image::PairedDataset;
use crate::metrics::MetricRecord;
use crate::network::{save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoWiener,
    NoSsimLoss,
    NoPerceptualLoss,
    FullUlw,
}

impl Variant {
    /// Report row order.
    pub const ALL: [Variant; 4] = [
        Variant::NoWiener,
        Variant::NoSsimLoss,
        Variant::NoPerceptualLoss,
        Variant::FullUlw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoWiener => "no_wiener",
            Variant::NoSsimLoss => "no_ssim_loss",
            Variant::NoPerceptualLoss => "no_perceptual_loss",
            Variant::FullUlw => "full_ulw",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::NoWiener => "w/o Learnable Wiener filter",
            Variant::NoSsimLoss => "w/o SSIM loss",
            Variant::NoPerceptualLoss => "w/o Perceptual loss",
            Variant::FullUlw => "Full ULW",
        }
    }

    /// The base config with this variant's single change applied.
    pub fn derive(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Variant::NoWiener => cfg.with_wiener = false,
            Variant::NoSsimLoss => cfg.loss.weights.ssim = Some(0.0),
            Variant::NoPerceptualLoss => cfg.loss.weights.perceptual = Some(0.0),
            Variant::FullUlw => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean: MetricRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
    pub dataset_fingerprint: String,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Rows in report order; fails if any variant is missing or repeated.
    pub fn ordered_rows(&self) -> Result<Vec<AblationRow>> {
        if self.rows.len() != Variant::ALL.len() {
            return Err(Error::Report(format!(
                "expected 4 variant rows, found {}",
                self.rows.len()
            )));
        }
        Variant::ALL
            .iter()
            .map(|&v| {
                self.row(v)
                    .copied()
                    .ok_or_else(|| Error::Report(format!("report is missing variant `{v}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub checkpoint: Checkpoint,
    pub history: History,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub report: AblationReport,
    pub runs: Vec<VariantRun>,
    pub test_set: PairedDataset,
}

/// The base must be the full model: Wiener stage on and both the SSIM and
/// perceptual terms active.
pub fn check_base(base: &ExperimentConfig) -> Result<()> {
    base.validate()?;
    let w = base.loss.weights;
    let on = |x: Option<f64>| x.is_some_and(|x| x > 0.0);
    if !(base.with_wiener && on(w.ssim) && on(w.perceptual)) {
        return Err(Error::Config(
            "ablation base must be the full model (with_wiener = true, ssim and perceptual weights > 0)".into(),
        ));
    }
    Ok(())
}

/// Trains and evaluates every variant on the same seed and split. Metrics
/// are computed on the test partition.
pub fn run_ablation(base: &ExperimentConfig, data: &PairedDataset) -> Result<AblationOutcome> {
    check_base(base)?;
    let (_, _, test_set) = base.split(data)?;
    let mut runs = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let wrap = |e: Error| Error::Variant {
            variant: variant.name().to_string(),
            source: Box::new(e),
        };
        let config = variant.derive(base);
        info!("training variant {variant}");
        let (checkpoint, history) = train(&config, data).map_err(wrap)?;
        let evaluation = evaluate(&checkpoint.params, &test_set).map_err(wrap)?;
        info!("variant {variant}: test ssim {:.4}", evaluation.summary.mean.ssim);
        runs.push(VariantRun {
            variant,
            config,
            checkpoint,
            history,
            evaluation,
        });
    }
    let report = AblationReport {
        rows: runs
            .iter()
            .map(|r| AblationRow {
                variant: r.variant,
                mean: r.evaluation.summary.mean,
            })
            .collect(),
        config_hash: base.hash(),
        dataset_fingerprint: data.fingerprint(),
    };
    Ok(AblationOutcome { report, runs, test_set })
}

/// Writes `report.csv`, `report.md`, `grid.png` and, per variant,
/// `<name>/model.ckpt`, `<name>/history.csv` and `<name>/metrics.csv`.
pub fn write_ablation(outcome: &AblationOutcome, grid_samples: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    emit_report(&outcome.report, ReportFormat::Csv, dir.join("report.csv"))?;
    emit_report(&outcome.report, ReportFormat::Markdown, dir.join("report.md"))?;
    let variants: Vec<_> = outcome.runs.iter().map(|r| (r.variant, &r.checkpoint.params)).collect();
    let n = grid_samples.clamp(1, outcome.test_set.len());
    emit_image_grid(&variants, &outcome.test_set.samples()[..n], dir.join("grid.png"))?;
    for run in &outcome.runs {
        let sub = dir.join(run.variant.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        save_checkpoint(&run.checkpoint, sub.join("model.ckpt"))?;
        let write = |name: &str, text: String| {
            let p = sub.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("history.csv", run.history.to_csv())?;
        write("metrics.csv", metrics_csv(&run.evaluation.samples))?;
        write("config.toml", run.config.to_toml()?)?;
    }
    Ok(())
}
