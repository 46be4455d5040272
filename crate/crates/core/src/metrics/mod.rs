//! Image quality metrics: MSE, PSNR, SSIM and CIEDE2000.

mod color;
mod ssim;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use color::{ciede2000, rgb_to_lab, srgb_to_lab, LabColor};
pub use ssim::{ssim_raw, ssim_with_grad, SsimConfig, DYNAMIC_RANGE};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

fn same_shape(x: &Array4<f64>, y: &Array4<f64>, what: &str) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

pub(crate) fn mse_raw(x: &Array4<f64>, y: &Array4<f64>) -> Result<f64> {
    same_shape(x, y, "mse")?;
    let mut sum = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = a - b;
        sum += d * d;
    }
    Ok(sum / x.len() as f64)
}

/// Mean over pixels and channels of squared differences.
pub fn mse(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    mse_raw(x.data(), y.data())
}

/// PSNR in dB from a precomputed MSE; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(x: &ImageBatch, y: &ImageBatch, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

pub fn ssim(x: &ImageBatch, y: &ImageBatch, cfg: &SsimConfig) -> Result<f64> {
    ssim_raw(x.data(), y.data(), cfg)
}

/// Mean per-pixel CIEDE2000 after converting both images to CIELAB.
pub fn ciede2000_image(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    same_shape(x.data(), y.data(), "ciede2000")?;
    let lx = srgb_to_lab(x.data());
    let ly = srgb_to_lab(y.data());
    let total: f64 = lx.iter().zip(ly.iter()).map(|(a, b)| ciede2000(*a, *b)).sum();
    Ok(total / lx.len() as f64)
}

/// Quality metrics for one prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub ssim: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub ciede2000: f64,
}

pub fn evaluate_pair(pred: &ImageBatch, target: &ImageBatch) -> Result<MetricRecord> {
    let mse = mse(pred, target)?;
    Ok(MetricRecord {
        ssim: ssim(pred, target, &SsimConfig::default())?,
        psnr_db: psnr_from_mse(mse, DYNAMIC_RANGE),
        mse,
        ciede2000: ciede2000_image(pred, target)?,
    })
}

/// Field-wise means over a set of records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricRecord,
    pub count: usize,
    /// Records with infinite PSNR, left out of the PSNR mean.
    pub psnr_infinite: usize,
}

pub fn aggregate(records: &[MetricRecord]) -> Result<MetricSummary> {
    if records.is_empty() {
        return Err(Error::Aggregation("cannot aggregate an empty record list".into()));
    }
    let n = records.len() as f64;
    let mean_of = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let finite: Vec<f64> = records.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
    let psnr_db = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(MetricSummary {
        mean: MetricRecord {
            ssim: mean_of(|r| r.ssim),
            psnr_db,
            mse: mean_of(|r| r.mse),
            ciede2000: mean_of(|r| r.ciede2000),
        },
        count: records.len(),
        psnr_infinite: records.len() - finite.len(),
    })
}

/// Formats a metric value, writing infinities as `inf`.
pub fn format_value(v: f64, decimals: usize) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.decimals$}")
    }
}
