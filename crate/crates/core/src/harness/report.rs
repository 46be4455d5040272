//! Report tables and image grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3};

use super::ablation::{AblationReport, Variant};
use crate::error::{Error, Result};
use crate::image::{to_rgb8, PairedSample};
use crate::metrics::format_value;
use crate::network::{model_forward, ModelParams};

pub const COLUMNS: [&str; 5] = ["Methods", "SSIM ↑", "PSNR ↑", "MSE ↓", "CIEDE-2000 ↓"];
const DECIMALS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn render_report(report: &AblationReport, format: ReportFormat) -> Result<String> {
    let rows = report.ordered_rows()?;
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.variant.label().to_string(),
                format_value(r.mean.ssim, DECIMALS),
                format_value(r.mean.psnr_db, DECIMALS),
                format_value(r.mean.mse, DECIMALS),
                format_value(r.mean.ciede2000, DECIMALS),
            ]
        })
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", COLUMNS.join(","));
            for c in &cells {
                let _ = writeln!(out, "{}", c.join(","));
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|---|---:|---:|---:|---:|");
            for c in &cells {
                let _ = writeln!(out, "| {} |", c.join(" | "));
            }
            let _ = writeln!(out);
            let _ = writeln!(out, "Config hash: `{}`  ", report.config_hash);
            let _ = writeln!(out, "Dataset fingerprint: `{}`", report.dataset_fingerprint);
        }
    }
    Ok(out)
}

pub fn emit_report(report: &AblationReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_report(report, format)?).map_err(|e| Error::io(path, e))
}

/// Row order of the comparison grid, after the smoky and clean rows.
pub const GRID_VARIANTS: [Variant; 4] = [
    Variant::NoWiener,
    Variant::NoSsimLoss,
    Variant::NoPerceptualLoss,
    Variant::FullUlw,
];

/// Grid as a `(3, 6 h, n w)` array: rows smoky, clean, then one per variant
/// in [`GRID_VARIANTS`] order; one column per sample.
pub fn image_grid(variants: &[(Variant, &ModelParams)], samples: &[PairedSample]) -> Result<Array3<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Report("image grid needs at least one sample".into()))?;
    let (h, w) = first.smoky.spatial();
    let models = GRID_VARIANTS
        .iter()
        .map(|v| {
            variants
                .iter()
                .find(|(x, _)| x == v)
                .map(|(_, p)| *p)
                .ok_or_else(|| Error::Report(format!("image grid is missing variant `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = 2 + models.len();
    let mut grid = Array3::zeros((3, rows * h, samples.len() * w));
    for (col, sample) in samples.iter().enumerate() {
        if sample.smoky.spatial() != (h, w) {
            return Err(Error::Dimension(format!(
                "grid samples must share a size: {:?} vs {:?}",
                sample.smoky.spatial(),
                (h, w)
            )));
        }
        let mut tiles = vec![sample.smoky.clone(), sample.clean.clone()];
        for params in &models {
            tiles.push(model_forward(params, &sample.smoky)?);
        }
        for (row, tile) in tiles.iter().enumerate() {
            grid.slice_mut(s![.., row * h..(row + 1) * h, col * w..(col + 1) * w])
                .assign(&tile.data().slice(s![0, .., .., ..]));
        }
    }
    Ok(grid)
}

pub fn emit_image_grid(
    variants: &[(Variant, &ModelParams)],
    samples: &[PairedSample],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let grid = image_grid(variants, samples)?;
    let img: RgbImage = to_rgb8(grid.view());
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Report(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ablation::AblationRow;
    use crate::image::{synth_dataset, SyntheticSpec};
    use crate::metrics::MetricRecord;
    use crate::network::{build_model, UNetConfig};
    use crate::wiener::WienerInit;

    fn report() -> AblationReport {
        let rows = Variant::ALL
            .iter()
            .enumerate()
            .map(|(i, &variant)| AblationRow {
                variant,
                mean: MetricRecord {
                    ssim: 0.9 + i as f64 * 0.01,
                    psnr_db: if i == 3 { f64::INFINITY } else { 30.123456 },
                    mse: 0.00071,
                    ciede2000: 1.81357,
                },
            })
            .collect();
        AblationReport {
            rows,
            config_hash: "abc".into(),
            dataset_fingerprint: "def".into(),
        }
    }

    #[test]
    fn markdown_table_shape() {
        let md = render_report(&report(), ReportFormat::Markdown).unwrap();
        let table: Vec<&str> = md.lines().take_while(|l| l.starts_with('|')).collect();
        assert_eq!(table.len(), 6);
        assert_eq!(table[0], "| Methods | SSIM ↑ | PSNR ↑ | MSE ↓ | CIEDE-2000 ↓ |");
        for line in &table[2..] {
            assert_eq!(line.matches('|').count(), 6, "{line}");
        }
        assert!(table[2].starts_with("| w/o Learnable Wiener filter | 0.9000 | 30.1235 | 0.0007 | 1.8136 |"));
        assert!(table[5].contains("Full ULW") && table[5].contains("| inf |"));
        assert!(!md.contains("**"));
        assert!(md.contains("`abc`") && md.contains("`def`"));
    }

    #[test]
    fn csv_parses_back() {
        let csv = render_report(&report(), ReportFormat::Csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "Methods,SSIM ↑,PSNR ↑,MSE ↓,CIEDE-2000 ↓");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 4);
        for (row, v) in rows.iter().zip(Variant::ALL) {
            assert_eq!(row[0], v.label());
            let expected = report().row(v).unwrap().mean;
            assert_eq!(row[1].parse::<f64>().unwrap(), (expected.ssim * 1e4).round() / 1e4);
            assert_eq!(
                row[2].parse::<f64>().unwrap(),
                if v == Variant::FullUlw { f64::INFINITY } else { 30.1235 }
            );
        }
    }

    #[test]
    fn missing_variant_is_a_report_error() {
        let mut r = report();
        r.rows.remove(1);
        let err = render_report(&r, ReportFormat::Csv).unwrap_err();
        assert!(
            err.to_string().contains("no_ssim_loss") || err.to_string().contains("4 variant"),
            "{err}"
        );
    }

    #[test]
    fn grid_layout_and_determinism() {
        let data = synth_dataset(&SyntheticSpec {
            pairs: 3,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        };
        let models: Vec<_> = Variant::ALL
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let wiener = (v != Variant::NoWiener).then(WienerInit::default);
                (v, build_model(&cfg, wiener.as_ref(), i as u64).unwrap())
            })
            .collect();
        let refs: Vec<_> = models.iter().map(|(v, p)| (*v, p)).collect();
        let grid = image_grid(&refs, data.samples()).unwrap();
        assert_eq!(grid.dim(), (3, 6 * 16, 3 * 16));
        assert!(grid.iter().all(|v| (0.0..=1.0).contains(v)));
        let tile = |row: usize, col: usize| {
            grid.slice(s![.., row * 16..(row + 1) * 16, col * 16..(col + 1) * 16])
                .to_owned()
        };
        assert_eq!(tile(0, 1), data.samples()[1].smoky.data().slice(s![0, .., .., ..]));
        assert_eq!(tile(1, 2), data.samples()[2].clean.data().slice(s![0, .., .., ..]));
        let full = model_forward(&models[3].1, &data.samples()[0].smoky).unwrap();
        assert_eq!(tile(5, 0), full.data().slice(s![0, .., .., ..]));

        let dir = tempfile::tempdir().unwrap();
        emit_image_grid(&refs, data.samples(), dir.path().join("a.png")).unwrap();
        emit_image_grid(&refs, data.samples(), dir.path().join("b.png")).unwrap();
        let a = fs::read(dir.path().join("a.png")).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b.png")).unwrap());
        let decoded = image::open(dir.path().join("a.png")).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (48, 96));

        assert!(matches!(image_grid(&refs[..3], data.samples()), Err(Error::Report(_))));
    }
}
