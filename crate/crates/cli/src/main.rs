use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use ulw_core::harness::{
    evaluate, gradcheck_suite, metrics_csv, run_ablation, train_with_snapshots, write_ablation, DataSource,
    ExperimentConfig, SampleMetrics, GRADCHECK_TOLERANCE,
};
use ulw_core::image::{load_image, synth_dataset, write_paired_dataset, PairedDataset};
use ulw_core::metrics::{evaluate_pair, format_value};
use ulw_core::network::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Parser)]
#[command(
    name = "ulw",
    version,
    about = "Laparoscopic smoke removal: training, evaluation and ablation"
)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults if omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes model.ckpt, history.csv and config.toml
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written with the same config
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also overwrite model.ckpt every N steps so an interrupted run can resume
        #[arg(long, value_name = "N", default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Score a checkpoint on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use every sample instead of the test split
        #[arg(long)]
        all: bool,
    },
    /// Train and score the four ablation variants
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Pairwise metrics between same-named PNGs in two directories
    Metrics {
        pred: PathBuf,
        target: PathBuf,
        /// Write metrics.csv here instead of printing
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; fails if any error reaches 1e-3
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the configured synthetic paired dataset
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn save_atomically(ckpt: &Checkpoint, path: &Path) -> ulw_core::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(ckpt, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| ulw_core::Error::io(path, e))
}

/// Header plus the rows of an existing history.csv up to `step`, so a resumed
/// run keeps one continuous history. Missing files give just the header.
fn earlier_history(path: &Path, step: u64) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut lines = text.lines();
    let mut out = String::from(lines.next().unwrap_or("step,total,mse,ssim,perc"));
    out.push('\n');
    for line in lines {
        let s: Option<u64> = line.split(',').next().and_then(|f| f.parse().ok());
        if s.is_some_and(|s| s <= step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            common,
            resume: from,
            checkpoint_every,
        } => {
            let cfg = common.load()?;
            let data = cfg.data.load()?;
            create_dir(&cfg.out_dir)?;
            let ckpt_path = cfg.out_dir.join("model.ckpt");
            let history_path = cfg.out_dir.join("history.csv");
            let from = from.map(load_checkpoint).transpose()?;
            let start = from.as_ref().map_or(0, |c| c.step);
            let (ckpt, history) = train_with_snapshots(&cfg, &data, from, checkpoint_every, &mut |snap| {
                save_atomically(snap, &ckpt_path)
            })?;
            save_checkpoint(&ckpt, &ckpt_path)?;
            let mut csv = history.to_csv();
            if start > 0 {
                csv = earlier_history(&history_path, start) + csv.split_once('\n').map_or("", |(_, rows)| rows);
            }
            write(&history_path, &csv)?;
            write(&cfg.out_dir.join("config.toml"), &cfg.to_toml()?)?;
            if let (Some(first), Some(last)) = (history.head_mean(10), history.tail_mean(10)) {
                println!("trained to step {}: mean loss {first:.5} -> {last:.5}", ckpt.step);
            }
            println!("wrote {}", ckpt_path.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            all,
        } => {
            let cfg = common.load()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            if ckpt.config_hash != cfg.hash() {
                log::warn!("checkpoint was trained under a different config ({})", ckpt.config_hash);
            }
            let data = cfg.data.load()?;
            let data = if all { data } else { cfg.split(&data)?.2 };
            let eval = evaluate(&ckpt.params, &data)?;
            let m = eval.summary.mean;
            println!(
                "{} samples: ssim {} psnr_db {} mse {} ciede2000 {}",
                eval.summary.count,
                format_value(m.ssim, 4),
                format_value(m.psnr_db, 4),
                format_value(m.mse, 4),
                format_value(m.ciede2000, 4)
            );
            if common.out.is_some() {
                create_dir(&cfg.out_dir)?;
                write(&cfg.out_dir.join("metrics.csv"), &metrics_csv(&eval.samples))?;
            }
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let data = cfg.data.load()?;
            let outcome = run_ablation(&cfg, &data)?;
            write_ablation(&outcome, cfg.grid_samples, &cfg.out_dir)?;
            print!("{}", fs::read_to_string(cfg.out_dir.join("report.md"))?);
        }
        Command::Metrics { pred, target, out } => {
            let csv = metrics_csv(&pair_metrics(&pred, &target)?);
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    write(&dir.join("metrics.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for e in gradcheck_suite(seed)? {
                let pass = e.report.passes(GRADCHECK_TOLERANCE);
                ok &= pass;
                println!(
                    "{:<12} max_rel_error {:.3e} over {} entries  {}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.checked,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                eprintln!("error: gradient check exceeded tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { common } => {
            let cfg = common.load()?;
            let DataSource::Synthetic(mut spec) = cfg.data else {
                bail!("config data source is a manifest, not a synthetic spec");
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let ds: PairedDataset = synth_dataset(&spec)?;
            let manifest = write_paired_dataset(&ds, &cfg.out_dir)?;
            println!("wrote {} pairs, manifest {}", ds.len(), manifest.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

fn pair_metrics(pred: &Path, target: &Path) -> Result<Vec<SampleMetrics>> {
    let a = png_names(pred)?;
    let b = png_names(target)?;
    if let Some(name) = a.symmetric_difference(&b).next() {
        bail!(
            "{name} has no counterpart in both {} and {}",
            pred.display(),
            target.display()
        );
    }
    if a.is_empty() {
        bail!("no PNG files in {}", pred.display());
    }
    a.iter()
        .map(|name| {
            let x = load_image(pred.join(name))?;
            let y = load_image(target.join(name))?;
            let id = Path::new(name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(name)
                .to_string();
            let metrics = evaluate_pair(&x, &y).with_context(|| format!("pair {id}"))?;
            Ok(SampleMetrics { id, metrics })
        })
        .collect()
}
