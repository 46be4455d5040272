use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ulw_core::harness::{train_with_snapshots, ExperimentConfig};
use ulw_core::network::save_checkpoint;

const TINY: &str = "seed = 3\n\
[data.synthetic]\npairs = 10\nsize = 16\n\
[unet]\ndepth = 2\nbase_channels = 4\n\
[optim]\nsteps = 6\nbatch_size = 2\nlearning_rate = 1e-3\n";

fn ulw(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulw"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn ulw")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ulw(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(ulw(&["train", "--seed", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[optim]\nlearning_rte = 1\n").unwrap();
    let o = ulw(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.starts_with("error: ") && err.trim_end().lines().count() == 1,
        "{err}"
    );
    assert!(err.contains("learning_rte"), "{err}");
}

#[test]
fn synth_then_metrics_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = ulw(&["synth", "--config", "tiny.toml", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("data/manifest.tsv").is_file());

    let o = ulw(&["metrics", "data/clean", "data/clean"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,ssim,psnr_db,mse,ciede2000"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let v: Vec<f64> = f[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v, [1.0, f64::INFINITY, 0.0, 0.0], "{row}");
    }

    let o = ulw(&["metrics", "data/smoky", "data/clean", "--out", "m"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        fs::read_to_string(dir.path().join("m/metrics.csv"))
            .unwrap()
            .lines()
            .count()
            == 11
    );

    fs::remove_file(dir.path().join("data/clean/synth_0003.png")).unwrap();
    let o = ulw(&["metrics", "data/smoky", "data/clean"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("synth_0003"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = ulw(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--out",
            "run",
            "--checkpoint-every",
            "3",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("step,total,mse,ssim,perc"));
    assert_eq!(history.lines().count(), 7);
    assert!(!run.join("model.ckpt.tmp").exists());
    let full = fs::read(run.join("model.ckpt")).unwrap();

    let o = ulw(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "eval",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("samples: ssim "), "{}", stdout(&o));
    assert_eq!(
        fs::read_to_string(dir.path().join("eval/metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    // Stop at step 3, then resume to 6 under the full config.
    fs::write(dir.path().join("half.toml"), TINY.replace("steps = 6", "steps = 3")).unwrap();
    let o = ulw(&["train", "--config", "half.toml", "--out", "half"], dir.path());
    assert!(o.status.success());
    let o = ulw(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--out",
            "half",
            "--resume",
            "half/model.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config hash mismatch"), "{}", stderr(&o));

    // An interrupted run: the step-3 snapshot plus the history written so far.
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let data = cfg.data.load().unwrap();
    let mut snaps = Vec::new();
    train_with_snapshots(&cfg, &data, None, 3, &mut |c| {
        snaps.push(c.clone());
        Ok(())
    })
    .unwrap();
    let cut = dir.path().join("cut");
    fs::create_dir(&cut).unwrap();
    save_checkpoint(&snaps[0], cut.join("model.ckpt")).unwrap();
    let partial: Vec<&str> = history.lines().take(4).collect();
    fs::write(cut.join("history.csv"), partial.join("\n") + "\n").unwrap();

    let o = ulw(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--out",
            "cut",
            "--resume",
            "cut/model.ckpt",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(cut.join("model.ckpt")).unwrap(), full);
    assert_eq!(fs::read_to_string(cut.join("history.csv")).unwrap(), history);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ulw(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.ends_with("ok")).count(),
        4,
        "{}",
        stdout(&o)
    );
}
