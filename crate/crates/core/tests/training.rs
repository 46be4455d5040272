use ulw_core::harness::{evaluate, resume, train, ExperimentConfig};
use ulw_core::network::{load_checkpoint, load_checkpoint_for_resume, save_checkpoint};

fn tiny(steps: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(
        "seed = 11\n[data.synthetic]\npairs = 10\nsize = 16\n[unet]\ndepth = 2\nbase_channels = 4\n[optim]\nbatch_size = 2\nlearning_rate = 1e-3\n",
    )
    .unwrap();
    cfg.optim.steps = steps;
    cfg
}

#[test]
fn checkpoint_on_disk_evaluates_like_the_trained_model() {
    let cfg = tiny(4);
    let data = cfg.data.load().unwrap();
    let (ckpt, history) = train(&cfg, &data).unwrap();
    assert_eq!(history.0.len(), 4);
    assert!(history.0.iter().all(|e| e.total.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.bitwise_eq(&ckpt));

    let (_, _, test) = cfg.split(&data).unwrap();
    let a = evaluate(&ckpt.params, &test).unwrap();
    let b = evaluate(&loaded.params, &test).unwrap();
    assert_eq!(a, b);
    // Evaluating twice gives the same row.
    assert_eq!(evaluate(&loaded.params, &test).unwrap(), a);
}

#[test]
fn resume_from_disk_refuses_other_configs() {
    let cfg = tiny(2);
    let data = cfg.data.load().unwrap();
    let (ckpt, _) = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();

    let other = ExperimentConfig {
        seed: 12,
        ..cfg.clone()
    };
    let err = load_checkpoint_for_resume(&path, &other.hash())
        .unwrap_err()
        .to_string();
    assert!(err.contains("config hash mismatch"), "{err}");
    assert!(resume(&other, &data, ckpt.clone()).is_err());

    // Finished checkpoints resume to themselves.
    let (same, history) = resume(&cfg, &data, load_checkpoint_for_resume(&path, &cfg.hash()).unwrap()).unwrap();
    assert!(same.bitwise_eq(&ckpt));
    assert!(history.0.is_empty());
}

#[test]
fn out_dir_does_not_change_the_result() {
    let cfg = tiny(3);
    let data = cfg.data.load().unwrap();
    let moved = ExperimentConfig {
        out_dir: "elsewhere".into(),
        ..cfg.clone()
    };
    let (a, _) = train(&cfg, &data).unwrap();
    let (b, _) = train(&moved, &data).unwrap();
    assert!(a.bitwise_eq(&b));
}
