use nfmm_core::datagen::{build_dataset, Dataset, GenerateConfig, Regime, SourceKind};
use nfmm_core::io::{dataset_fingerprint, read_checkpoint, write_checkpoint};
use nfmm_core::metrics::MetricReport;
use nfmm_core::model::ModelConfig;
use nfmm_core::train::{evaluate, history_csv, train, LossKind, TrainConfig, HISTORY_HEADER};
use nfmm_core::Error;

fn data(level: usize, seed: u64) -> (Dataset, Dataset) {
    build_dataset(&GenerateConfig::new(2, Regime::Weak, SourceKind::Point, 6.0, 6, 3, seed, level)).unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 4,
        seed,
        model: ModelConfig {
            in_channels: 1,
            hidden_width: 8,
            latent: 8,
            tree_depth: 3,
            model_layers: 1,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = data(3, 1);
    let fp = dataset_fingerprint(&tr);
    let a = train(&config(5), &tr, Some(&va), fp).unwrap();
    let b = train(&config(5), &tr, Some(&va), fp).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.last, b.last);
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert!(history_csv(&a.history).starts_with(HISTORY_HEADER));

    let c = train(&config(6), &tr, Some(&va), fp).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn losses_are_finite_and_fall() {
    let (tr, _) = data(3, 2);
    let mut cfg = config(0);
    cfg.epochs = 12;
    for loss in [LossKind::RelH1, LossKind::RelL2] {
        cfg.loss = loss;
        let out = train(&cfg, &tr, None, [0; 32]).unwrap();
        assert_eq!(out.history.len(), 12);
        let first = out.history[0].train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(first.is_finite() && last.is_finite());
        assert!(last < first, "{loss:?}: {first} -> {last}");
        assert_eq!(out.last.step, 12 * 3);
    }
}

#[test]
fn best_checkpoint_reproduces_logged_metrics() {
    let (tr, va) = data(3, 3);
    let out = train(&config(1), &tr, Some(&va), dataset_fingerprint(&tr)).unwrap();
    let logged = out
        .history
        .iter()
        .filter_map(|r| r.val)
        .map(|v| v.rel_h1)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.metric, logged);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    write_checkpoint(&path, &out.best).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, out.best);
    let reports = evaluate(&back, &va).unwrap();
    assert_eq!(reports, evaluate(&out.best, &va).unwrap());
    assert_eq!(MetricReport::mean(&reports).rel_h1, logged);

    let last_row = out.history.last().unwrap().val.unwrap();
    assert_eq!(MetricReport::mean(&evaluate(&out.last, &va).unwrap()), last_row);
}

#[test]
fn evaluation_rejects_mismatched_resolution() {
    let (tr, _) = data(3, 4);
    let (other, _) = data(4, 4);
    let out = train(&TrainConfig { epochs: 1, ..config(0) }, &tr, None, [0; 32]).unwrap();
    assert!(matches!(evaluate(&out.last, &other), Err(Error::Incompatible(_))));
    assert!(matches!(train(&config(0), &other, None, [0; 32]), Err(Error::Config(_))));
}
