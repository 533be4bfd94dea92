//! Training loop, evaluation and the in-memory checkpoint.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::metrics::{tape_rel_h1, tape_rel_lp, H1Stencil, MetricReport};
use crate::model::{DeepNeuralFmm, ModelConfig};
use crate::optim::{adam_step, LrSchedule, OptimizerState};
use crate::params::ParamSet;
use crate::quadtree::{build_geometry, build_interaction_tables, grid_to_leaves, leaves_to_grid, InteractionTables, TreeGeometry};
use crate::rng::{self, derive_seed, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RelH1,
    RelL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Global gradient-norm ceiling; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_lr: 5e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            epochs: 100,
            seed: 0,
            loss: LossKind::RelH1,
            grad_clip: None,
            eval_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "batch_size",
        "max_lr",
        "min_lr",
        "weight_decay",
        "epochs",
        "seed",
        "loss",
        "grad_clip",
        "eval_every",
        "model",
    ];

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            Error::Config(format!(
                "{}; valid keys: {} (model table: {})",
                e.message(),
                Self::KEYS.join(", "),
                ModelConfig::KEYS.join(", ")
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be positive".into()));
        }
        if !(self.max_lr >= self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy max_lr >= min_lr >= 0, got {} and {}",
                self.max_lr, self.min_lr
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        LrSchedule {
            max_lr: self.max_lr,
            min_lr: self.min_lr,
            total_steps: (self.epochs * samples.div_ceil(self.batch_size)) as u64,
        }
    }
}

/// Per-channel input standardisation and one output scale. A single
/// output scale keeps every relative metric unchanged by normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_scale: f64,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            input_mean: vec![0.0; channels],
            input_std: vec![1.0; channels],
            output_scale: 1.0,
        }
    }

    pub fn fit(ds: &Dataset) -> Self {
        let c = ds.header.input_planes.len();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut out_sq = 0.0;
        let mut count = 0usize;
        let mut out_count = 0usize;
        for r in &ds.records {
            for (k, &p) in ds.header.input_planes.iter().enumerate() {
                for &v in &r.planes[p] {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
            }
            count += r.planes[0].len();
            for &p in &ds.header.target_planes {
                out_sq += r.planes[p].iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
                out_count += r.planes[p].len();
            }
        }
        let n = count.max(1) as f64;
        let input_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let input_std = sq
            .iter()
            .zip(&input_mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let rms = (out_sq / out_count.max(1) as f64).sqrt();
        Normalizer {
            input_mean,
            input_std,
            output_scale: if rms > 0.0 { rms } else { 1.0 },
        }
    }

    fn apply(&self, f: &GridField) -> GridField {
        let c = f.channels();
        let data = f
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.input_mean[i % c]) / self.input_std[i % c])
            .collect();
        GridField::new(f.resolution(), c, data).expect("shape")
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub epoch: u64,
    /// Validation rel-H1 (or training loss without a validation split) at
    /// the time of saving.
    pub metric: f64,
    pub normalizer: Normalizer,
    pub fingerprint: [u8; 32],
}

impl Checkpoint {
    /// Rebuilds the model skeleton and checks every stored tensor against it.
    pub fn model(&self) -> Result<DeepNeuralFmm> {
        let (model, fresh) = DeepNeuralFmm::new(&self.config.model, 0)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "config implies {} parameter tensors, checkpoint holds {}",
                fresh.len(),
                self.params.len()
            )));
        }
        for ((name, t), (stored, s)) in fresh.iter().zip(self.params.iter()) {
            if name != stored || t.shape() != s.shape() {
                return Err(Error::Incompatible(format!(
                    "expected parameter {name} {:?}, found {stored} {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
        }
        if self.normalizer.input_mean.len() != self.config.model.in_channels {
            return Err(Error::Incompatible("normaliser width differs from in_channels".into()));
        }
        Ok(model)
    }

    /// Fails unless `ds` matches the model's resolution and input channels.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        check_dataset(&self.config.model, ds).map_err(|e| Error::Incompatible(e.to_string()))
    }
}

fn check_dataset(m: &ModelConfig, ds: &Dataset) -> Result<()> {
    if ds.resolution() != m.resolution() {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match model resolution {} (tree_depth {})",
            ds.resolution(),
            m.resolution(),
            m.tree_depth
        )));
    }
    if ds.header.input_planes.len() != m.in_channels || ds.header.target_planes.len() != m.out_channels {
        return Err(Error::Config(format!(
            "dataset has {} input and {} target channels, model expects {} and {}",
            ds.header.input_planes.len(),
            ds.header.target_planes.len(),
            m.in_channels,
            m.out_channels
        )));
    }
    Ok(())
}

/// One row of the metric history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
}

pub const HISTORY_HEADER: &str = "step,lr,train_loss,val_E1rel,val_E2rel,val_Linf,val_H1rel";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:e},{:e}", r.step, r.lr, r.train_loss);
        match r.val {
            Some(v) => {
                let _ = writeln!(s, ",{:e},{:e},{:e},{:e}", v.rel_l1, v.rel_l2, v.l_inf, v.rel_h1);
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

pub const METRICS_HEADER: &str = "sample,E1rel,E2rel,Linf,H1,H1rel";

/// Per-sample rows followed by a `mean` row.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let row = |s: &mut String, label: &str, r: &MetricReport| {
        let _ = writeln!(s, "{label},{:e},{:e},{:e},{:e},{:e}", r.rel_l1, r.rel_l2, r.l_inf, r.h1, r.rel_h1);
    };
    for (i, r) in reports.iter().enumerate() {
        row(&mut s, &i.to_string(), r);
    }
    row(&mut s, "mean", &MetricReport::mean(reports));
    s
}

/// Resolved geometry plus the per-sample tensors the loop consumes.
struct Prepared {
    geometry: TreeGeometry,
    tables: InteractionTables,
    stencil: H1Stencil,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
    raw_targets: Vec<GridField>,
}

fn geometry_for(m: &ModelConfig, ds: &Dataset) -> Result<TreeGeometry> {
    let side = ds.header.domain_side;
    Ok(build_geometry(m.tree_depth, side)?.with_origin([-0.5 * side, -0.5 * side]))
}

fn prepare(m: &ModelConfig, norm: &Normalizer, ds: &Dataset) -> Result<Prepared> {
    check_dataset(m, ds)?;
    let geometry = geometry_for(m, ds)?;
    let tables = build_interaction_tables(&geometry);
    let stencil = H1Stencil::morton(m.tree_depth, geometry.grid_spacing());
    let inputs = (0..ds.len())
        .map(|i| grid_to_leaves(&norm.apply(&ds.input(i)), &geometry))
        .collect::<Result<Vec<_>>>()?;
    let raw_targets: Vec<GridField> = (0..ds.len()).map(|i| ds.target(i)).collect();
    let targets = raw_targets
        .iter()
        .map(|t| {
            let s = 1.0 / norm.output_scale;
            let scaled = GridField::new(t.resolution(), t.channels(), t.data().iter().map(|v| v * s).collect())?;
            grid_to_leaves(&scaled, &geometry)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        geometry,
        tables,
        stencil,
        inputs,
        targets,
        raw_targets,
    })
}

fn sample_grads(
    model: &DeepNeuralFmm,
    params: &ParamSet,
    loss: LossKind,
    data: &Prepared,
    i: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(&data.inputs[i]);
    let out = model.forward(&mut tape, &vars, &data.tables, x)?;
    let l = match loss {
        LossKind::RelH1 => tape_rel_h1(&mut tape, out, &data.targets[i], &data.stencil),
        LossKind::RelL2 => tape_rel_lp(&mut tape, out, &data.targets[i], 2.0),
    }
    .map_err(|e| match e {
        Error::DegenerateTarget { .. } => Error::DegenerateTarget { sample: i },
        other => other,
    })?;
    let value = tape.value(l)[0];
    tape.backward(l)?;
    Ok((value, params.grads_from_tape(&tape)))
}

/// Mean loss and gradient over `batch`, reduced in batch order.
fn batch_grads(
    model: &DeepNeuralFmm,
    params: &ParamSet,
    loss: LossKind,
    data: &Prepared,
    batch: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let parts = batch
        .par_iter()
        .map(|&i| sample_grads(model, params, loss, data, i))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for (l, g) in parts {
        total += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
    }
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((total * scale, grads))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for v in grads.iter_mut().flatten() {
            *v *= s;
        }
    }
}

fn predict(model: &DeepNeuralFmm, params: &ParamSet, norm: &Normalizer, data: &Prepared, i: usize) -> Result<GridField> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(&data.inputs[i]);
    let y = model.forward(&mut tape, &vars, &data.tables, x)?;
    let mut out = leaves_to_grid(&tape.tensor(y), &data.geometry)?;
    for v in out.data_mut() {
        *v *= norm.output_scale;
    }
    Ok(out)
}

fn evaluate_prepared(model: &DeepNeuralFmm, params: &ParamSet, norm: &Normalizer, data: &Prepared) -> Result<Vec<MetricReport>> {
    let dx = data.geometry.grid_spacing();
    (0..data.inputs.len())
        .into_par_iter()
        .map(|i| {
            let pred = predict(model, params, norm, data, i)?;
            MetricReport::compute(&pred, &data.raw_targets[i], dx).map_err(|e| match e {
                Error::DegenerateTarget { .. } => Error::DegenerateTarget { sample: i },
                other => other,
            })
        })
        .collect()
}

/// Per-sample metrics of a checkpoint on `ds`, in physical units.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<Vec<MetricReport>> {
    let model = ckpt.model()?;
    ckpt.check_dataset(ds)?;
    let data = prepare(&ckpt.config.model, &ckpt.normalizer, ds)?;
    evaluate_prepared(&model, &ckpt.params, &ckpt.normalizer, &data)
}

/// Model prediction for sample `i` of `ds`.
pub fn predict_sample(ckpt: &Checkpoint, ds: &Dataset, i: usize) -> Result<GridField> {
    let model = ckpt.model()?;
    ckpt.check_dataset(ds)?;
    let data = prepare(&ckpt.config.model, &ckpt.normalizer, &ds.select(&[i]))?;
    predict(&model, &ckpt.params, &ckpt.normalizer, &data, 0)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Trains from fresh Xavier parameters. `fingerprint` identifies the
/// training data and is stored in every checkpoint.
pub fn train(cfg: &TrainConfig, train_ds: &Dataset, val_ds: Option<&Dataset>, fingerprint: [u8; 32]) -> Result<TrainOutcome> {
    train_with(cfg, train_ds, val_ds, fingerprint, |_| ControlFlow::Continue(()))
}

/// [`train`] with a callback invoked after every logged epoch. Returning
/// `Break` stops training after that epoch; the learning-rate schedule is
/// not rescaled.
pub fn train_with(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    fingerprint: [u8; 32],
    mut on_epoch: impl FnMut(&HistoryRow) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let norm = Normalizer::fit(train_ds);
    let data = prepare(&cfg.model, &norm, train_ds)?;
    let val = match val_ds {
        Some(v) if !v.is_empty() => Some(prepare(&cfg.model, &norm, v)?),
        _ => None,
    };
    let (model, mut params) = DeepNeuralFmm::new(&cfg.model, cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.weight_decay);
    let n = train_ds.len();
    let sched = cfg.schedule(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut epochs_run = 0u64;
    let snapshot = |params: &ParamSet, opt: &OptimizerState, step: u64, epoch: u64, metric: f64| Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        optimizer: opt.clone(),
        step,
        epoch,
        metric,
        normalizer: norm.clone(),
        fingerprint,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(derive_seed(cfg.seed, epoch as u64), streams::SHUFFLE));
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let batch_count = batches.len();
        let mut lr = sched.lr(step);
        for batch in batches {
            lr = sched.lr(step);
            let (loss, mut grads) = batch_grads(&model, &params, cfg.loss, &data, batch)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { batch: step as usize });
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            params.set_grads(grads)?;
            adam_step(&mut params, &mut opt, lr)?;
            params.clear_grads();
            loss_sum += loss;
            step += 1;
        }
        epochs_run = epoch as u64 + 1;
        let last_epoch = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every != 0 && !last_epoch {
            continue;
        }
        let train_loss = loss_sum / batch_count as f64;
        let report = match &val {
            Some(v) => Some(MetricReport::mean(&evaluate_prepared(&model, &params, &norm, v)?)),
            None => None,
        };
        let row = HistoryRow {
            step,
            lr,
            train_loss,
            val: report,
        };
        let flow = on_epoch(&row);
        history.push(row);
        let metric = report.map_or(train_loss, |r| r.rel_h1);
        if best.as_ref().is_none_or(|b| metric < b.metric) {
            best = Some(snapshot(&params, &opt, step, epoch as u64 + 1, metric));
        }
        if flow.is_break() {
            break;
        }
    }
    let last_metric = history.last().map_or(f64::NAN, |r| r.val.map_or(r.train_loss, |v| v.rel_h1));
    let last = snapshot(&params, &opt, step, epochs_run, last_metric);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.max_lr, c.min_lr, c.weight_decay), (32, 5e-3, 1e-5, 1e-4));
        assert_eq!(c.loss, LossKind::RelH1);
        assert_eq!(c.grad_clip, None);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let err = TrainConfig::from_toml("batchsize = 3").unwrap_err();
        assert!(err.to_string().contains("valid keys"));
        let partial = TrainConfig::from_toml("epochs = 3\n[model]\ntree_depth = 4\n").unwrap();
        assert_eq!(partial.model.hidden_width, 64);
        assert_eq!(partial.epochs, 3);
    }

    #[test]
    fn schedule_covers_all_steps() {
        let c = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.schedule(10).total_steps, 9);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        clip(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn csv_has_mean_row() {
        let r = MetricReport {
            rel_l1: 1.0,
            rel_l2: 2.0,
            l_inf: 3.0,
            h1: 4.0,
            rel_h1: 5.0,
        };
        let s = metrics_csv(&[r, r]);
        assert!(s.starts_with(METRICS_HEADER));
        assert_eq!(s.lines().last().unwrap(), "mean,1e0,2e0,3e0,4e0,5e0");
    }
}
