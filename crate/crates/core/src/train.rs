//! SGD with momentum, cosine schedule, top-k metrics and the epoch loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, random_crop_flip, AugPolicy};
use crate::autograd::Tape;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{make_batches, Dataset, Normalization};
use crate::error::{bail, Error, Result};
use crate::image::Image;
use crate::model::{Model, NetworkConfig};
use crate::nn::{cross_entropy_rows, Mode};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pad-4 random crop plus horizontal flip before the policy.
    pub crop_flip: bool,
    pub eval_batch_size: usize,
    /// Record zero wall time so that logs and checkpoints repeat bit for bit.
    pub deterministic: bool,
    /// Augmentation policy file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            crop_flip: false,
            eval_batch_size: 200,
            deterministic: false,
            policy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            bail!(Config, "batch sizes must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be a finite non-negative number, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        Ok(())
    }
}

/// A run description: `[network]` and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// `g ← grad + wd·p; v ← m·v + g; p ← p − lr·v`.
pub fn sgd_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        bail!(Shape, "sgd shapes differ: param {:?}, grad {:?}, velocity {:?}", param.shape(), grad.shape(), velocity.shape());
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    let mut p = param.to_vec();
    let mut v = velocity.to_vec();
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(grad.values().iter()) {
        let g = g + wd * *p;
        *v = m * *v + g;
        *p -= lr * *v;
    }
    *param = Tensor::from_vec(param.shape(), p)?;
    *velocity = Tensor::from_vec(velocity.shape(), v)?;
    Ok(())
}

/// `lr0 · ½ · (1 + cos(π·epoch/total))` for `0 ≤ epoch < total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> Result<f64> {
    if epoch >= total {
        bail!(Config, "epoch {} outside schedule of {} epochs", epoch, total);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()))
}

/// Number of rows whose label ranks among the `k` largest logits,
/// ties going to the lower class index.
pub fn topk_hits<T: Element>(logits: &[T], classes: usize, labels: &[usize], k: usize) -> Result<usize> {
    if k == 0 || k > classes {
        bail!(Config, "k = {} outside 1..={}", k, classes);
    }
    if logits.len() != labels.len() * classes {
        bail!(Shape, "{} logits for {} labels of {} classes", logits.len(), labels.len(), classes);
    }
    let mut hits = 0;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        if label >= classes {
            bail!(Data, "label {} out of range for {} classes", label, classes);
        }
        let target = row[label];
        let ahead = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < label)).count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits)
}

pub fn topk_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    if logits.ndim() != 2 {
        bail!(Shape, "logits must be [N, C], got {:?}", logits.shape());
    }
    if labels.is_empty() {
        bail!(Data, "no labels to score");
    }
    Ok(topk_hits(&logits.values(), logits.shape()[1], labels, k)? as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

/// Eval-mode metrics over the whole dataset; the result does not depend on `batch_size`.
pub fn evaluate<T: Element>(model: &Model<T>, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        bail!(Data, "cannot evaluate on an empty dataset");
    }
    let classes = model.config().num_classes;
    if classes != ds.classes {
        bail!(Config, "model has {} classes but the dataset has {}", classes, ds.classes);
    }
    let k5 = classes.min(5);
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0f64);
    for batch in make_batches(ds.len(), batch_size, false, 0)? {
        let x = norm.batch::<T>(batch.iter().map(|&i| &ds.records[i].image))?;
        let labels: Vec<usize> = batch.iter().map(|&i| ds.records[i].label as usize).collect();
        let logits = model.predict(&x)?;
        let values = logits.values();
        top1 += topk_hits(&values, classes, &labels, 1)?;
        top5 += topk_hits(&values, classes, &labels, k5)?;
        let wide: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
        loss += cross_entropy_rows(&wide, classes, &labels)?.iter().sum::<f64>();
    }
    let n = ds.len() as f64;
    Ok(EvalResult { top1: top1 as f64 / n, top5: top5 as f64 / n, loss: loss / n })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "epoch,train_loss,top1,top5,lr,seconds";
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{}", self.epoch, self.train_loss, self.top1, self.top5, self.lr, self.seconds)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Epoch (1-based) with the highest test top-1, earliest on ties.
    pub best_epoch: usize,
}

struct Sgd<T: Element> {
    velocity: Vec<Tensor<T>>,
    momentum: f64,
    weight_decay: f64,
}

impl<T: Element> Sgd<T> {
    fn new(model: &Model<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        let velocity = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Result<_>>()?;
        Ok(Self { velocity, momentum, weight_decay })
    }
}

fn augment_images<R: Rng>(images: Vec<Image>, cfg: &TrainConfig, policy: Option<&AugPolicy>, rng: &mut R) -> Vec<Image> {
    let images = if cfg.crop_flip { images.iter().map(|img| random_crop_flip(img, 4, rng)).collect() } else { images };
    match policy {
        Some(p) => augment_batch(&images, p, rng),
        None => images,
    }
}

/// Runs one optimisation step and returns the batch loss.
fn train_step<T: Element, R: Rng>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let input = tape.constant(x);
    let pass = model.forward_vars(&mut tape, input, &params, Mode::Train, rng)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let value = tape.value(loss).values()[0].as_f64();
    if !value.is_finite() {
        bail!(Numerics, "loss is {}", value);
    }
    let grads = tape.backward(loss)?;
    for (i, var) in params.iter().enumerate() {
        let Some(g) = grads.get(*var) else { continue };
        let (momentum, wd) = (sgd.momentum, sgd.weight_decay);
        sgd_step(&mut model.params_mut()[i].value, g, &mut sgd.velocity[i], lr, momentum, wd)?;
    }
    model.commit_stats(pass.stats);
    Ok(value)
}

/// Where a run writes `metrics.csv`, `best.ckpt` and `last.ckpt`.
pub struct RunDir<'a> {
    pub path: &'a Path,
    /// Copied into each checkpoint with the per-epoch fields filled in.
    pub meta: CheckpointMeta,
}

/// Trains `model` in place, reporting each epoch to `on_epoch`.
pub fn train(
    model: &mut Model<f32>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    policy: Option<&AugPolicy>,
    run_dir: Option<RunDir<'_>>,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        bail!(Data, "training set is empty");
    }
    if model.config().num_classes != train_ds.classes {
        bail!(Config, "model has {} classes but the dataset has {}", model.config().num_classes, train_ds.classes);
    }
    let norm = train_ds.kind.normalization();
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = match &run_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.path.join("metrics.csv"))?;
            writeln!(f, "{}", MetricsRecord::HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr)?;
        let shuffle_seed: u64 = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let mut loss_sum = 0.0;
        for (b, batch) in make_batches(train_ds.len(), cfg.batch_size, true, shuffle_seed)?.into_iter().enumerate() {
            let images: Vec<Image> = batch.iter().map(|&i| train_ds.records[i].image.clone()).collect();
            let images = augment_images(images, cfg, policy, &mut rng);
            let labels: Vec<usize> = batch.iter().map(|&i| train_ds.records[i].label as usize).collect();
            let x = norm.batch::<f32>(&images)?;
            let loss = train_step(model, &mut sgd, x, &labels, lr, &mut rng).map_err(|e| match e {
                Error::Numerics(m) => Error::Numerics(format!("epoch {} batch {}: {m}", epoch + 1, b)),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let eval = evaluate(model, test_ds, &norm, cfg.eval_batch_size)?;
        let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        let record =
            MetricsRecord { epoch: epoch + 1, train_loss: loss_sum / train_ds.len() as f64, top1: eval.top1, top5: eval.top5, lr, seconds };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{record}")?;
            f.flush()?;
        }
        on_epoch(&record);
        metrics.push(record);

        let improved = best.is_none_or(|(_, top1)| record.top1 > top1);
        if improved {
            best = Some((record.epoch, record.top1));
        }
        if let Some(dir) = &run_dir {
            let meta = CheckpointMeta { epoch: record.epoch, top1: record.top1, top5: record.top5, seconds, ..dir.meta.clone() };
            save_checkpoint(model, &meta, dir.path.join("last.ckpt"))?;
            if improved {
                save_checkpoint(model, &meta, dir.path.join("best.ckpt"))?;
            }
        }
    }
    Ok(TrainOutcome { metrics, best_epoch: best.map_or(0, |(e, _)| e) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_two_class;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]).unwrap();
        sgd_step(&mut p, &Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap(), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.to_vec(), vec![1.0 - 0.05, 2.0 + 0.1]);

        let mut p = Tensor::scalar(0.0f64);
        let mut v = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((p.to_vec()[0] + 2.9).abs() < 1e-12);

        let mut p = Tensor::scalar(1.0f64);
        let mut v = Tensor::scalar(0.0);
        sgd_step(&mut p, &Tensor::scalar(0.0), &mut v, 1.0, 0.0, 0.1).unwrap();
        assert!((p.to_vec()[0] - 0.9).abs() < 1e-15);

        let mut v = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(sgd_step(&mut p, &Tensor::scalar(0.0), &mut v, 1.0, 0.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        let last = cosine_lr(9, 10, 0.1).unwrap();
        let expected = 0.1 * 0.5 * (1.0 + (std::f64::consts::PI * 0.9).cos());
        assert_eq!(last, expected);
        let lrs: Vec<f64> = (0..10).map(|e| cosine_lr(e, 10, 0.1).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(cosine_lr(10, 10, 0.1), Err(Error::Config(_))));
    }

    fn sort_oracle(row: &[f64], label: usize, k: usize) -> bool {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx[..k].contains(&label)
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // coarse values force ties
        let logits: Vec<f64> = (0..500).map(|_| rng.gen_range(0..4) as f64).collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..10)).collect();
        let t = Tensor::from_vec(&[50, 10], logits.clone()).unwrap();
        for k in 1..=10 {
            let expected = (0..50).filter(|&i| sort_oracle(&logits[i * 10..(i + 1) * 10], labels[i], k)).count();
            assert_eq!(topk_accuracy(&t, &labels, k).unwrap(), expected as f64 / 50.0);
        }
        assert_eq!(topk_accuracy(&t, &labels, 10).unwrap(), 1.0);
        assert!(matches!(topk_accuracy(&t, &labels, 0), Err(Error::Config(_))));
        assert!(matches!(topk_accuracy(&t, &labels, 11), Err(Error::Config(_))));
    }

    #[test]
    fn topk_argmax() {
        let t = Tensor::from_vec(&[2, 3], vec![0.1f32, 0.9, 0.0, 2.0, 1.0, 3.0]).unwrap();
        assert_eq!(topk_accuracy(&t, &[1, 2], 1).unwrap(), 1.0);
        let zeros = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(topk_accuracy::<f32>(&zeros, &[0, 1], 1).unwrap(), 0.5);
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        synthetic_two_class(n, seed)
    }

    fn toy_model(seed: u64) -> Model<f32> {
        let cfg = NetworkConfig { stages: vec![1], base_growth: 4, init_channels: 4, ..NetworkConfig::effcnet_cifar(2) };
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let ds = toy_dataset(64, 1);
        let mut model = toy_model(0);
        let before: Vec<_> = model.params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig { epochs: 1, lr: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
        train(&mut model, &ds, &ds, &cfg, None, None, |_| {}).unwrap();
        for (a, b) in before.iter().zip(model.params()) {
            assert!(a.bit_eq(&b.value), "{}", b.name);
        }
    }

    #[test]
    fn evaluation_is_partition_invariant() {
        let ds = toy_dataset(30, 2);
        let model = toy_model(3);
        let norm = ds.kind.normalization();
        let a = evaluate(&model, &ds, &norm, 1).unwrap();
        let b = evaluate(&model, &ds, &norm, 100).unwrap();
        let c = evaluate(&model, &ds, &norm, 7).unwrap();
        assert_eq!((a.top1, a.top5), (b.top1, b.top5));
        assert_eq!((a.top1, a.top5), (c.top1, c.top5));
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!(a.top1 <= a.top5);
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let ds = toy_dataset(40, 4);
        let mut model = toy_model(5);
        model.zero_head();
        let r = evaluate(&model, &ds, &ds.kind.normalization(), 16).unwrap();
        assert_eq!(r.top1, 0.5);
        assert!((r.loss - 2f64.ln()).abs() < 1e-6);
        let empty = Dataset { records: vec![], ..ds };
        assert!(matches!(evaluate(&model, &empty, &empty.kind.normalization(), 4), Err(Error::Data(_))));
    }

    #[test]
    fn toy_run_learns_and_repeats() {
        let ds = toy_dataset(64, 6);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, seed: 9, deterministic: true, ..TrainConfig::default() };
        let mut a = toy_model(1);
        let ra = train(&mut a, &ds, &ds, &cfg, None, None, |_| {}).unwrap();
        let mut b = toy_model(1);
        let rb = train(&mut b, &ds, &ds, &cfg, None, None, |_| {}).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
        assert_eq!(ra.metrics.last().unwrap().top1, 1.0);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert!(p.value.bit_eq(&q.value));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = toy_dataset(32, 7);
        let mut model = toy_model(2);
        let cfg = TrainConfig { epochs: 1, lr: 1e30, momentum: 0.0, batch_size: 8, ..TrainConfig::default() };
        let err = train(&mut model, &ds, &ds, &cfg, None, None, |_| {}).unwrap_err();
        match err {
            Error::Numerics(m) => assert!(m.contains("epoch 1 batch"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn run_config_toml() {
        let cfg = RunConfig::from_toml("[network]\nstages = [1]\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("[train]\nmomentum = 1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_line_format() {
        let r = MetricsRecord { epoch: 2, train_loss: 0.5, top1: 0.25, top5: 1.0, lr: 0.1, seconds: 0.0 };
        assert_eq!(r.to_string(), "2,0.5,0.25,1,0.1,0");
        assert_eq!(MetricsRecord::HEADER.split(',').count(), 6);
    }
}
