//! Data pipeline, optimiser, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod data;
pub mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{Feeds, Mode, Session};
use crate::model_zoo::{build, Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub use data::{augment, augment_with, load_cifar10, load_cifar10_test, CifarRecord, Dataset, Normalization};
pub use optim::{LrSchedule, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Images drawn for training after the seeded shuffle.
    pub train_size: usize,
    /// Held-out images following the training draw.
    pub val_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 128,
            epochs: 300,
            lr: 0.1,
            milestones: vec![150, 225],
            lr_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            train_size: 45_000,
            val_size: 5_000,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 5k training images, 1k validation images, 5 epochs at constant rate.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 5,
            milestones: Vec::new(),
            train_size: 5_000,
            val_size: 1_000,
            ..TrainConfig::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            milestones: self.milestones.clone(),
            factor: self.lr_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch {} must be >= 2 for batch norm", self.batch)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be below epochs {}",
                self.milestones, self.epochs
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Model plus training settings, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// CIFAR-10 binary directory.
    #[serde(default)]
    pub data: Option<std::path::PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_acc\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_acc);
    }
    s
}

/// Parameter values and BN statistics captured at one point of training.
#[derive(Clone, Debug)]
pub struct Snapshot {
    params: Vec<Tensor<f32>>,
    states: Vec<Tensor<f32>>,
}

impl Snapshot {
    pub fn take(store: &ParamStore<f32>) -> Self {
        Snapshot {
            params: store.params().iter().map(|p| p.value.clone()).collect(),
            states: store.states().iter().map(|s| s.value.clone()).collect(),
        }
    }

    pub fn restore(&self, store: &mut ParamStore<f32>) {
        for (p, v) in store.params_mut().iter_mut().zip(&self.params) {
            p.value = v.clone();
        }
        for (s, v) in store.states_mut().iter_mut().zip(&self.states) {
            s.value = v.clone();
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best: Snapshot,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((epoch as u128) << 64);
    rng
}

/// Mini-batches of one epoch, a pure function of `(seed, epoch)`. The last
/// batch is dropped when it would hold a single image.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 1));
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Stack images `indices` into a `(B, 3, 32, 32)` batch, augmenting from
/// `rng` when given.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut values = Vec::with_capacity(indices.len() * data::PIXELS);
    let mut rng = rng;
    for &i in indices {
        let mut img = data.image01(i);
        if let Some(r) = rng.as_deref_mut() {
            img = augment(&img, r)?;
        }
        norm.apply(&mut img);
        values.extend_from_slice(&img);
    }
    let t = Tensor::from_vec(Shape::new(indices.len(), 3, data::SIDE, data::SIDE), values)?;
    Ok((t, indices.iter().map(|&i| data.label(i)).collect()))
}

/// Top-1 accuracy with running BN statistics.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, norm: &Normalization, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = make_batch(data, chunk, norm, None)?;
        let logits = model.forward(&x, Mode::Eval)?;
        let k = logits.shape().c();
        for (n, &y) in labels.iter().enumerate() {
            let row = &logits.data()[n * k..(n + 1) * k];
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(arg == y);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean training loss of one epoch. Aborts on a non-finite loss, naming the
/// node that first produced a non-finite value.
pub fn train_epoch(
    model: &mut Model<f32>,
    opt: &mut Sgd<f32>,
    data: &Dataset,
    norm: &Normalization,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let lr = cfg.schedule().lr_at(epoch);
    let mut aug_rng = epoch_rng(cfg.seed, epoch, 2);
    let mut total = 0.0;
    let mut seen = 0usize;
    for idx in epoch_batches(data.len(), cfg.batch, cfg.seed, epoch) {
        let (x, labels) = make_batch(data, &idx, norm, cfg.augment.then_some(&mut aug_rng))?;
        let feeds = Feeds::new().input(model.input, x).labels(labels);
        let mut sess = Session::new(&model.graph, Mode::Train);
        sess.forward(&mut model.store, &feeds, &[model.loss])?;
        let loss = sess.scalar(model.loss).expect("loss computed");
        if !loss.is_finite() {
            sess.check_finite()?;
            return Err(Error::NonFinite {
                node: model.loss,
                name: model.graph.node(model.loss).name.clone(),
            });
        }
        model.store.zero_grad();
        sess.backward(&mut model.store, model.loss)?;
        opt.step(&mut model.store, lr);
        total += loss * idx.len() as f64;
        seen += idx.len();
    }
    if seen == 0 {
        return Err(Error::Dataset("no training batch of at least 2 images".into()));
    }
    Ok(total / seen as f64)
}

/// Run `cfg.epochs` epochs, keeping the parameters with the best validation
/// accuracy (earliest on ties).
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    norm: &Normalization,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.classes != model.spec.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train_set.classes,
            model.spec.classes()
        )));
    }
    let mut opt = Sgd::new(&model.store, cfg.momentum, cfg.nesterov, cfg.weight_decay)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::NEG_INFINITY, Snapshot::take(&model.store));
    for epoch in 0..cfg.epochs {
        let train_loss = train_epoch(model, &mut opt, train_set, norm, cfg, epoch)?;
        let val_acc = evaluate(model, val_set, norm, cfg.batch)?;
        let entry = EpochLog {
            epoch,
            lr: cfg.schedule().lr_at(epoch),
            train_loss,
            val_acc,
        };
        on_epoch(&entry);
        log.push(entry);
        if val_acc > best.1 {
            best = (epoch, val_acc, Snapshot::take(&model.store));
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_acc: best.1,
        best: best.2,
    })
}

/// Trained model (best-validation parameters restored) plus what produced it.
pub struct RunResult {
    pub model: Model<f32>,
    pub normalization: Normalization,
    pub outcome: TrainOutcome,
}

/// Seeded train/val split of `data`, normalization from the training split,
/// model built from `run.model` with `run.train.seed`, then [`train`].
pub fn run(run: &RunConfig, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> Result<RunResult> {
    let cfg = &run.train;
    cfg.validate()?;
    let (train_set, val_set) = data.split(cfg.train_size, cfg.val_size, cfg.seed)?;
    let normalization = Normalization::from_dataset(&train_set)?;
    let mut model = build::<f32>(&run.model, cfg.seed)?;
    let outcome = train(&mut model, &train_set, &val_set, &normalization, cfg, on_epoch)?;
    outcome.best.restore(&mut model.store);
    Ok(RunResult {
        model,
        normalization,
        outcome,
    })
}

/// Two-class images with a bright left or right half plus noise, labelled
/// by the bright side.
pub fn synthetic_halves(n: usize, seed: u64) -> Dataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<CifarRecord> = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let pixels = (0..data::PIXELS)
                .map(|p| {
                    let x = p % data::SIDE;
                    let bright = (x < data::SIDE / 2) == (label == 0);
                    let base: i32 = if bright { 170 } else { 85 };
                    (base + rng.gen_range(-60..=60)).clamp(0, 255) as u8
                })
                .collect();
            CifarRecord { label, pixels }
        })
        .collect();
    Dataset::from_records(&records, 2).expect("valid records")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::RlaConfig;
    use crate::model_zoo::{Aggregation, Family};

    #[test]
    fn config_validation_and_toml() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            milestones: vec![225, 150],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let late = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert!(late.validate().is_err());
        let run: RunConfig = toml::from_str(
            "[model]\nfamily = \"resnet164\"\nblocks = 3\n[model.aggregation]\ntype = \"rla\"\nk = 12\n[train]\nepochs = 5\nmilestones = []\n",
        )
        .unwrap();
        assert_eq!(run.train.batch, 128);
        assert_eq!(run.model.blocks, Some(3));
        assert!(toml::from_str::<RunConfig>("[model]\nfamily = \"resnet164\"\n[train]\nepoch = 5\n").is_err());
    }

    #[test]
    fn batches_depend_only_on_seed_and_epoch() {
        let a = epoch_batches(300, 128, 4, 2);
        assert_eq!(a, epoch_batches(300, 128, 4, 2));
        assert_ne!(a, epoch_batches(300, 128, 4, 3));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        assert_eq!(epoch_batches(129, 128, 0, 0).len(), 1);
    }

    #[test]
    fn synthetic_loss_decreases_and_checkpoint_matches() {
        let data = synthetic_halves(96, 0);
        let (tr, va) = data.split(64, 32, 0).unwrap();
        let norm = Normalization::from_dataset(&tr).unwrap();
        let spec = ModelSpec::new(Family::Resnet110, Aggregation::Rla(RlaConfig::with_k(4)))
            .with_blocks(1)
            .with_classes(2);
        let cfg = TrainConfig {
            batch: 16,
            epochs: 3,
            lr: 0.05,
            milestones: vec![],
            augment: false,
            ..TrainConfig::default()
        };
        let mut m = build::<f32>(&spec, 0).unwrap();
        let out = train(&mut m, &tr, &va, &norm, &cfg, |_| {}).unwrap();
        let l: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");

        let mut again = build::<f32>(&spec, 0).unwrap();
        let mut opt = Sgd::new(&again.store, 0.9, true, 1e-4).unwrap();
        let first = train_epoch(&mut again, &mut opt, &tr, &norm, &cfg, 0).unwrap();
        assert_eq!(first.to_bits(), l[0].to_bits());

        out.best.restore(&mut m.store);
        let acc = evaluate(&mut m, &va, &norm, 16).unwrap();
        assert_eq!(acc, out.best_val_acc);
        let bytes = checkpoint::to_bytes(&m, Some(norm), serde_json::to_value(&cfg).unwrap()).unwrap();
        let (mut back, manifest) = checkpoint::from_bytes::<f32>(&bytes).unwrap();
        let norm2 = manifest.normalization.unwrap();
        assert_eq!(evaluate(&mut back, &va, &norm2, 16).unwrap(), acc);
    }
}
