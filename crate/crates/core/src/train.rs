//! Training and evaluation loop: momentum SGD with iteration-keyed learning
//! rate drops, per-epoch validation and a line-delimited metrics stream.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cifar::{compute_channel_stats, make_batch, ChannelStats, CifarDataset, CifarRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::layers::{sgd_step, softmax_cross_entropy, Mode, SgdState};
use crate::resnet::{build_network, ArchConfig, Network};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Salt for the data-order and augmentation stream of worker 0.
const DATA_WORKER: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by 10.
    pub lr_drops: Vec<u64>,
    pub seed: u64,
    /// Apply weight decay to batch-norm scale and shift as well (default).
    pub decay_norm: bool,
    /// Use only the first `n` records of the training split.
    pub train_limit: Option<usize>,
    /// Use only the first `n` records of the validation split.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 182,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_drops: vec![32_000, 48_000, 64_000],
            seed: 0,
            decay_norm: true,
            train_limit: None,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("momentum must be in [0, 1) and weight decay ≥ 0".into()));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "lr drop iterations {:?} are not strictly increasing",
                self.lr_drops
            )));
        }
        if self.train_limit == Some(0) || self.val_limit == Some(0) {
            return Err(Error::InvalidConfig("subset limits must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect for global iteration `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| iteration >= d).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

/// One line of the metrics stream. Epoch 0 is the untrained baseline and
/// carries no training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }

    /// Equality ignoring wall-clock time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        Self { seconds: 0.0, ..self.clone() } == Self { seconds: 0.0, ..other.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Records selected for training and validation, with the normalization
/// constants computed on the full training split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<CifarRecord>,
    pub validation: Vec<CifarRecord>,
    pub stats: ChannelStats,
}

impl TrainData {
    pub fn prepare(dataset: &CifarDataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<Self> {
        let (train_idx, val_idx) = split.split(dataset.train.len())?;
        let stats = compute_channel_stats(train_idx.iter().map(|&i| &dataset.train[i]))?;
        let take = |idx: &[usize], limit: Option<usize>| -> Vec<CifarRecord> {
            let n = limit.map_or(idx.len(), |l| l.min(idx.len()));
            idx[..n].iter().map(|&i| dataset.train[i].clone()).collect()
        };
        Ok(Self {
            train: take(&train_idx, cfg.train_limit),
            validation: take(&val_idx, cfg.val_limit),
            stats,
        })
    }
}

/// Position of `label` when classes are ordered by descending score, ties
/// going to the lower class index.
pub fn label_rank<T: Scalar>(scores: &[T], label: usize) -> usize {
    let y = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > y || (s == y && j < label))
        .count()
}

/// Number of samples whose label is among the `k` highest scores.
pub fn topk_correct<T: Scalar>(scores: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| label_rank(scores.item(i), y) < k)
        .count()
}

/// Mean cross-entropy and top-1/top-5 percentages over `records`.
pub fn evaluate(
    model: &mut Network<f32>,
    records: &[CifarRecord],
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let (mut loss, mut top1, mut top5) = (0.0, 0, 0);
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&CifarRecord> = chunk.iter().collect();
        let (x, labels) = make_batch(&refs, stats, None);
        let scores = model.forward(&x, Mode::Eval)?;
        let (l, _) = softmax_cross_entropy(&scores, &labels)?;
        loss += l * chunk.len() as f64;
        top1 += topk_correct(&scores, &labels, 1);
        top5 += topk_correct(&scores, &labels, 5);
    }
    let n = records.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: 100.0 * top1 as f64 / n,
        top5: 100.0 * top5 as f64 / n,
    })
}

/// Everything that evolves during training.
pub struct TrainState {
    pub arch: ArchConfig,
    pub cfg: TrainConfig,
    pub model: Network<f32>,
    pub optimizer: SgdState<f32>,
    /// Global iterations completed.
    pub iteration: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Data-order and augmentation stream for the next epoch.
    pub data_rng: Rng,
}

impl TrainState {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(arch: ArchConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_network(&arch, &mut Rng::derived(cfg.seed, &[u64::MAX]))?;
        let optimizer = SgdState::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.decay_norm);
        let data_rng = Rng::derived(cfg.seed, &[DATA_WORKER, 1]);
        Ok(Self {
            arch,
            cfg,
            model,
            optimizer,
            iteration: 0,
            epoch: 0,
            data_rng,
        })
    }

    /// Runs one epoch of SGD and returns the mean training loss.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<f64> {
        if data.train.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        self.data_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let refs: Vec<&CifarRecord> = batch.iter().map(|&i| &data.train[i]).collect();
            let (x, labels) = make_batch(&refs, &data.stats, Some(&mut self.data_rng));
            self.model.zero_grads();
            let scores = self.model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&scores, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    loss,
                });
            }
            self.model.backward(&grad)?;
            self.optimizer.lr = self.cfg.lr_at(self.iteration);
            let mut params: Vec<_> = self.model.named_params_mut().into_iter().map(|(_, p)| p).collect();
            sgd_step(&mut params, &mut self.optimizer)?;
            self.iteration += 1;
            total += loss * batch.len() as f64;
        }
        self.epoch += 1;
        self.data_rng = Rng::derived(self.cfg.seed, &[DATA_WORKER, self.epoch as u64 + 1]);
        Ok(total / data.train.len() as f64)
    }
}

/// Trains until `state.epoch == state.cfg.epochs`. A fresh state (epoch 0)
/// first emits a baseline evaluation record. `on_epoch` runs after every
/// record, typically to append metrics and write a checkpoint.
pub fn train(
    state: &mut TrainState,
    data: &TrainData,
    mut on_epoch: impl FnMut(&MetricsRecord, &TrainState) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    let eval_batch = state.cfg.batch_size.max(128);
    if state.epoch == 0 {
        let start = Instant::now();
        let ev = evaluate(&mut state.model, &data.validation, &data.stats, eval_batch)?;
        let rec = MetricsRecord {
            epoch: 0,
            train_loss: None,
            val_loss: ev.loss,
            val_top1: ev.top1,
            val_top5: ev.top5,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, state)?;
        records.push(rec);
    }
    while state.epoch < state.cfg.epochs {
        let start = Instant::now();
        let train_loss = state.train_epoch(data)?;
        let ev = evaluate(&mut state.model, &data.validation, &data.stats, eval_batch)?;
        let rec = MetricsRecord {
            epoch: state.epoch,
            train_loss: Some(train_loss),
            val_loss: ev.loss,
            val_top1: ev.top1,
            val_top5: ev.top5,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, state)?;
        records.push(rec);
    }
    Ok(records)
}
