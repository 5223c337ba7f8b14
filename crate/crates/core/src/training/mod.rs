//! Momentum SGD with split learning rates, step decay, the epoch loop and
//! checkpoints.

mod batch;
mod checkpoint;
mod optim;

use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{collate, resize_all, Batch};
pub use checkpoint::{load_model, CheckpointMeta, CHECKPOINT_FORMAT};
pub use optim::Sgd;

use crate::data::{ImageSample, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossConfig};
use crate::model::VpNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub momentum: f64,
    /// Learning rates are divided by this every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Random flip and rotation of every training sample.
    pub augment: bool,
    /// Standard deviation of the heatmap targets, in map cells.
    pub heatmap_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 0.001,
            lr_rest: 0.01,
            momentum: 0.9,
            decay_factor: 10.0,
            decay_every: 20,
            epochs: 60,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.0,
            augment: true,
            heatmap_sigma: DEFAULT_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_backbone", self.lr_backbone),
            ("lr_rest", self.lr_rest),
            ("decay_factor", self.decay_factor),
            ("heatmap_sigma", self.heatmap_sigma),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("train.{key} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.decay_every < 1 {
            return Err(Error::config("train.decay_every must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// `(lr_backbone, lr_rest)` for a zero-based epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let k = (epoch / config.decay_every) as i32;
    let div = config.decay_factor.powi(k);
    (config.lr_backbone / div, config.lr_rest / div)
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_coord: f64,
    pub l_conf: f64,
    pub l_h1: f64,
    pub l_h2: f64,
    pub total: f64,
}

/// SplitMix64 finaliser folded over `parts`; decorrelates nearby seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// One forward/backward pass and optimiser update.
pub fn train_step(
    model: &VpNet,
    optimizer: &mut Sgd,
    batch: &Batch,
    loss: &LossConfig,
    lrs: (f64, f64),
) -> Result<LossBreakdown> {
    let images = batch.images.to_dtype(model.store().dtype())?;
    let out = model.forward_t(&images, true)?;
    let (total, breakdown) = total_loss(&out, &batch.targets, model.config().active_terms(), loss)?;
    let grads = total.backward()?;
    optimizer.step(&grads, lrs.0, lrs.1)?;
    Ok(breakdown)
}

/// Training state: model, optimiser, epoch counter and loss history.
pub struct Trainer {
    model: VpNet,
    config: TrainConfig,
    loss: LossConfig,
    optimizer: Sgd,
    epoch: usize,
    history: Vec<EpochLoss>,
}

impl Trainer {
    pub fn new(model: VpNet, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let optimizer = Sgd::new(model.store(), config.momentum, config.weight_decay);
        Ok(Self {
            model,
            config,
            loss,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &VpNet {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLoss] {
        &self.history
    }

    /// Overrides the total epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Runs one epoch over samples already resized to the input size.
    pub fn run_epoch(&mut self, resized: &[ImageSample]) -> Result<EpochLoss> {
        if resized.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..resized.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
        let lrs = lr_at(epoch, &self.config);
        let input_size = self.model.config().input_size();
        let grid_scale = self.model.config().grid_scale;
        let device = self.model.store().device().clone();

        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&ImageSample> = chunk.iter().map(|&i| &resized[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| mix_seed(&[seed, epoch as u64, i as u64])).collect();
            let augment = self.config.augment.then_some(seeds.as_slice());
            let batch = collate(&samples, augment, input_size, self.config.heatmap_sigma, grid_scale, &device)?;
            let b = train_step(&self.model, &mut self.optimizer, &batch, &self.loss, lrs)?;
            let w = chunk.len() as f64;
            sum.l_coord += b.l_coord * w;
            sum.l_conf += b.l_conf * w;
            sum.l_h1 += b.l_h1 * w;
            sum.l_h2 += b.l_h2 * w;
            sum.total += b.total * w;
        }
        let n = resized.len() as f64;
        let record = EpochLoss {
            epoch,
            l_coord: sum.l_coord / n,
            l_conf: sum.l_conf / n,
            l_h1: sum.l_h1 / n,
            l_h2: sum.l_h2 / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch}: total {:.5} (coord {:.5}, conf {:.5}, h1 {:.5}, h2 {:.5}) lr ({}, {})",
            record.total,
            record.l_coord,
            record.l_conf,
            record.l_h1,
            record.l_h2,
            lrs.0,
            lrs.1
        );
        self.epoch += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Trains on original-resolution samples until `config.epochs` epochs
    /// have completed.
    pub fn fit(&mut self, dataset: &[ImageSample]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let resized = resize_all(dataset, self.model.config().input_size())?;
        while self.epoch < self.config.epochs {
            self.run_epoch(&resized)?;
        }
        Ok(())
    }
}

/// Builds a model from `config`, seeded by `train.seed`, and trains it.
pub fn fit(
    dataset: &[ImageSample],
    model: &crate::model::ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<Trainer> {
    let net = VpNet::seeded(model, candle_core::DType::F32, train.seed)?;
    let mut trainer = Trainer::new(net, train.clone(), *loss)?;
    trainer.fit(dataset)?;
    Ok(trainer)
}

/// Writes `epoch,l_coord,l_conf,l_h1,l_h2,total`, one row per epoch.
pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,l_coord,l_conf,l_h1,l_h2,total\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch, h.l_coord, h.l_conf, h.l_h1, h.l_h2, h.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Flattened values of every parameter, in name order.
pub fn parameter_snapshot(model: &VpNet) -> Result<Vec<(String, Vec<f64>)>> {
    model
        .store()
        .params()
        .into_iter()
        .map(|(name, p)| {
            let t: &Tensor = p.var.as_tensor();
            Ok((name, t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?))
        })
        .collect()
}
