//! Loss, optimizer, bag sampling, metrics, and the training loop.
//!
//! Within a batch every bag runs forward and backward on its own copy of the
//! model; the per-bag gradients are then summed in batch order on the main
//! thread. All randomness for a bag (tile subset, augmentation) comes from a
//! sub-stream keyed by `(seed, step, position in batch)`, so results are
//! identical with or without the thread pool.

mod adam;
mod loss;
mod metrics;
mod sampling;

pub use adam::{AdamConfig, AdamState};
pub use loss::{cross_entropy_loss, PROB_FLOOR};
pub use metrics::{argmax, compute_metrics, rank_auc, MetricsReport};
pub use sampling::{oversampling_weights, BalancedSampler};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{BagDataset, BagRecord, Split};
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::{BagView, Mode, Model};
use crate::par;
use crate::rng::{mix, substream, Prng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to one pass worth of draws over the training split.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 10,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("batch_size and steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const EVAL_TAG: u64 = 0xE7A1;

/// Sorted indices of the tiles used for a bag: all of them when the bag is
/// small enough, otherwise `n_tiles` drawn without replacement.
pub fn tile_subset(k: usize, n_tiles: usize, rng: &mut Prng) -> Vec<usize> {
    if k <= n_tiles {
        return (0..k).collect();
    }
    let mut idx = sample(rng, k, n_tiles).into_vec();
    idx.sort_unstable();
    idx
}

fn bag_inputs<T: Scalar>(bag: &BagRecord, n_tiles: usize, rng: &mut Prng) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    let idx = tile_subset(bag.len(), n_tiles, rng);
    let (p, locs) = bag.select(&idx)?;
    Ok((p.cast(), locs))
}

/// Mean cross-entropy over views for one bag, with parameter gradients
/// accumulated into `model`.
pub fn bag_loss_and_grad<T: Scalar>(model: &mut Model<T>, bag: &BagRecord, rng: &mut Prng) -> Result<f64> {
    let (patches, locs) = bag_inputs::<T>(bag, model.config.n_tiles, rng)?;
    let view = BagView {
        patches: &patches,
        locations: &locs,
        full_h: bag.full_h,
        full_w: bag.full_w,
    };
    let out = model.forward(&view, Mode::Train(rng))?;
    let n_views = T::lit(out.probs.len() as f64);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(out.probs.len());
    for p in &out.probs {
        let (l, mut g) = cross_entropy_loss(p, bag.label)?;
        loss += l.as_f64();
        g.iter_mut().for_each(|v| *v = *v / n_views);
        grads.push(g);
    }
    model.backward(out.cache, &grads)?;
    Ok(loss / out.probs.len() as f64)
}

/// Mutable training state: model, optimizer moments, and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub config: RunConfig,
}

impl Trainer {
    /// Fresh model initialised from the training seed. `config.model` must
    /// already be resolved against the dataset.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.training.seed, INIT_STREAM);
        let model = Model::init_new(&config.model, &mut rng)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model<f32>, config: &RunConfig) -> Self {
        let adam = AdamState::new(config.optimizer.clone(), &model);
        Trainer {
            model,
            adam,
            step: 0,
            config: config.clone(),
        }
    }

    /// One optimizer step on `batch`; returns the mean bag loss before the
    /// update.
    pub fn train_step(&mut self, batch: &[&BagRecord]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let key = mix(self.config.training.seed, self.step);
        let master = &self.model;
        let positions: Vec<usize> = (0..batch.len()).collect();
        let per_bag = par::map_slice(&positions, |&j| -> Result<(f64, Vec<Vec<f32>>)> {
            let mut local = master.clone();
            local.zero_grad();
            let mut rng = substream(key, j as u64);
            let loss = bag_loss_and_grad(&mut local, batch[j], &mut rng)?;
            let grads = local.params().iter().map(|p| p.grad.data().to_vec()).collect();
            Ok((loss, grads))
        });
        self.model.zero_grad();
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for r in per_bag {
            let (loss, grads) = r?;
            total += loss;
            for (p, g) in self.model.params_mut().into_iter().zip(grads) {
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += v * scale;
                }
            }
        }
        if !self.model.params().iter().all(|p| p.grad.all_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.adam.step(&mut self.model)?;
        self.step += 1;
        Ok(total / batch.len() as f64)
    }
}

/// Bag-level class probabilities for every bag, evaluated without
/// augmentation. Bags larger than `n_tiles` use a tile subset fixed by
/// `seed` and the bag's position.
pub fn predict<T: Scalar>(model: &Model<T>, bags: &[&BagRecord], seed: u64) -> Result<Vec<Vec<f64>>> {
    let positions: Vec<usize> = (0..bags.len()).collect();
    par::map_slice(&positions, |&i| -> Result<Vec<f64>> {
        let bag = bags[i];
        let mut rng = substream(mix(seed, EVAL_TAG), i as u64);
        let (patches, locs) = bag_inputs::<T>(bag, model.config.n_tiles, &mut rng)?;
        let view = BagView {
            patches: &patches,
            locations: &locs,
            full_h: bag.full_h,
            full_w: bag.full_w,
        };
        let out = model.forward(&view, Mode::Eval)?;
        Ok(out.probs[0].iter().map(|v| v.as_f64()).collect())
    })
    .into_iter()
    .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, bags: &[&BagRecord], seed: u64) -> Result<MetricsReport> {
    if bags.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let probs = predict(model, bags, seed)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    compute_metrics(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub train_loss: f64,
    pub metrics: MetricsReport,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,split,balanced_accuracy,macro_precision,macro_recall,macro_f1,macro_auc,cross_entropy,wall_time_s";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},validation", self.epoch);
        for v in self.metrics.values() {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{:.3}", self.wall_time_s);
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation cross-entropy.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub last: Trainer,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.history {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Trains on the train split, evaluating on validation after each epoch.
/// With `out`, writes `metrics.csv`, `best.ckpt` and `last.ckpt` there.
pub fn train(dataset: &BagDataset, config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.resolve_for(dataset)?;
    let train_bags = dataset.split(Split::Train);
    let val_bags = dataset.split(Split::Validation);
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::invalid(format!(
            "need non-empty train and validation splits (got {} and {})",
            train_bags.len(),
            val_bags.len()
        )));
    }
    let labels: Vec<usize> = train_bags.iter().map(|b| b.label).collect();
    let sampler = BalancedSampler::new(&labels, dataset.n_classes())?;
    let tc = config.training.clone();
    let steps = tc.steps_per_epoch.unwrap_or(train_bags.len().div_ceil(tc.batch_size));
    let mut draw_rng = substream(tc.seed, SAMPLER_STREAM);
    let mut trainer = Trainer::new(&config)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = (trainer.model.clone(), 0usize, f64::INFINITY);
    for epoch in 1..=tc.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let batch: Vec<&BagRecord> = (0..tc.batch_size).map(|_| train_bags[sampler.draw(&mut draw_rng)]).collect();
            loss_sum += trainer.train_step(&batch)?;
        }
        let metrics = evaluate(&trainer.model, &val_bags, tc.seed)?;
        let log = EpochLog {
            epoch,
            split: Split::Validation,
            train_loss: loss_sum / steps as f64,
            metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, validation CE {:.4}, AUC {:.3}",
            log.train_loss,
            metrics.cross_entropy,
            metrics.macro_auc
        );
        if metrics.cross_entropy < best.2 {
            best = (trainer.model.clone(), epoch, metrics.cross_entropy);
            if let Some(dir) = out {
                save_checkpoint(&dir.join("best.ckpt"), &best.0, &config, trainer.step)?;
            }
        }
        history.push(log);
    }
    let outcome = TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: trainer,
        history,
    };
    if let Some(dir) = out {
        save_checkpoint(&dir.join("last.ckpt"), &outcome.last.model, &config, outcome.last.step)?;
        let path = dir.join("metrics.csv");
        std::fs::write(&path, outcome.metrics_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

/// Deterministic model initialisation used by [`Trainer::new`].
pub fn init_rng(seed: u64) -> Prng {
    substream(seed, INIT_STREAM)
}
