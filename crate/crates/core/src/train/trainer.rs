//! Teacher-forced training with accumulated Adam steps and early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossValues, LossWeights};
use super::sampler::{Sample, Sampler, Sampling, WindowRef};
use crate::datamodel::{Dataset, ObserverId, Split};
use crate::error::{Error, Result};
use crate::integrator::{Model, ModelConfig};
use crate::numeric::{Adam, AdamConfig, Graph};
use crate::synthgen::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Learning rate, moment decays and the accumulation count.
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Smallest validation improvement that resets the patience counter.
    pub min_delta: f64,
    pub patience: usize,
    /// Fraction of `T′` shared by consecutive training windows.
    pub overlap: f64,
    pub sampling: Sampling,
    pub seed: u64,
    /// Caps the number of training windows visited per epoch.
    pub samples_per_epoch: Option<usize>,
    /// Caps the number of validation windows.
    pub val_samples: Option<usize>,
    pub weights: LossWeights,
    /// Omit wall-clock times from the log so runs compare byte for byte.
    pub deterministic_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            adam: AdamConfig::default(),
            epochs: 20,
            min_delta: 0.0001,
            patience: 3,
            overlap: 0.9,
            sampling: Sampling::Unified,
            seed: 0,
            samples_per_epoch: None,
            val_samples: None,
            weights: LossWeights::default(),
            deterministic_log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.adam.accumulation == 0 {
            return Err(Error::Config("accumulation must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.samples_per_epoch == Some(0) || self.val_samples == Some(0) {
            return Err(Error::Config("sample caps must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Patience-based stopping on a validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    min_delta: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        Self {
            min_delta,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: Split,
    pub total: f64,
    pub nll: f64,
    pub kld: f64,
    pub dam: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Forward and loss of one sample; gradients are accumulated scaled by `scale`.
pub fn sample_step(model: &mut Model, sample: &Sample, weights: &LossWeights, scale: Option<f64>) -> Result<LossValues> {
    let mut g = Graph::new();
    let out = model.net.forward_train(&mut g, &model.store, &sample.input(), &sample.dam_targets)?;
    let loss = total_loss(&mut g, out.pred, &sample.target, &sample.density, Some(out.dam_loss), weights)?;
    if !loss.values.total.is_finite() {
        return Err(Error::NonFinite { op: "train_loss" });
    }
    if let Some(s) = scale {
        let scaled = g.scale(loss.total, s)?;
        g.backward(scaled, &mut model.store)?;
    }
    Ok(loss.values)
}

/// Mean loss of `model` over fixed samples.
pub fn evaluate_loss(model: &mut Model, samples: &[Sample], weights: &LossWeights) -> Result<LossValues> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut acc = LossValues::default();
    for s in samples {
        acc.add(&sample_step(model, s, weights, None)?);
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Validation samples fixed for the whole run.
pub fn validation_samples(dataset: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<Vec<Sample>> {
    let s = Sampler::new(dataset, Split::Val, config.sampling, model.context(), config.overlap, &model.cues)?;
    s.fixed(config.val_samples).into_iter().map(|(w, o)| s.build(w, o)).collect()
}

fn record(epoch: usize, split: Split, v: &LossValues, wall_ms: Option<u64>) -> LogRecord {
    LogRecord {
        epoch,
        split,
        total: v.total,
        nll: v.nll,
        kld: v.kld,
        dam: v.dam,
        wall_ms,
    }
}

/// Trains a fresh model, returning the best-validation parameters and the log.
pub fn train_loop(config: &TrainConfig, model_config: &ModelConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let model = Model::new(model_config, derive_seed(config.seed, 0))?;
    train_model(config, model, dataset)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model(config: &TrainConfig, mut model: Model, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mc = model.config().clone();
    if dataset.height() != mc.height || dataset.width() != mc.width {
        return Err(Error::Config(format!(
            "model resolution {}x{} differs from dataset {}x{}",
            mc.height,
            mc.width,
            dataset.height(),
            dataset.width()
        )));
    }
    let train = Sampler::new(dataset, Split::Train, config.sampling, mc.context(), config.overlap, &mc.cues)?;
    let val = validation_samples(dataset, &mc, config)?;
    let mut adam = Adam::new(config.adam, &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut stopper = EarlyStopping::new(config.min_delta, config.patience);
    let mut log = Vec::new();
    let mut best = (model.clone(), 0usize);
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order: Vec<(WindowRef, ObserverId)> = train.epoch(&mut rng, config.samples_per_epoch);
        let mut acc = LossValues::default();
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &(w, o) in batch {
                let sample = train.build(w, o)?;
                acc.add(&sample_step(&mut model, &sample, &config.weights, Some(scale))?);
            }
            adam.finish_batch(&mut model.store)?;
        }
        if adam.pending_batches() > 0 {
            adam.step(&mut model.store)?;
        }
        model.store.snap_to_storage_precision();
        let train_mean = acc.scale(1.0 / order.len() as f64);
        let val_mean = evaluate_loss(&mut model, &val, &config.weights)?;
        let wall = (!config.deterministic_log).then(|| started.elapsed().as_millis() as u64);
        log.push(record(epoch, Split::Train, &train_mean, wall));
        log.push(record(epoch, Split::Val, &val_mean, wall));
        epochs_run = epoch;
        match stopper.update(val_mean.total) {
            StopDecision::Improved => best = (model.clone(), epoch),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        log,
        epochs_run,
        best_epoch: best.1,
        best_val: stopper.best(),
    })
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).map_err(|source| Error::Json {
            context: "serializing training log".into(),
            source,
        })?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_after_patience_plus_one() {
        let mut s = EarlyStopping::new(1e-4, 3);
        assert_eq!(s.update(1.0), StopDecision::Improved);
        assert_eq!(s.update(1.0), StopDecision::Continue);
        assert_eq!(s.update(0.99995), StopDecision::Continue);
        assert_eq!(s.update(1.0), StopDecision::Stop);
        let mut s = EarlyStopping::new(1e-4, 2);
        assert_eq!(s.update(2.0), StopDecision::Improved);
        assert_eq!(s.update(1.0), StopDecision::Improved);
        assert_eq!(s.update(1.5), StopDecision::Continue);
        assert_eq!(s.update(0.5), StopDecision::Improved);
        assert_eq!(s.best(), 0.5);
    }

    #[test]
    fn deterministic_log_omits_wall_time() {
        let r = record(1, Split::Val, &LossValues::default(), None);
        let text = serde_json::to_string(&r).unwrap();
        assert!(!text.contains("wall_ms"));
        assert!(text.contains("\"split\":\"val\""));
    }

    fn tiny() -> (Dataset, ModelConfig, TrainConfig) {
        let data = crate::synthgen::generate_dataset(&crate::synthgen::SynthConfig {
            videos: 10,
            frames: 30,
            observers: 3,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        let mc = ModelConfig {
            variant: crate::integrator::Variant::Largmu,
            context: Some(3),
            height: 8,
            width: 8,
            encoder_channels: (2, 2),
            hidden: 4,
            dam_head_channels: 2,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.01,
                accumulation: 1,
                ..AdamConfig::default()
            },
            epochs: 2,
            samples_per_epoch: Some(8),
            val_samples: Some(4),
            deterministic_log: true,
            ..TrainConfig::default()
        };
        (data, mc, tc)
    }

    #[test]
    fn frozen_run_stops_after_patience_plus_one() {
        let (data, mc, mut tc) = tiny();
        tc.adam.lr = 0.0;
        tc.epochs = 10;
        let out = train_loop(&tc, &mc, &data).unwrap();
        assert_eq!((out.epochs_run, out.best_epoch), (tc.patience + 1, 1));
        let vals: Vec<f64> = out.log.iter().filter(|r| r.split == Split::Val).map(|r| r.total).collect();
        assert!(vals.iter().all(|v| v.to_bits() == vals[0].to_bits()));
    }

    #[test]
    fn same_seed_same_log_and_parameters() {
        let (data, mc, tc) = tiny();
        let a = train_loop(&tc, &mc, &data).unwrap();
        let b = train_loop(&tc, &mc, &data).unwrap();
        assert_eq!(a.log, b.log);
        for ((_, p), (_, q)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        let c = train_loop(&TrainConfig { seed: 1, ..tc }, &mc, &data).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn reloaded_checkpoint_reproduces_validation_loss() {
        let (data, mc, tc) = tiny();
        let out = train_loop(&tc, &mc, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spcm");
        crate::integrator::save_checkpoint(&path, &out.model, serde_json::json!({})).unwrap();
        let (mut back, _) = crate::integrator::load_checkpoint(&path).unwrap();
        let val = validation_samples(&data, &mc, &tc).unwrap();
        let loss = evaluate_loss(&mut back, &val, &tc.weights).unwrap();
        assert_eq!(loss.total.to_bits(), out.best_val.to_bits());
    }

    #[test]
    fn predictions_lie_in_unit_interval() {
        let (data, mc, _) = tiny();
        let a = Model::new(&mc, 4).unwrap();
        let b = Model::new(&mc, 4).unwrap();
        let s = crate::train::build_sample(&data, crate::train::WindowRef { video: 0, t_end: 5 }, data.observers()[1], 3, &mc.cues).unwrap();
        let pa = a.predict(&s.input()).unwrap();
        assert_eq!(pa.grid().shape(), &[1, 8, 8]);
        assert!(pa.grid().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(pa, b.predict(&s.input()).unwrap());
    }
}
