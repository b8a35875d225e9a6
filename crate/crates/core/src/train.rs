//! Adam and the minibatch training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensembles::{ensemble_loss_and_grad, EnsembleConfig, Method};
use crate::error::{Error, Result};
use crate::models::{fit_bias_only, BiasMode, BiasPredictions, Classifier, DEFAULT_HIDDEN};
use crate::ndcore::Prng;
use crate::synth::{SynthDataset, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Step-size multiplier applied once per 100 optimizer steps.
    pub lr_decay: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay: 1.0,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Invalid("epochs, batch_size and hidden must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::OutOfRange {
                what: "learning_rate",
                value: self.learning_rate,
            });
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::OutOfRange {
                what: "lr_decay",
                value: self.lr_decay,
            });
        }
        Ok(())
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update with step size `lr · decay^(t div 100)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different model");
        self.t += 1;
        let t = self.t as i32;
        let lr = cfg.learning_rate * cfg.lr_decay.powi((self.t / 100) as i32);
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamState, cfg: &TrainConfig) {
    moments.step(params, grads, cfg);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_config: TrainConfig,
    pub ensemble_config: EnsembleConfig,
    /// Mean total loss per epoch, weighted by batch size.
    pub loss_history: Vec<f64>,
    pub classifier: Classifier,
    /// Checksum of the frozen bias predictions, taken after training.
    pub bias_checksum: u64,
    pub wall_time_s: f64,
}

/// Fits the bias-only model on the training split and trains the main model
/// against it.
pub fn train_run(ds_train: &SynthDataset, cfg: &TrainConfig, ecfg: &EnsembleConfig, bias_mode: BiasMode) -> Result<RunRecord> {
    let bias = fit_bias_only(ds_train, bias_mode, &mut Prng::derive(cfg.seed, "bias-only"))?;
    train_with_bias(ds_train, &bias, cfg, ecfg)
}

pub fn class_frequencies(ds: &SynthDataset) -> Vec<f64> {
    let mut counts = vec![0.0; NUM_CLASSES];
    for ex in &ds.examples {
        counts[ex.y] += 1.0;
    }
    let n = ds.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Trains the main model with precomputed, frozen bias predictions.
pub fn train_with_bias(ds_train: &SynthDataset, bias: &BiasPredictions, cfg: &TrainConfig, ecfg: &EnsembleConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if ds_train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if bias.len() != ds_train.len() {
        return Err(Error::Shape(format!("{} bias rows for {} examples", bias.len(), ds_train.len())));
    }
    let mut ecfg = ecfg.clone();
    if ecfg.divide_prior && ecfg.class_prior.is_none() {
        ecfg.class_prior = Some(class_frequencies(ds_train));
    }
    ecfg.validate()?;

    let started = Instant::now();
    let checksum_before = bias.checksum();
    let mut prng = Prng::new(cfg.seed);
    let features = ds_train.features();
    let labels = ds_train.labels();
    let mut clf = Classifier::init(features.cols(), cfg.hidden, NUM_CLASSES, &mut prng)?;
    let mut params = clf.params_flat();
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..ds_train.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        prng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = features.select_rows(idx);
            let b = bias.select(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let diverged = |reason: String| Error::Divergence {
                epoch,
                step: adam.t as usize,
                reason,
            };
            let trace = clf.forward(&x).map_err(|e| diverged(e.to_string()))?;
            let (report, up) = ensemble_loss_and_grad(&ecfg, &trace, &b, &y).map_err(|e| diverged(e.to_string()))?;
            let grads = clf.backward(&trace, &x, &up.d_logits, &up.d_g)?.flat();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            adam.step(&mut params, &grads, cfg);
            clf.set_params_flat(&params)?;
            epoch_loss += report.total_loss * idx.len() as f64;
        }
        loss_history.push(epoch_loss / ds_train.len() as f64);
    }

    let bias_checksum = bias.checksum();
    debug_assert_eq!(checksum_before, bias_checksum);
    Ok(RunRecord {
        train_config: cfg.clone(),
        ensemble_config: ecfg,
        loss_history,
        classifier: clf,
        bias_checksum,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Whether a method trains on bias-randomized data.
pub fn needs_randomized_training(method: Method) -> bool {
    method == Method::Unbiased
}
