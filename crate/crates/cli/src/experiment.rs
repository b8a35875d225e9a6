//! Single runs and method × bias × seed sweeps.

use std::time::Instant;

use debias_core::analyze::{evaluate, RunMetrics};
use debias_core::ensembles::{EnsembleConfig, Method};
use debias_core::models::{BiasModel, BiasPredictions};
use debias_core::ndcore::{fnv1a64, Prng};
use debias_core::synth::{calibrate_separation, randomize_bias, sample_dataset, BiasKind, GenerativeSpec, Split, SynthDataset, NUM_CLASSES};
use debias_core::train::train_with_bias;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{aggregate, RawRow, ResultsTable};

/// Accepted distance between the Monte Carlo Bayes accuracy and its target.
pub const CALIBRATION_TOLERANCE: f64 = 0.01;

/// Worker-count override for sweeps.
pub const PARALLELISM_ENV: &str = "DEBIAS_PARALLELISM";

/// Class-mean separation reaching `cfg.target_bayes_acc`. The probe draws are
/// fixed, so every run of a config sees the same separation.
pub fn calibrate(cfg: &ExperimentConfig) -> CliResult<f64> {
    calibrate_separation(cfg.target_bayes_acc, CALIBRATION_TOLERANCE, &mut Prng::derive(0, "calibration"))
        .map_err(|e| CliError::Config(format!("target_bayes_acc: {e}")))
}

/// Sub-seed for training: data draws depend on the seed alone, so methods
/// sharing a seed see the same examples.
pub fn train_seed(seed: u64, method: Method) -> u64 {
    seed ^ fnv1a64(method.as_str().as_bytes())
}

/// Everything a (bias kind, seed) pair shares across methods.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub bias_kind: BiasKind,
    pub seed: u64,
    pub train: SynthDataset,
    /// The training split with its bias feature redrawn as at test time.
    pub train_randomized: SynthDataset,
    pub in_domain: SynthDataset,
    pub ood: SynthDataset,
    pub bias_model: BiasModel,
    pub train_bias: BiasPredictions,
}

pub fn prepare(cfg: &ExperimentConfig, bias_kind: BiasKind, seed: u64, separation: f64) -> CliResult<PreparedData> {
    let spec = GenerativeSpec::new(bias_kind, separation).with_base_dim(cfg.base_dim);
    let stream = |what: &str| Prng::derive(seed, &format!("{bias_kind}/{what}"));
    let train = sample_dataset(&spec, cfg.n_train, Split::Train, &mut stream("train"))?;
    let in_domain = sample_dataset(&spec, cfg.n_test, Split::InDomainTest, &mut stream("in_domain_test"))?;
    let ood = sample_dataset(&spec, cfg.n_test, Split::OodTest, &mut stream("ood_test"))?;
    let train_randomized = randomize_bias(&train, &mut stream("randomize"));
    let bias_model = BiasModel::fit(&train, cfg.bias_mode, &mut stream("bias-only"))?;
    let train_bias = bias_model.predict(&train);
    Ok(PreparedData {
        bias_kind,
        seed,
        train,
        train_randomized,
        in_domain,
        ood,
        bias_model,
        train_bias,
    })
}

pub fn ensemble_config(cfg: &ExperimentConfig, bias_kind: BiasKind, method: Method) -> EnsembleConfig {
    let mut ecfg = EnsembleConfig::new(method);
    if method == Method::LearnedMixinH {
        ecfg.lambda_h = cfg.lambda_h.get(bias_kind);
    }
    ecfg.divide_prior = cfg.divide_prior;
    ecfg
}

/// Result of one (bias kind, method, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub bias_kind: BiasKind,
    pub method: Method,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
    pub wall_time_s: Option<f64>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.metrics.is_none()
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.bias_kind, self.method, self.seed)
    }

    pub fn to_row(&self) -> RawRow {
        RawRow::from_outcome(self)
    }
}

/// Trains and evaluates one method on prepared data. Training failures become
/// a failed outcome rather than an error.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData, method: Method) -> RunOutcome {
    let started = Instant::now();
    let result = (|| -> CliResult<RunMetrics> {
        let tcfg = cfg.train_config(train_seed(data.seed, method));
        let ecfg = ensemble_config(cfg, data.bias_kind, method);
        let record = if method == Method::Unbiased {
            let uniform = BiasPredictions::uniform(data.train_randomized.len(), NUM_CLASSES);
            train_with_bias(&data.train_randomized, &uniform, &tcfg, &ecfg)?
        } else {
            train_with_bias(&data.train, &data.train_bias, &tcfg, &ecfg)?
        };
        Ok(evaluate(&record.classifier, method, &data.in_domain, &data.ood, &data.bias_model)?)
    })();
    let wall = started.elapsed().as_secs_f64();
    let (metrics, error) = match result {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunOutcome {
        bias_kind: data.bias_kind,
        method,
        seed: data.seed,
        metrics,
        error,
        wall_time_s: cfg.record_wall_time.then_some(wall),
    }
}

/// One run from scratch: calibrate, generate, fit the bias-only model, train,
/// evaluate.
pub fn run_experiment(cfg: &ExperimentConfig, bias_kind: BiasKind, method: Method, seed: u64) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let separation = calibrate(cfg)?;
    let data = prepare(cfg, bias_kind, seed, separation)?;
    Ok(run_prepared(cfg, &data, method))
}

/// Worker count: `DEBIAS_PARALLELISM` if set, else the config value, where 0
/// means every available core.
pub fn effective_parallelism(cfg: &ExperimentConfig) -> CliResult<usize> {
    let requested = match std::env::var(PARALLELISM_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("{PARALLELISM_ENV} must be a non-negative integer, got `{v}`")))?,
        Err(_) => cfg.parallelism,
    };
    Ok(if requested == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    })
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Ordered by bias kind, then method, then seed, each in config order.
    pub outcomes: Vec<RunOutcome>,
    pub table: ResultsTable,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<RawRow> {
        self.outcomes.iter().map(RunOutcome::to_row).collect()
    }

    pub fn any_failed(&self) -> bool {
        self.outcomes.iter().any(RunOutcome::failed)
    }
}

pub fn sweep(cfg: &ExperimentConfig) -> CliResult<SweepResult> {
    sweep_with_threads(cfg, effective_parallelism(cfg)?)
}

pub fn sweep_with_threads(cfg: &ExperimentConfig, threads: usize) -> CliResult<SweepResult> {
    cfg.validate()?;
    let separation = calibrate(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Other(format!("cannot start worker pool: {e}")))?;

    let pairs: Vec<(BiasKind, u64)> = cfg
        .bias_kind
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let outcomes = pool.install(|| -> CliResult<Vec<RunOutcome>> {
        let prepared: Vec<PreparedData> = pairs
            .par_iter()
            .map(|&(k, s)| prepare(cfg, k, s, separation))
            .collect::<CliResult<_>>()?;
        let jobs: Vec<(&PreparedData, Method)> = cfg
            .bias_kind
            .iter()
            .flat_map(|&k| {
                cfg.methods.iter().flat_map(move |&m| {
                    cfg.seeds.iter().map(move |&s| (k, m, s))
                })
            })
            .map(|(k, m, s)| {
                let data = prepared
                    .iter()
                    .find(|d| d.bias_kind == k && d.seed == s)
                    .expect("every (bias, seed) pair is prepared");
                (data, m)
            })
            .collect();
        Ok(jobs.par_iter().map(|&(data, m)| run_prepared(cfg, data, m)).collect())
    })?;
    let rows: Vec<RawRow> = outcomes.iter().map(RunOutcome::to_row).collect();
    let table = aggregate(&rows);
    Ok(SweepResult { outcomes, table })
}
