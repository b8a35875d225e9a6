//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use debias_core::ensembles::Method;
use debias_core::models::BiasMode;
use debias_core::synth::BiasKind;
use debias_core::train::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CliError, CliResult};

/// Entropy-penalty weight for `learned_mixin_h`, per bias kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaH {
    pub indicator: f64,
    pub excluder: f64,
    pub dependent: f64,
}

impl Default for LambdaH {
    fn default() -> Self {
        Self {
            indicator: 0.01,
            excluder: 0.005,
            dependent: 0.005,
        }
    }
}

impl LambdaH {
    pub fn get(&self, kind: BiasKind) -> f64 {
        match kind {
            BiasKind::Indicator => self.indicator,
            BiasKind::Excluder => self.excluder,
            BiasKind::Dependent => self.dependent,
            BiasKind::None => 0.0,
        }
    }

    pub fn set(&mut self, kind: BiasKind, value: f64) -> CliResult<()> {
        match kind {
            BiasKind::Indicator => self.indicator = value,
            BiasKind::Excluder => self.excluder = value,
            BiasKind::Dependent => self.dependent = value,
            BiasKind::None => return Err(CliError::Config("lambda_H has no entry for bias kind `none`".into())),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// A single bias kind or a list of them.
    #[serde(deserialize_with = "one_or_many")]
    pub bias_kind: Vec<BiasKind>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub target_bayes_acc: f64,
    pub base_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_decay: f64,
    pub hidden: usize,

    #[serde(rename = "lambda_H")]
    pub lambda_h: LambdaH,
    pub bias_mode: BiasMode,
    pub divide_prior: bool,

    /// Worker threads for sweeps; 0 uses every available core.
    pub parallelism: usize,
    /// Fill the `wall_time_s` column. Off by default so reruns are byte-identical.
    pub record_wall_time: bool,

    pub output_csv: Option<PathBuf>,
    pub output_aggregate_csv: Option<PathBuf>,
    pub output_markdown: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            bias_kind: BiasKind::BIASED.to_vec(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            n_train: 20_000,
            n_test: 10_000,
            target_bayes_acc: 0.79,
            base_dim: debias_core::synth::DEFAULT_BASE_DIM,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            lr_decay: train.lr_decay,
            hidden: train.hidden,
            lambda_h: LambdaH::default(),
            bias_mode: BiasMode::default(),
            divide_prior: false,
            parallelism: 0,
            record_wall_time: false,
            output_csv: None,
            output_aggregate_csv: None,
            output_markdown: None,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BiasKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(BiasKind),
        Many(Vec<BiasKind>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(k) => vec![k],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Training settings for one run; `seed` is the per-run sub-seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            lr_decay: self.lr_decay,
            hidden: self.hidden,
            seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.bias_kind.is_empty() {
            return bad("bias_kind must name at least one bias kind".into());
        }
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if has_duplicates(&self.bias_kind) || has_duplicates(&self.methods) || has_duplicates(&self.seeds) {
            return bad("bias_kind, methods and seeds must not repeat entries".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if self.base_dim < 2 {
            return bad(format!("base_dim must be at least 2, got {}", self.base_dim));
        }
        if !(self.target_bayes_acc > 1.0 / 3.0 && self.target_bayes_acc < 1.0) {
            return bad(format!("target_bayes_acc must lie in (1/3, 1), got {}", self.target_bayes_acc));
        }
        for kind in BiasKind::BIASED {
            let v = self.lambda_h.get(kind);
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("lambda_H.{kind} must be a finite value >= 0, got {v}"));
            }
        }
        self.train_config(0)
            .validate()
            .map_err(|e| CliError::Config(format!("training settings: {e}")))
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.n_train, cfg.n_test), (20_000, 10_000));
        assert_eq!(cfg.target_bayes_acc, 0.79);
        assert_eq!(cfg.lambda_h, LambdaH { indicator: 0.01, excluder: 0.005, dependent: 0.005 });
    }

    #[test]
    fn bias_kind_accepts_one_or_many() {
        let one = ExperimentConfig::from_json(r#"{"bias_kind": "excluder"}"#).unwrap();
        assert_eq!(one.bias_kind, vec![BiasKind::Excluder]);
        let many = ExperimentConfig::from_json(r#"{"bias_kind": ["dependent", "indicator"]}"#).unwrap();
        assert_eq!(many.bias_kind, vec![BiasKind::Dependent, BiasKind::Indicator]);
    }

    #[test]
    fn partial_lambda_map_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"lambda_H": {"dependent": 0.2}}"#).unwrap();
        assert_eq!(cfg.lambda_h.dependent, 0.2);
        assert_eq!(cfg.lambda_h.indicator, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"epoch": 3}"#, r#"{"lambda_H": {"indicatr": 0.1}}"#, r#"{"lambda_h": {}}"#] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"seeds": []}"#,
            r#"{"lambda_H": {"excluder": -1.0}}"#,
            r#"{"methods": ["bias_product", "bias_product"]}"#,
            r#"{"methods": ["product"]}"#,
            r#"{"learning_rate": 0.0}"#,
            r#"{"n_train": 0}"#,
            r#"{"target_bayes_acc": 0.2}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn method_alias_is_accepted() {
        let cfg = ExperimentConfig::from_json(r#"{"methods": ["unbiased_upper_bound"]}"#).unwrap();
        assert_eq!(cfg.methods, vec![Method::Unbiased]);
    }
}
