//! Synthetic biased classification data.
//!
//! The base task is a balanced three-class Gaussian problem: class means sit on
//! the vertices of an equilateral triangle (side `separation`) in the first two
//! coordinates, every example adds isotropic unit noise. A bias token in
//! `{0, 1, 2}` is attached per example according to the bias kind:
//!
//! * `indicator`: the token equals the label 80% of the time.
//! * `excluder`: the token equals the label 3% of the time, so it usually rules
//!   one class out.
//! * `dependent`: with probability 0.8 the token matches the label 90% of the
//!   time and the indicator reads 0; otherwise the token is uniform and the
//!   indicator reads 1. The indicator is visible to the main model but not to
//!   the bias-only model.
//!
//! Whenever the token misses the label it is uniform over the other two
//! classes. In the out-of-domain split the token is uniform over all classes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{dot, softmax_in_place, Matrix, Prng};
use crate::persist;

pub const NUM_CLASSES: usize = 3;

/// Monte Carlo sample count for Bayes-accuracy calibration.
pub const CALIBRATION_SAMPLES: usize = 200_000;

pub const DEFAULT_BASE_DIM: usize = 20;

const SEPARATION_BRACKET: (f64, f64) = (0.01, 20.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    None,
    Indicator,
    Excluder,
    Dependent,
}

impl BiasKind {
    pub const BIASED: [BiasKind; 3] = [BiasKind::Indicator, BiasKind::Excluder, BiasKind::Dependent];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasKind::None => "none",
            BiasKind::Indicator => "indicator",
            BiasKind::Excluder => "excluder",
            BiasKind::Dependent => "dependent",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BiasKind::None => "None",
            BiasKind::Indicator => "Indicator",
            BiasKind::Excluder => "Excluder",
            BiasKind::Dependent => "Dependent",
        }
    }
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BiasKind::None),
            "indicator" => Ok(BiasKind::Indicator),
            "excluder" => Ok(BiasKind::Excluder),
            "dependent" => Ok(BiasKind::Dependent),
            other => Err(Error::Invalid(format!("unknown bias kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InDomainTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::InDomainTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::InDomainTest => "in_domain_test",
            Split::OodTest => "ood_test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasParams {
    /// P(token = y) for the indicator bias.
    pub indicator_agreement: f64,
    /// P(token = y) for the excluder bias.
    pub excluder_agreement: f64,
    /// Probability of the reliable (indicator = 0) branch for the dependent bias.
    pub dependent_branch_prob: f64,
    /// P(token = y) inside the reliable branch.
    pub dependent_agreement: f64,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self {
            indicator_agreement: 0.8,
            excluder_agreement: 0.03,
            dependent_branch_prob: 0.8,
            dependent_agreement: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeSpec {
    pub num_classes: usize,
    pub base_dim: usize,
    /// Side length of the class-mean triangle.
    pub separation: f64,
    pub bias_kind: BiasKind,
    pub bias_params: BiasParams,
}

impl GenerativeSpec {
    pub fn new(bias_kind: BiasKind, separation: f64) -> Self {
        Self {
            num_classes: NUM_CLASSES,
            base_dim: DEFAULT_BASE_DIM,
            separation,
            bias_kind,
            bias_params: BiasParams::default(),
        }
    }

    pub fn with_base_dim(mut self, base_dim: usize) -> Self {
        self.base_dim = base_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Invalid(format!(
                "the triangle base task has exactly {NUM_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.base_dim < 2 {
            return Err(Error::Invalid("base_dim must be at least 2".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::OutOfRange {
                what: "separation",
                value: self.separation,
            });
        }
        let p = &self.bias_params;
        for (what, v) in [
            ("indicator_agreement", p.indicator_agreement),
            ("excluder_agreement", p.excluder_agreement),
            ("dependent_branch_prob", p.dependent_branch_prob),
            ("dependent_agreement", p.dependent_agreement),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { what, value: v });
            }
        }
        Ok(())
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        triangle_means(self.separation)
            .iter()
            .map(|m| {
                let mut v = vec![0.0; self.base_dim];
                v[..2].copy_from_slice(m);
                v
            })
            .collect()
    }

    pub fn has_indicator(&self) -> bool {
        self.bias_kind == BiasKind::Dependent
    }

    /// Width of the model input: base features, one-hot token, and the
    /// dependent indicator when present.
    pub fn feature_dim(&self) -> usize {
        self.base_dim + NUM_CLASSES + usize::from(self.has_indicator())
    }

    /// Train-split joint emission probability `P(token, indicator | y)`.
    /// For kinds without an indicator, `indicator` must be `None`.
    pub fn emission(&self, y: usize, token: usize, indicator: Option<u8>) -> f64 {
        let p = &self.bias_params;
        let agree = token == y;
        let split_rest = |q: f64| if agree { q } else { (1.0 - q) / 2.0 };
        match (self.bias_kind, indicator) {
            (BiasKind::None, None) => 1.0 / 3.0,
            (BiasKind::Indicator, None) => split_rest(p.indicator_agreement),
            (BiasKind::Excluder, None) => split_rest(p.excluder_agreement),
            (BiasKind::Dependent, Some(0)) => {
                p.dependent_branch_prob * split_rest(p.dependent_agreement)
            }
            (BiasKind::Dependent, Some(1)) => (1.0 - p.dependent_branch_prob) / 3.0,
            _ => 0.0,
        }
    }

    /// Train-split marginal `P(token | y)`, summing out the indicator.
    pub fn token_likelihood(&self, y: usize, token: usize) -> f64 {
        if self.has_indicator() {
            self.emission(y, token, Some(0)) + self.emission(y, token, Some(1))
        } else {
            self.emission(y, token, None)
        }
    }
}

fn triangle_means(side: f64) -> [[f64; 2]; NUM_CLASSES] {
    let radius = side / 3f64.sqrt();
    let mut out = [[0.0; 2]; NUM_CLASSES];
    for (c, m) in out.iter_mut().enumerate() {
        let angle = std::f64::consts::FRAC_PI_2 + c as f64 * 2.0 * std::f64::consts::PI / 3.0;
        *m = [radius * angle.cos(), radius * angle.sin()];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthExample {
    pub x: Vec<f64>,
    pub token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicator: Option<u8>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataset {
    pub spec: GenerativeSpec,
    pub split: Split,
    pub seed: u64,
    pub examples: Vec<SynthExample>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    /// Model inputs: base features, then a one-hot token, then the indicator
    /// (dependent bias only).
    pub fn features(&self) -> Matrix {
        let dim = self.spec.feature_dim();
        let mut data = Vec::with_capacity(self.len() * dim);
        for ex in &self.examples {
            data.extend_from_slice(&ex.x);
            for c in 0..NUM_CLASSES {
                data.push(if ex.token == c { 1.0 } else { 0.0 });
            }
            if self.spec.has_indicator() {
                data.push(f64::from(ex.indicator.unwrap_or(0)));
            }
        }
        Matrix::from_vec(self.len(), dim, data).expect("generated features are finite")
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.x.len() != self.spec.base_dim {
                return Err(Error::Shape(format!(
                    "example {i} has {} base features, expected {}",
                    ex.x.len(),
                    self.spec.base_dim
                )));
            }
            if ex.token >= NUM_CLASSES || ex.y >= NUM_CLASSES {
                return Err(Error::Invalid(format!("example {i} has a class index out of range")));
            }
            if ex.indicator.is_some() != self.spec.has_indicator()
                || ex.indicator.is_some_and(|v| v > 1)
            {
                return Err(Error::Invalid(format!("example {i} has an invalid indicator")));
            }
            if ex.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("example {i} features"),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Self = persist::load_json(path)?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Uniform over the classes other than `exclude`.
fn other_class(prng: &mut Prng, exclude: usize) -> usize {
    let k = prng.below(NUM_CLASSES - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

fn token_with_agreement(prng: &mut Prng, y: usize, agreement: f64) -> usize {
    if prng.uniform() < agreement {
        y
    } else {
        other_class(prng, y)
    }
}

pub fn sample_dataset(spec: &GenerativeSpec, n: usize, split: Split, prng: &mut Prng) -> Result<SynthDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("dataset request"));
    }
    let seed = prng.seed();
    let means = spec.class_means();
    let params = spec.bias_params;
    let ood = split == Split::OodTest;

    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let y = prng.below(NUM_CLASSES);
        let x: Vec<f64> = means[y].iter().map(|m| m + prng.normal()).collect();
        let (token, indicator) = match spec.bias_kind {
            BiasKind::Dependent => {
                let reliable = prng.uniform() < params.dependent_branch_prob;
                let token = if ood || !reliable {
                    prng.below(NUM_CLASSES)
                } else {
                    token_with_agreement(prng, y, params.dependent_agreement)
                };
                (token, Some(u8::from(!reliable)))
            }
            _ if ood => (prng.below(NUM_CLASSES), None),
            BiasKind::None => (prng.below(NUM_CLASSES), None),
            BiasKind::Indicator => (token_with_agreement(prng, y, params.indicator_agreement), None),
            BiasKind::Excluder => (token_with_agreement(prng, y, params.excluder_agreement), None),
        };
        examples.push(SynthExample { x, token, indicator, y });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        split,
        seed,
        examples,
    })
}

/// Copy with every bias token resampled uniformly. Base features, labels and
/// indicators are untouched; a dataset without bias is returned as is.
pub fn randomize_bias(ds: &SynthDataset, prng: &mut Prng) -> SynthDataset {
    let mut out = ds.clone();
    if ds.spec.bias_kind == BiasKind::None {
        return out;
    }
    for ex in &mut out.examples {
        ex.token = prng.below(NUM_CLASSES);
    }
    out
}

/// Exact `P(y | token)` under the train-split rules and a uniform prior.
/// The dependent indicator is summed out: the bias-only model never sees it.
pub fn analytic_bias_posterior(spec: &GenerativeSpec, token: usize) -> Vec<f64> {
    normalize((0..NUM_CLASSES).map(|y| spec.token_likelihood(y, token)).collect())
}

/// Exact `P(y | base features)` for the Gaussian base task.
pub fn analytic_base_posterior(spec: &GenerativeSpec, x: &[f64]) -> Vec<f64> {
    let mut log_lik = gaussian_log_likelihoods(spec, x);
    softmax_in_place(&mut log_lik);
    log_lik
}

/// Exact `P(y | base features, token, indicator)` under the train-split rules.
pub fn analytic_full_posterior(spec: &GenerativeSpec, example: &SynthExample) -> Vec<f64> {
    let log_lik = gaussian_log_likelihoods(spec, &example.x);
    let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    normalize(
        log_lik
            .iter()
            .enumerate()
            .map(|(y, ll)| (ll - max).exp() * spec.emission(y, example.token, example.indicator))
            .collect(),
    )
}

fn gaussian_log_likelihoods(spec: &GenerativeSpec, x: &[f64]) -> Vec<f64> {
    spec.class_means()
        .iter()
        .map(|m| {
            -0.5 * x
                .iter()
                .zip(m)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Fixed Monte Carlo draws for Bayes-accuracy estimates. Reusing the same
/// draws for every separation makes the estimate monotone in the separation,
/// so bisection on it is well defined.
pub struct BayesAccuracyProbe {
    draws: Vec<(usize, [f64; 2])>,
}

impl BayesAccuracyProbe {
    /// Only the two in-plane noise coordinates are drawn: off-plane coordinates
    /// shift every class log-likelihood equally and never change the argmax.
    pub fn new(samples: usize, prng: &mut Prng) -> Self {
        let draws = (0..samples)
            .map(|_| (prng.below(NUM_CLASSES), [prng.normal(), prng.normal()]))
            .collect();
        Self { draws }
    }

    pub fn accuracy(&self, separation: f64) -> f64 {
        let means = triangle_means(separation);
        let correct = self
            .draws
            .iter()
            .filter(|(y, noise)| {
                let x = [means[*y][0] + noise[0], means[*y][1] + noise[1]];
                // Equal-norm means: the Bayes rule is argmax of mean · x.
                let scores = means.map(|m| dot(&m, &x));
                argmax(&scores) == *y
            })
            .count();
        correct as f64 / self.draws.len() as f64
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Bisects the triangle side so the Monte Carlo Bayes accuracy of the base
/// task hits `target` within `tolerance`.
pub fn calibrate_separation(target: f64, tolerance: f64, prng: &mut Prng) -> Result<f64> {
    if !(target > 1.0 / 3.0 && target < 1.0) {
        return Err(Error::OutOfRange {
            what: "target Bayes accuracy",
            value: target,
        });
    }
    let probe = BayesAccuracyProbe::new(CALIBRATION_SAMPLES, prng);
    let (mut lo, mut hi) = SEPARATION_BRACKET;
    let (acc_lo, acc_hi) = (probe.accuracy(lo), probe.accuracy(hi));
    let unreachable = || Error::Unreachable {
        target,
        lo: SEPARATION_BRACKET.0,
        hi: SEPARATION_BRACKET.1,
        acc_lo,
        acc_hi,
    };
    if acc_lo >= target {
        return if acc_lo - target <= tolerance { Ok(lo) } else { Err(unreachable()) };
    }
    if acc_hi < target {
        return if target - acc_hi <= tolerance { Ok(hi) } else { Err(unreachable()) };
    }
    // Invariant: acc(lo) < target <= acc(hi).
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if probe.accuracy(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let acc = probe.accuracy(hi);
    if (acc - target).abs() > tolerance {
        return Err(unreachable());
    }
    Ok(hi)
}
