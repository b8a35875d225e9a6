//! Debiasing objectives.
//!
//! Every ensemble combines the main model's distribution `p` with the frozen
//! bias distribution `b` in log space, `p̂ = softmax(log p + g · log b)`:
//! `g = 1` is the bias product, `g = softplus(w · h)` the learned mixin. The
//! loss is computed on `p̂`; evaluation uses `p` alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BiasPredictions, ForwardTrace};
use crate::ndcore::{entropy_unchecked, log_sum_exp, sigmoid, softmax_in_place, softplus, Matrix, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Reweight,
    BiasProduct,
    LearnedMixin,
    LearnedMixinH,
    /// Plain training on bias-randomized data: the upper bound.
    #[serde(alias = "unbiased_upper_bound")]
    Unbiased,
}

impl Method {
    /// Results-table order.
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Reweight,
        Method::BiasProduct,
        Method::LearnedMixin,
        Method::LearnedMixinH,
        Method::Unbiased,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Reweight => "reweight",
            Method::BiasProduct => "bias_product",
            Method::LearnedMixin => "learned_mixin",
            Method::LearnedMixinH => "learned_mixin_h",
            Method::Unbiased => "unbiased",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::None => "None",
            Method::Reweight => "Reweight",
            Method::BiasProduct => "Bias Product",
            Method::LearnedMixin => "Learned-Mixin",
            Method::LearnedMixinH => "Learned-Mixin +H",
            Method::Unbiased => "Unbiased",
        }
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Method::LearnedMixin | Method::LearnedMixinH)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiased_upper_bound" => Ok(Method::Unbiased),
            _ => Method::ALL
                .into_iter()
                .find(|m| m.as_str() == s)
                .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub method: Method,
    /// Entropy-penalty weight, only read by `learned_mixin_h`.
    pub lambda_h: f64,
    /// Divide the bias expert by the class prior before combining.
    pub divide_prior: bool,
    /// Class prior used when `divide_prior` is on; training fills it with the
    /// empirical train label frequencies.
    pub class_prior: Option<Vec<f64>>,
    /// Initial softening parameter for the binary (multi-label) ensemble.
    pub alpha: f64,
    /// Pins `g` to a constant for the mixin methods (gate gradient dropped).
    pub fixed_gate: Option<f64>,
}

impl EnsembleConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda_h: 0.0,
            divide_prior: false,
            class_prior: None,
            alpha: 0.0,
            fixed_gate: None,
        }
    }

    pub fn with_lambda_h(mut self, lambda_h: f64) -> Self {
        self.lambda_h = lambda_h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_h >= 0.0 && self.lambda_h.is_finite()) {
            return Err(Error::OutOfRange {
                what: "lambda_H",
                value: self.lambda_h,
            });
        }
        if let Some(g) = self.fixed_gate {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::OutOfRange { what: "fixed gate", value: g });
            }
        }
        if self.divide_prior {
            match &self.class_prior {
                Some(prior) if prior.iter().all(|&v| v > 0.0) => {}
                _ => return Err(Error::Invalid("divide_prior needs a strictly positive class prior".into())),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total_loss: f64,
    pub data_loss: f64,
    pub penalty: f64,
    pub per_example_weights: Option<Vec<f64>>,
    pub g_values: Option<Vec<f64>>,
}

/// Upstream gradients handed to `Classifier::backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpstreamGrad {
    pub d_logits: Matrix,
    pub d_g: Vec<f64>,
}

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

fn mix(p: &[f64], b: &[f64], g: f64, prior: Option<&[f64]>) -> Vec<f64> {
    let mut out: Vec<f64> = p
        .iter()
        .zip(b)
        .enumerate()
        .map(|(j, (&pj, &bj))| {
            let bias_term = clamped_ln(bj) - prior.map_or(0.0, |pr| pr[j].ln());
            pj * (g * bias_term).exp()
        })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Product of experts `p ∘ b` (optionally `p ∘ b / prior`), renormalized.
pub fn bias_product(p: &[f64], b: &[f64], prior: Option<&[f64]>) -> Vec<f64> {
    mix(p, b, 1.0, prior)
}

/// `p ∘ b^g`, renormalized.
pub fn learned_mixin(p: &[f64], b: &[f64], g: f64) -> Vec<f64> {
    mix(p, b, g, None)
}

/// `softmax(g · log b)`, the scaled bias component.
fn scaled_bias(b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let log_b: Vec<f64> = b.iter().map(|&v| clamped_ln(v)).collect();
    let mut q: Vec<f64> = log_b.iter().map(|l| g * l).collect();
    softmax_in_place(&mut q);
    (q, log_b)
}

/// `lambda_h · H(softmax(g · log b))`.
pub fn entropy_penalty(b: &[f64], g: f64, lambda_h: f64) -> f64 {
    if lambda_h == 0.0 {
        return 0.0;
    }
    lambda_h * entropy_unchecked(&scaled_bias(b, g).0)
}

/// ∂/∂g of [`entropy_penalty`]: with `q = softmax(g l)`, `H = logsumexp(g l) − g E_q[l]`,
/// so `dH/dg = −g Var_q(l)`.
pub fn entropy_penalty_grad(b: &[f64], g: f64, lambda_h: f64) -> f64 {
    if lambda_h == 0.0 {
        return 0.0;
    }
    let (q, l) = scaled_bias(b, g);
    let mean: f64 = q.iter().zip(&l).map(|(a, b)| a * b).sum();
    let var: f64 = q.iter().zip(&l).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
    -lambda_h * g * var
}

/// `1 − b[i, y_i]` per example.
pub fn reweight_weights(b: &BiasPredictions, y: &[usize]) -> Result<Vec<f64>> {
    if b.len() != y.len() {
        return Err(Error::Shape(format!("{} bias rows for {} labels", b.len(), y.len())));
    }
    let weights: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            b.row(i)
                .get(yi)
                .map(|&p| (1.0 - p).clamp(0.0, 1.0))
                .ok_or_else(|| Error::Invalid(format!("label {yi} out of range")))
        })
        .collect::<Result<_>>()?;
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(weights)
}

/// Loss on a batch and the upstream gradients `(∂L/∂logits, ∂L/∂g)`.
///
/// All methods reduce by a batch mean (reweight: weighted mean), and the
/// entropy penalty is averaged the same way.
pub fn ensemble_loss_and_grad(
    cfg: &EnsembleConfig,
    trace: &ForwardTrace,
    b: &BiasPredictions,
    y: &[usize],
) -> Result<(LossReport, UpstreamGrad)> {
    let n = trace.len();
    if b.len() != n || y.len() != n {
        return Err(Error::Shape(format!("trace has {n} rows, bias {} and labels {}", b.len(), y.len())));
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let classes = trace.logits.cols();
    let mut d_logits = Matrix::zeros(n, classes);
    let mut d_g = vec![0.0; n];
    let inv_n = 1.0 / n as f64;

    let (data_loss, penalty, per_example_weights, g_values) = match cfg.method {
        Method::None | Method::Unbiased | Method::Reweight => {
            let weights = if cfg.method == Method::Reweight {
                Some(reweight_weights(b, y)?)
            } else {
                None
            };
            let norm = weights.as_ref().map_or(n as f64, |w| w.iter().sum::<f64>());
            if norm == 0.0 {
                return Err(Error::DegenerateWeights);
            }
            let mut loss = 0.0;
            for i in 0..n {
                let w = weights.as_ref().map_or(1.0, |w| w[i]) / norm;
                let z = trace.logits.row(i);
                loss += w * (log_sum_exp(z) - z[y[i]]);
                let p = trace.p.row(i);
                for (c, d) in d_logits.row_mut(i).iter_mut().enumerate() {
                    *d = w * (p[c] - if c == y[i] { 1.0 } else { 0.0 });
                }
            }
            (loss, 0.0, weights, None)
        }
        Method::BiasProduct | Method::LearnedMixin | Method::LearnedMixinH => {
            let gated = cfg.method.uses_gate();
            let gates: Vec<f64> = match (gated, cfg.fixed_gate) {
                (false, _) => vec![1.0; n],
                (true, Some(g)) => vec![g; n],
                (true, None) => trace.gates(),
            };
            let learn_gate = gated && cfg.fixed_gate.is_none();
            let prior = if cfg.divide_prior { cfg.class_prior.as_deref() } else { None };
            let lambda = if cfg.method == Method::LearnedMixinH { cfg.lambda_h } else { 0.0 };

            let mut loss = 0.0;
            let mut penalty = 0.0;
            let mut bias_term = vec![0.0; classes];
            let mut s = vec![0.0; classes];
            for i in 0..n {
                let g = gates[i];
                for (j, (bt, &bj)) in bias_term.iter_mut().zip(b.row(i)).enumerate() {
                    *bt = clamped_ln(bj) - prior.map_or(0.0, |pr| pr[j].ln());
                }
                let z = trace.logits.row(i);
                for j in 0..classes {
                    s[j] = z[j] + g * bias_term[j];
                }
                loss += log_sum_exp(&s) - s[y[i]];
                softmax_in_place(&mut s);
                let mut dg = 0.0;
                for (c, d) in d_logits.row_mut(i).iter_mut().enumerate() {
                    let residual = s[c] - if c == y[i] { 1.0 } else { 0.0 };
                    *d = residual * inv_n;
                    dg += residual * bias_term[c];
                }
                if lambda > 0.0 {
                    penalty += entropy_penalty(b.row(i), g, lambda);
                    dg += entropy_penalty_grad(b.row(i), g, lambda);
                }
                if learn_gate {
                    d_g[i] = dg * inv_n;
                }
            }
            (loss * inv_n, penalty * inv_n, None, gated.then_some(gates))
        }
    };

    let total_loss = data_loss + penalty;
    if !total_loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} loss", cfg.method),
        });
    }
    Ok((
        LossReport {
            total_loss,
            data_loss,
            penalty,
            per_example_weights,
            g_values,
        },
        UpstreamGrad { d_logits, d_g },
    ))
}

/// Log-odds contributed by the softened bias: with `s = σ(α)`,
/// `b' = (b + s) / (1 + 2s)` and `log(b' / (1 − b')) = log(b + s) − log(1 − b + s)`.
fn softened_bias_log_odds(b: f64, alpha: f64) -> (f64, f64) {
    let s = sigmoid(alpha);
    let (up, down) = ((b + s).max(LOG_FLOOR), (1.0 - b + s).max(LOG_FLOOR));
    let d_log_odds_d_alpha = (1.0 / up - 1.0 / down) * s * (1.0 - s);
    (up.ln() - down.ln(), d_log_odds_d_alpha)
}

/// Two-class learned mixin for one answer of a multi-label problem: the bias
/// is softened to `b' = (b + σ(α)) / (1 + 2σ(α))`, then `(p, 1 − p)` and
/// `(b', 1 − b')` are combined as `p̂ ∝ p b'^g`. Returns `p̂`.
pub fn binary_ensemble(p: f64, b: f64, g: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha);
    let soft = (b + s) / (1.0 + 2.0 * s);
    let yes = p * soft.powf(g);
    let no = (1.0 - p) * (1.0 - soft).powf(g);
    yes / (yes + no)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryPartials {
    pub value: f64,
    pub d_p: f64,
    pub d_g: f64,
    pub d_alpha: f64,
}

/// [`binary_ensemble`] and its partials, for `p` strictly inside (0, 1).
pub fn binary_ensemble_partials(p: f64, b: f64, g: f64, alpha: f64) -> BinaryPartials {
    let (bias_odds, d_odds_d_alpha) = softened_bias_log_odds(b, alpha);
    let value = sigmoid((p / (1.0 - p)).ln() + g * bias_odds);
    let slope = value * (1.0 - value);
    BinaryPartials {
        value,
        d_p: slope / (p * (1.0 - p)),
        d_g: slope * bias_odds,
        d_alpha: slope * g * d_odds_d_alpha,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryLossGrad {
    pub loss: f64,
    pub d_logits: Matrix,
    pub d_g: Vec<f64>,
    pub d_alpha: f64,
}

/// Multi-label objective: each class is its own yes/no answer with
/// `p_j = σ(logit_j)`, ensembled per answer with [`binary_ensemble`] against
/// `bias[i, j]`, scored by binary cross entropy against `[y_i = j]`, summed
/// over answers and averaged over the batch. Gradients cover logits, the gate
/// and the softening parameter `alpha`.
pub fn binary_ensemble_loss_and_grad(
    trace: &ForwardTrace,
    bias: &Matrix,
    y: &[usize],
    alpha: f64,
    gates: &[f64],
) -> Result<BinaryLossGrad> {
    let n = trace.len();
    let classes = trace.logits.cols();
    if bias.rows() != n || bias.cols() != classes || y.len() != n || gates.len() != n {
        return Err(Error::Shape("binary ensemble inputs disagree on batch shape".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut d_logits = Matrix::zeros(n, classes);
    let mut d_g = vec![0.0; n];
    let mut d_alpha = 0.0;
    let mut loss = 0.0;
    for i in 0..n {
        let g = gates[i];
        for j in 0..classes {
            let (bias_odds, d_odds_d_alpha) = softened_bias_log_odds(bias.get(i, j), alpha);
            // Ensembled log-odds: logit(p) + g · logit(b').
            let s = trace.logits.get(i, j) + g * bias_odds;
            let target = if y[i] == j { 1.0 } else { 0.0 };
            loss += softplus(s) - target * s;
            let residual = (sigmoid(s) - target) * inv_n;
            d_logits.set(i, j, residual);
            d_g[i] += residual * bias_odds;
            d_alpha += residual * g * d_odds_d_alpha;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "binary ensemble loss".into(),
        });
    }
    Ok(BinaryLossGrad {
        loss,
        d_logits,
        d_g,
        d_alpha,
    })
}
