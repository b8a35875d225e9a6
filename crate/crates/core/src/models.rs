//! The main classifier, a one-hidden-layer tanh network with a softmax head and
//! a gating vector over its hidden layer, plus the frozen bias-only model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{check_simplex, dot, fnv1a64, sigmoid, softmax_in_place, softplus, Matrix, Prng};
use crate::persist;
use crate::synth::{analytic_bias_posterior, GenerativeSpec, SynthDataset, NUM_CLASSES};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ClassifierDoc", try_from = "ClassifierDoc")]
pub struct Classifier {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// hidden × input
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// classes × hidden
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// Gating weights: `g(x) = softplus(w_mixin · h(x))`.
    pub w_mixin: Vec<f64>,
}

/// Per-batch forward state needed by the objectives and by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub p: Matrix,
    /// Post-activation hidden layer.
    pub h: Matrix,
    pub logits: Matrix,
    /// `w_mixin · h` per example, before the softplus.
    pub gate_logit: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }

    /// `g(x) = softplus(w_mixin · h)` per example.
    pub fn gates(&self) -> Vec<f64> {
        self.gate_logit.iter().map(|&u| softplus(u)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w_mixin: Vec<f64>,
}

impl Gradients {
    /// Same ordering as [`Classifier::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w_mixin);
        out
    }
}

impl Classifier {
    /// Gaussian weights with std `sqrt(1 / fan_in)`; biases and gating weights
    /// start at zero, so every example starts with `g = ln 2`.
    pub fn init(input_dim: usize, hidden: usize, num_classes: usize, prng: &mut Prng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::Invalid("classifier dimensions must be at least 1".into()));
        }
        let mut gaussian = |rows: usize, cols: usize| {
            let scale = (1.0 / cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| scale * prng.normal()).collect();
            Matrix::from_vec(rows, cols, data)
        };
        Ok(Self {
            input_dim,
            hidden,
            num_classes,
            w1: gaussian(hidden, input_dim)?,
            b1: vec![0.0; hidden],
            w2: gaussian(num_classes, hidden)?,
            b2: vec![0.0; num_classes],
            w_mixin: vec![0.0; hidden],
        })
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.num_classes * self.hidden + self.num_classes + self.hidden
    }

    /// W1, b1, W2, b2, w_mixin, each row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w_mixin);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, classifier has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.w1.data_mut());
        take(&mut self.b1);
        take(self.w2.data_mut());
        take(&mut self.b2);
        take(&mut self.w_mixin);
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, classifier expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut h = batch.matmul_transposed(&self.w1)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(&self.b1) {
                *v = (*v + b).tanh();
            }
        }
        let mut logits = h.matmul_transposed(&self.w2)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "forward activations".into(),
            });
        }
        let mut p = logits.clone();
        for r in 0..p.rows() {
            softmax_in_place(p.row_mut(r));
        }
        let gate_logit = h.iter_rows().map(|row| dot(row, &self.w_mixin)).collect();
        Ok(ForwardTrace { p, h, logits, gate_logit })
    }

    /// Chain rule from the objective's upstream gradients.
    ///
    /// `d_logits` is ∂L/∂logits per example and `d_g` is ∂L/∂g per example.
    /// The gate enters through `g = softplus(u)`, `u = w_mixin · h`, whose
    /// derivative is `σ(u)` (so 0.5 at `w_mixin = 0`); ∂L/∂u then reaches
    /// `w_mixin` as `h` and the hidden layer as `w_mixin`.
    pub fn backward(&self, trace: &ForwardTrace, batch: &Matrix, d_logits: &Matrix, d_g: &[f64]) -> Result<Gradients> {
        let n = trace.len();
        if d_logits.rows() != n || d_logits.cols() != self.num_classes || d_g.len() != n || batch.rows() != n {
            return Err(Error::Shape("upstream gradients do not match the forward trace".into()));
        }
        let mut w1 = Matrix::zeros(self.hidden, self.input_dim);
        let mut b1 = vec![0.0; self.hidden];
        let mut w2 = Matrix::zeros(self.num_classes, self.hidden);
        let mut b2 = vec![0.0; self.num_classes];
        let mut w_mixin = vec![0.0; self.hidden];
        let mut d_hidden = vec![0.0; self.hidden];

        for i in 0..n {
            let h = trace.h.row(i);
            let dz = d_logits.row(i);
            let du = d_g[i] * sigmoid(trace.gate_logit[i]);

            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (c, &dzc) in dz.iter().enumerate() {
                b2[c] += dzc;
                if dzc == 0.0 {
                    continue;
                }
                let w2_row = self.w2.row(c);
                for ((gw, dh), (&hk, &wk)) in w2.row_mut(c).iter_mut().zip(d_hidden.iter_mut()).zip(h.iter().zip(w2_row)) {
                    *gw += dzc * hk;
                    *dh += dzc * wk;
                }
            }
            if du != 0.0 {
                for ((gm, dh), (&hk, &wk)) in w_mixin.iter_mut().zip(d_hidden.iter_mut()).zip(h.iter().zip(&self.w_mixin)) {
                    *gm += du * hk;
                    *dh += du * wk;
                }
            }
            // tanh' = 1 - h²
            let x = batch.row(i);
            for (k, (&dh, &hk)) in d_hidden.iter().zip(h).enumerate() {
                let da = dh * (1.0 - hk * hk);
                if da == 0.0 {
                    continue;
                }
                b1[k] += da;
                for (gw, &xj) in w1.row_mut(k).iter_mut().zip(x) {
                    *gw += da * xj;
                }
            }
        }
        Ok(Gradients { w1, b1, w2, b2, w_mixin })
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        persist::load_json(path)
    }
}

/// On-disk layout: row-major flat arrays.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierDoc {
    input_dim: usize,
    hidden: usize,
    #[serde(rename = "C")]
    num_classes: usize,
    #[serde(rename = "W1")]
    w1: Vec<f64>,
    b1: Vec<f64>,
    #[serde(rename = "W2")]
    w2: Vec<f64>,
    b2: Vec<f64>,
    w_mixin: Vec<f64>,
}

impl From<Classifier> for ClassifierDoc {
    fn from(c: Classifier) -> Self {
        Self {
            input_dim: c.input_dim,
            hidden: c.hidden,
            num_classes: c.num_classes,
            w1: c.w1.into_data(),
            b1: c.b1,
            w2: c.w2.into_data(),
            b2: c.b2,
            w_mixin: c.w_mixin,
        }
    }
}

impl TryFrom<ClassifierDoc> for Classifier {
    type Error = Error;

    fn try_from(d: ClassifierDoc) -> Result<Self> {
        let vec_len = |v: &Vec<f64>, n: usize, what: &str| {
            if v.len() == n && v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what}: expected {n} finite entries, got {}", v.len())))
            }
        };
        vec_len(&d.b1, d.hidden, "b1")?;
        vec_len(&d.b2, d.num_classes, "b2")?;
        vec_len(&d.w_mixin, d.hidden, "w_mixin")?;
        if d.input_dim == 0 || d.hidden == 0 || d.num_classes == 0 {
            return Err(Error::Invalid("classifier dimensions must be at least 1".into()));
        }
        Ok(Self {
            input_dim: d.input_dim,
            hidden: d.hidden,
            num_classes: d.num_classes,
            w1: Matrix::from_vec(d.hidden, d.input_dim, d.w1)?,
            b1: d.b1,
            w2: Matrix::from_vec(d.num_classes, d.hidden, d.w2)?,
            b2: d.b2,
            w_mixin: d.w_mixin,
        })
    }
}

/// Frozen per-example class distributions from the bias-only model.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPredictions {
    probs: Matrix,
}

impl BiasPredictions {
    pub fn new(probs: Matrix) -> Result<Self> {
        for row in probs.iter_rows() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::NotSimplex { sum });
            }
        }
        Ok(Self { probs })
    }

    /// `n` copies of the uniform distribution.
    pub fn uniform(n: usize, num_classes: usize) -> Self {
        let probs = Matrix::from_vec(n, num_classes, vec![1.0 / num_classes as f64; n * num_classes])
            .expect("uniform rows are finite");
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.probs
    }

    pub fn select(&self, idx: &[usize]) -> BiasPredictions {
        Self {
            probs: self.probs.select_rows(idx),
        }
    }

    /// FNV-1a over the raw bits; identical iff every entry is bit-identical.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.probs.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
        fnv1a64(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[default]
    Analytic,
    Trained,
}

/// Full-batch iterations for the trained bias-only model.
pub const BIAS_FIT_EPOCHS: usize = 50;
/// Largest accepted mean KL(analytic ‖ trained) over tokens.
pub const BIAS_FIT_KL_BOUND: f64 = 0.01;
const MAX_NEWTON_STEP: f64 = 5.0;

/// A bias-only model that sees nothing but the bias token.
#[derive(Clone, Debug, PartialEq)]
pub enum BiasModel {
    Analytic(GenerativeSpec),
    /// Softmax-linear on the one-hot token: `logits = W onehot(t) + c`.
    Trained { weights: Matrix, bias: Vec<f64> },
}

impl BiasModel {
    pub fn fit(ds: &SynthDataset, mode: BiasMode, prng: &mut Prng) -> Result<Self> {
        match mode {
            BiasMode::Analytic => Ok(BiasModel::Analytic(ds.spec.clone())),
            BiasMode::Trained => fit_token_softmax(ds, prng),
        }
    }

    pub fn token_posterior(&self, token: usize) -> Vec<f64> {
        match self {
            BiasModel::Analytic(spec) => analytic_bias_posterior(spec, token),
            BiasModel::Trained { weights, bias } => {
                let mut z: Vec<f64> = (0..NUM_CLASSES).map(|c| weights.get(c, token) + bias[c]).collect();
                softmax_in_place(&mut z);
                z
            }
        }
    }

    pub fn predict(&self, ds: &SynthDataset) -> BiasPredictions {
        let table: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|t| self.token_posterior(t)).collect();
        let mut data = Vec::with_capacity(ds.len() * NUM_CLASSES);
        for ex in &ds.examples {
            data.extend_from_slice(&table[ex.token]);
        }
        BiasPredictions {
            probs: Matrix::from_vec(ds.len(), NUM_CLASSES, data).expect("posteriors are finite"),
        }
    }
}

/// Fits the bias-only model on `ds` and returns its frozen predictions for `ds`.
pub fn fit_bias_only(ds: &SynthDataset, mode: BiasMode, prng: &mut Prng) -> Result<BiasPredictions> {
    Ok(BiasModel::fit(ds, mode, prng)?.predict(ds))
}

fn fit_token_softmax(ds: &SynthDataset, prng: &mut Prng) -> Result<BiasModel> {
    if ds.is_empty() {
        return Err(Error::Empty("bias-only training set"));
    }
    // One-hot inputs make the full-batch loss a function of the
    // (token, label) count table alone.
    let mut counts = [[0.0f64; NUM_CLASSES]; NUM_CLASSES];
    for ex in &ds.examples {
        counts[ex.token][ex.y] += 1.0;
    }

    // Full-batch Newton iterations on each token's logits, with the class-0
    // logit pinned at zero (softmax is shift invariant) and the shared bias
    // left at zero (it is redundant with a one-hot input).
    let mut weights = Matrix::zeros(NUM_CLASSES, NUM_CLASSES);
    for (t, row) in counts.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            continue;
        }
        let target: Vec<f64> = row.iter().map(|c| c / total).collect();
        let mut z = [0.0, 0.01 * prng.normal(), 0.01 * prng.normal()];
        for _ in 0..BIAS_FIT_EPOCHS {
            let mut p = z.to_vec();
            softmax_in_place(&mut p);
            let (g1, g2) = (p[1] - target[1], p[2] - target[2]);
            let (h11, h22, h12) = (p[1] * (1.0 - p[1]), p[2] * (1.0 - p[2]), -p[1] * p[2]);
            let det = h11 * h22 - h12 * h12;
            let (mut d1, mut d2) = if det > 1e-12 {
                ((h22 * g1 - h12 * g2) / det, (h11 * g2 - h12 * g1) / det)
            } else {
                (g1, g2)
            };
            let norm = (d1 * d1 + d2 * d2).sqrt();
            if norm > MAX_NEWTON_STEP {
                d1 *= MAX_NEWTON_STEP / norm;
                d2 *= MAX_NEWTON_STEP / norm;
            }
            z[1] -= d1;
            z[2] -= d2;
        }
        for (c, &zc) in z.iter().enumerate() {
            weights.set(c, t, zc);
        }
    }
    let bias = vec![0.0; NUM_CLASSES];
    let model = BiasModel::Trained { weights, bias };

    let mut kl_sum = 0.0;
    let mut seen = 0;
    for (t, row) in counts.iter().enumerate() {
        if row.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let target = analytic_bias_posterior(&ds.spec, t);
        let fitted = model.token_posterior(t);
        check_simplex(&fitted)?;
        kl_sum += target
            .iter()
            .zip(&fitted)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a / b).ln())
            .sum::<f64>();
        seen += 1;
    }
    let kl = kl_sum / seen as f64;
    if kl > BIAS_FIT_KL_BOUND {
        return Err(Error::BiasFit {
            kl,
            bound: BIAS_FIT_KL_BOUND,
        });
    }
    Ok(model)
}
