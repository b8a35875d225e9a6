//! Diagnostics for trained classifiers: accuracies, agreement with the bias,
//! gate statistics and correlations.
//!
//! Accuracy is computed from the main model's own distribution `p`; nothing
//! here combines it with the bias model.

use serde::{Deserialize, Serialize};

use crate::ensembles::Method;
use crate::error::{Error, Result};
use crate::models::{BiasModel, BiasPredictions, Classifier};
use crate::ndcore::Matrix;
use crate::synth::{argmax, BiasKind, SynthDataset, SynthExample};

pub fn predict_proba(clf: &Classifier, ds: &SynthDataset) -> Result<Matrix> {
    Ok(clf.forward(&ds.features())?.p)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy_from_probs(p: &Matrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let correct = p.iter_rows().zip(y).filter(|(row, &yi)| argmax(row) == yi).count();
    Ok(correct as f64 / y.len() as f64)
}

pub fn accuracy(clf: &Classifier, ds: &SynthDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    accuracy_from_probs(&predict_proba(clf, ds)?, &ds.labels())
}

/// Mean over `slice` of the probability `p` puts on the class the bias model
/// ranks first.
pub fn bias_agreement_from_probs<F>(p: &Matrix, ds: &SynthDataset, b: &BiasPredictions, slice: F) -> Result<f64>
where
    F: Fn(&SynthExample) -> bool,
{
    if b.len() != ds.len() || p.rows() != ds.len() {
        return Err(Error::Shape("bias predictions do not match the dataset".into()));
    }
    let (sum, count) = ds
        .examples
        .iter()
        .enumerate()
        .filter(|(_, ex)| slice(ex))
        .fold((0.0, 0usize), |(s, c), (i, _)| (s + p.get(i, argmax(b.row(i))), c + 1));
    if count == 0 {
        return Err(Error::Empty("bias-agreement slice"));
    }
    Ok(sum / count as f64)
}

pub fn bias_agreement<F>(clf: &Classifier, ds: &SynthDataset, b: &BiasPredictions, slice: F) -> Result<f64>
where
    F: Fn(&SynthExample) -> bool,
{
    bias_agreement_from_probs(&predict_proba(clf, ds)?, ds, b, slice)
}

/// The default bias-agreement slice: indicator = 1 for the dependent bias,
/// everything otherwise.
pub fn default_agreement_slice(kind: BiasKind) -> impl Fn(&SynthExample) -> bool {
    move |ex: &SynthExample| kind != BiasKind::Dependent || ex.indicator == Some(1)
}

/// `Σ_j s_j b_j / Σ_j b_j`.
pub fn expected_bias_accuracy(b: &[f64], scores: &[f64]) -> f64 {
    let num: f64 = b.iter().zip(scores).map(|(p, s)| p * s).sum();
    num / b.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl SliceStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("statistics slice"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub ind0: SliceStats,
    pub ind1: SliceStats,
}

/// `g(x) = softplus(w_mixin · h(x))` for every example.
pub fn gate_values(clf: &Classifier, ds: &SynthDataset) -> Result<Vec<f64>> {
    Ok(clf.forward(&ds.features())?.gates())
}

pub fn gate_summary(clf: &Classifier, ds: &SynthDataset) -> Result<SliceStats> {
    SliceStats::of(&gate_values(clf, ds)?)
}

pub fn gate_stats_from_values(ds: &SynthDataset, gates: &[f64]) -> Result<GateStats> {
    if ds.spec.bias_kind != BiasKind::Dependent {
        return Err(Error::Invalid(format!(
            "indicator slices need a dependent-bias dataset, got {}",
            ds.spec.bias_kind
        )));
    }
    let pick = |flag: u8| -> Vec<f64> {
        ds.examples
            .iter()
            .zip(gates)
            .filter(|(ex, _)| ex.indicator == Some(flag))
            .map(|(_, &g)| g)
            .collect()
    };
    Ok(GateStats {
        ind0: SliceStats::of(&pick(0))?,
        ind1: SliceStats::of(&pick(1))?,
    })
}

/// Gate mean and population std, split by the dependent indicator.
pub fn g_statistics(clf: &Classifier, ds: &SynthDataset) -> Result<GateStats> {
    gate_stats_from_values(ds, &gate_values(clf, ds)?)
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Empty("correlation input (need at least 2 samples)"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub acc_in_domain: f64,
    pub acc_ood: f64,
    pub bias_agreement: f64,
    pub g_mean_ind0: Option<f64>,
    pub g_std_ind0: Option<f64>,
    pub g_mean_ind1: Option<f64>,
    pub g_std_ind1: Option<f64>,
    pub pearson_g_biasacc: Option<f64>,
    pub spearman_g_biasacc: Option<f64>,
    /// Mean gate over the whole OOD split (gated methods only).
    pub g_mean: Option<f64>,
}

/// All diagnostics for one trained classifier. Gate-derived fields are filled
/// for gated methods only, indicator slices for the dependent bias only; gate
/// correlations use the OOD split, and a constant gate leaves them empty.
pub fn evaluate(
    clf: &Classifier,
    method: Method,
    in_domain: &SynthDataset,
    ood: &SynthDataset,
    bias_model: &BiasModel,
) -> Result<RunMetrics> {
    let acc_in_domain = accuracy(clf, in_domain)?;
    let ood_trace = clf.forward(&ood.features())?;
    let acc_ood = accuracy_from_probs(&ood_trace.p, &ood.labels())?;
    let ood_bias = bias_model.predict(ood);
    let kind = ood.spec.bias_kind;
    let bias_agreement = bias_agreement_from_probs(&ood_trace.p, ood, &ood_bias, default_agreement_slice(kind))?;

    let mut metrics = RunMetrics {
        acc_in_domain,
        acc_ood,
        bias_agreement,
        g_mean_ind0: None,
        g_std_ind0: None,
        g_mean_ind1: None,
        g_std_ind1: None,
        pearson_g_biasacc: None,
        spearman_g_biasacc: None,
        g_mean: None,
    };
    if method.uses_gate() {
        let gates = ood_trace.gates();
        metrics.g_mean = Some(SliceStats::of(&gates)?.mean);
        if kind == BiasKind::Dependent {
            let stats = gate_stats_from_values(ood, &gates)?;
            metrics.g_mean_ind0 = Some(stats.ind0.mean);
            metrics.g_std_ind0 = Some(stats.ind0.std);
            metrics.g_mean_ind1 = Some(stats.ind1.mean);
            metrics.g_std_ind1 = Some(stats.ind1.std);
        }
        let bias_acc: Vec<f64> = ood
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let scores: Vec<f64> = (0..ood_bias.row(i).len()).map(|j| f64::from(u8::from(j == ex.y))).collect();
                expected_bias_accuracy(ood_bias.row(i), &scores)
            })
            .collect();
        metrics.pearson_g_biasacc = pearson(&gates, &bias_acc).ok();
        metrics.spearman_g_biasacc = spearman(&gates, &bias_acc).ok();
    }
    Ok(metrics)
}
