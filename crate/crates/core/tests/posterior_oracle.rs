//! Bayes posteriors recomputed by hand from the generative story and compared
//! with the library's analytic posteriors and its sampler.

use debias_core::ndcore::Prng;
use debias_core::synth::{
    analytic_base_posterior, analytic_bias_posterior, analytic_full_posterior, sample_dataset, BiasKind, GenerativeSpec,
    Split,
};

const SEP: f64 = 2.0;

/// Hand-written `P(token, indicator | y)` straight from the construction.
fn emission(kind: BiasKind, y: usize, token: usize, indicator: Option<u8>) -> f64 {
    let agree = token == y;
    match (kind, indicator) {
        (BiasKind::Indicator, None) => if agree { 0.8 } else { 0.1 },
        (BiasKind::Excluder, None) => if agree { 0.03 } else { 0.485 },
        (BiasKind::Dependent, Some(0)) => 0.8 * if agree { 0.9 } else { 0.05 },
        (BiasKind::Dependent, Some(1)) => 0.2 / 3.0,
        _ => panic!("unexpected combination"),
    }
}

fn means(sep: f64) -> [[f64; 2]; 3] {
    let r = sep / 3f64.sqrt();
    let a = |k: f64| std::f64::consts::FRAC_PI_2 + k * 2.0 * std::f64::consts::PI / 3.0;
    [[r * a(0.0).cos(), r * a(0.0).sin()], [r * a(1.0).cos(), r * a(1.0).sin()], [r * a(2.0).cos(), r * a(2.0).sin()]]
}

fn oracle_full(kind: BiasKind, x: &[f64], token: usize, indicator: Option<u8>) -> Vec<f64> {
    let m = means(SEP);
    // Only the first two coordinates differ between classes.
    let w: Vec<f64> = (0..3)
        .map(|y| {
            let d2 = (x[0] - m[y][0]).powi(2) + (x[1] - m[y][1]).powi(2);
            (-0.5 * d2).exp() * emission(kind, y, token, indicator)
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_posterior_matches_hand_computation() {
    for kind in BiasKind::BIASED {
        let spec = GenerativeSpec::new(kind, SEP);
        let ds = sample_dataset(&spec, 500, Split::Train, &mut Prng::new(11)).unwrap();
        for ex in &ds.examples {
            let lib = analytic_full_posterior(&spec, ex);
            let hand = oracle_full(kind, &ex.x, ex.token, ex.indicator);
            assert!(max_abs_diff(&lib, &hand) < 1e-12, "{kind}: {lib:?} vs {hand:?}");
        }
    }
}

#[test]
fn bias_posteriors_match_closed_forms() {
    let rows = [
        (BiasKind::Indicator, [0.8, 0.1, 0.1]),
        (BiasKind::Excluder, [0.03, 0.485, 0.485]),
        // 0.8 * 0.9 + 0.2 / 3 against 0.8 * 0.05 + 0.2 / 3, normalized.
        (BiasKind::Dependent, [0.786_666_666_666_666_7, 0.106_666_666_666_666_67, 0.106_666_666_666_666_67]),
    ];
    for (kind, want) in rows {
        let spec = GenerativeSpec::new(kind, SEP);
        for token in 0..3 {
            let got = analytic_bias_posterior(&spec, token);
            let mut expected = [want[1]; 3];
            expected[token] = want[0];
            assert!(max_abs_diff(&got, &expected) < 1e-12, "{kind} token {token}: {got:?}");
        }
    }
}

/// Empirical P(token = y) and P(indicator = 1) from a large sample match the
/// construction.
#[test]
fn sampler_frequencies_match_construction() {
    let n = 60_000;
    for (kind, agree) in [(BiasKind::Indicator, 0.8), (BiasKind::Excluder, 0.03), (BiasKind::Dependent, 0.8 * 0.9 + 0.2 / 3.0)] {
        let spec = GenerativeSpec::new(kind, SEP);
        let ds = sample_dataset(&spec, n, Split::Train, &mut Prng::new(5)).unwrap();
        let rate = ds.examples.iter().filter(|e| e.token == e.y).count() as f64 / n as f64;
        // Five binomial standard deviations.
        let tol = 5.0 * (agree * (1.0 - agree) / n as f64).sqrt();
        assert!((rate - agree).abs() < tol, "{kind}: {rate} vs {agree}");
        if kind == BiasKind::Dependent {
            let ind1 = ds.examples.iter().filter(|e| e.indicator == Some(1)).count() as f64 / n as f64;
            assert!((ind1 - 0.2).abs() < 5.0 * (0.16 / n as f64).sqrt());
            let ind1_agree = ds.examples.iter().filter(|e| e.indicator == Some(1) && e.token == e.y).count() as f64
                / ds.examples.iter().filter(|e| e.indicator == Some(1)).count() as f64;
            assert!((ind1_agree - 1.0 / 3.0).abs() < 0.03);
        }
        let ood = sample_dataset(&spec, n, Split::OodTest, &mut Prng::new(6)).unwrap();
        let ood_rate = ood.examples.iter().filter(|e| e.token == e.y).count() as f64 / n as f64;
        assert!((ood_rate - 1.0 / 3.0).abs() < 5.0 * (2.0 / 9.0 / n as f64).sqrt(), "{kind} ood: {ood_rate}");
    }
}

/// Combining the two views by a normalized product recovers the full posterior
/// exactly when the bias is independent of the rest given the label, and
/// misses it when the dependent indicator breaks that independence.
#[test]
fn product_of_views_and_conditional_independence() {
    for kind in BiasKind::BIASED {
        let spec = GenerativeSpec::new(kind, SEP);
        let ds = sample_dataset(&spec, 1000, Split::Train, &mut Prng::new(21)).unwrap();
        let mut off = 0;
        for ex in &ds.examples {
            let base = analytic_base_posterior(&spec, &ex.x);
            let bias = analytic_bias_posterior(&spec, ex.token);
            let prod: Vec<f64> = base.iter().zip(&bias).map(|(a, b)| a * b).collect();
            let s: f64 = prod.iter().sum();
            let combined: Vec<f64> = prod.iter().map(|v| v / s).collect();
            let dev = max_abs_diff(&combined, &analytic_full_posterior(&spec, ex));
            if kind == BiasKind::Dependent {
                off += usize::from(dev > 1e-3);
            } else {
                assert!(dev < 1e-10, "{kind}: deviation {dev}");
            }
        }
        if kind == BiasKind::Dependent {
            assert!(off >= 100, "only {off} of 1000 examples deviate");
        }
    }
}
