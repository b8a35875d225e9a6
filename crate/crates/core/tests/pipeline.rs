//! Generate, fit the bias-only model, train, persist and evaluate.

use debias_core::analyze::{accuracy, evaluate};
use debias_core::ensembles::{EnsembleConfig, Method};
use debias_core::models::{fit_bias_only, BiasMode, BiasModel, BiasPredictions, Classifier};
use debias_core::ndcore::Prng;
use debias_core::synth::{calibrate_separation, randomize_bias, sample_dataset, BiasKind, GenerativeSpec, Split, SynthDataset};
use debias_core::train::{train_run, train_with_bias, TrainConfig};

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 128,
        learning_rate: 5e-3,
        hidden: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn splits(kind: BiasKind) -> (SynthDataset, SynthDataset, SynthDataset) {
    let spec = GenerativeSpec::new(kind, 2.2).with_base_dim(6);
    (
        sample_dataset(&spec, 3000, Split::Train, &mut Prng::derive(1, "train")).unwrap(),
        sample_dataset(&spec, 2000, Split::InDomainTest, &mut Prng::derive(1, "in")).unwrap(),
        sample_dataset(&spec, 2000, Split::OodTest, &mut Prng::derive(1, "ood")).unwrap(),
    )
}

#[test]
fn plain_training_learns_the_bias_and_ensembles_do_not() {
    let (train, in_domain, ood) = splits(BiasKind::Indicator);
    let bias_model = BiasModel::fit(&train, BiasMode::Analytic, &mut Prng::new(0)).unwrap();
    let bias = bias_model.predict(&train);

    let none = train_with_bias(&train, &bias, &small_cfg(3), &EnsembleConfig::new(Method::None)).unwrap();
    let none_m = evaluate(&none.classifier, Method::None, &in_domain, &ood, &bias_model).unwrap();
    assert!(none_m.acc_in_domain > none_m.acc_ood + 0.08, "{none_m:?}");

    let prod = train_with_bias(&train, &bias, &small_cfg(3), &EnsembleConfig::new(Method::BiasProduct)).unwrap();
    let prod_m = evaluate(&prod.classifier, Method::BiasProduct, &in_domain, &ood, &bias_model).unwrap();
    assert!(prod_m.acc_ood > none_m.acc_ood, "{prod_m:?} vs {none_m:?}");
    assert!(prod_m.bias_agreement < none_m.bias_agreement);
    assert_eq!(prod.bias_checksum, bias.checksum());
}

#[test]
fn unbiased_training_sees_matching_distributions() {
    let (train, in_domain, ood) = splits(BiasKind::Indicator);
    let randomized = randomize_bias(&train, &mut Prng::new(8));
    let uniform = BiasPredictions::uniform(randomized.len(), 3);
    let rec = train_with_bias(&randomized, &uniform, &small_cfg(4), &EnsembleConfig::new(Method::Unbiased)).unwrap();
    let acc_in = accuracy(&rec.classifier, &in_domain).unwrap();
    let acc_ood = accuracy(&rec.classifier, &ood).unwrap();
    assert!((acc_in - acc_ood).abs() < 0.05, "{acc_in} vs {acc_ood}");
}

#[test]
fn gated_metrics_only_for_gated_methods() {
    let (train, in_domain, ood) = splits(BiasKind::Dependent);
    let bias_model = BiasModel::fit(&train, BiasMode::Analytic, &mut Prng::new(0)).unwrap();
    let bias = bias_model.predict(&train);
    for method in [Method::BiasProduct, Method::LearnedMixin] {
        let rec = train_with_bias(&train, &bias, &small_cfg(5), &EnsembleConfig::new(method)).unwrap();
        let m = evaluate(&rec.classifier, method, &in_domain, &ood, &bias_model).unwrap();
        assert_eq!(m.g_mean_ind0.is_some(), method.uses_gate());
        assert_eq!(m.g_std_ind1.is_some(), method.uses_gate());
        assert_eq!(m.g_mean.is_some(), method.uses_gate());
        if let (Some(a), Some(b)) = (m.g_mean_ind0, m.g_mean_ind1) {
            assert!(a >= 0.0 && b >= 0.0);
        }
    }
}

#[test]
fn runs_are_reproducible_and_persist() {
    let (train, _, ood) = splits(BiasKind::Excluder);
    let ecfg = EnsembleConfig::new(Method::LearnedMixinH).with_lambda_h(0.005);
    let a = train_run(&train, &small_cfg(9), &ecfg, BiasMode::Trained).unwrap();
    let b = train_run(&train, &small_cfg(9), &ecfg, BiasMode::Trained).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.classifier, b.classifier);
    assert_eq!(a.loss_history.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.json");
    a.classifier.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back, a.classifier);
    assert_eq!(back.forward(&ood.features()).unwrap().p, a.classifier.forward(&ood.features()).unwrap().p);

    let ds_path = dir.path().join("ood.json");
    ood.save(&ds_path).unwrap();
    assert_eq!(SynthDataset::load(&ds_path).unwrap(), ood);
}

#[test]
fn trained_and_analytic_bias_models_agree() {
    let spec = GenerativeSpec::new(BiasKind::Dependent, 2.0);
    let train = sample_dataset(&spec, 50_000, Split::Train, &mut Prng::new(2)).unwrap();
    let analytic = fit_bias_only(&train, BiasMode::Analytic, &mut Prng::new(0)).unwrap();
    let trained = fit_bias_only(&train, BiasMode::Trained, &mut Prng::new(0)).unwrap();
    let worst = analytic
        .matrix()
        .data()
        .iter()
        .zip(trained.matrix().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.01, "worst gap {worst}");
}

#[test]
fn calibration_is_deterministic() {
    let a = calibrate_separation(0.79, 0.01, &mut Prng::new(4)).unwrap();
    let b = calibrate_separation(0.79, 0.01, &mut Prng::new(4)).unwrap();
    assert_eq!(a, b);
    assert!(a > 0.5 && a < 5.0);
}
