//! Finite-difference check of every training objective through the full
//! classifier backward pass.

use std::fmt;

use debias_core::ensembles::{binary_ensemble_loss_and_grad, ensemble_loss_and_grad, EnsembleConfig, Method};
use debias_core::models::{BiasPredictions, Classifier};
use debias_core::ndcore::{finite_diff_grad, max_relative_error, softmax_in_place, Matrix, Prng, FD_STEP};
use debias_core::Result;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const GRADCHECK_INSTANCES: usize = 20;
/// Floor on the denominator of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

const INPUT_DIM: usize = 5;
const HIDDEN: usize = 6;
const CLASSES: usize = 3;
const BATCH: usize = 4;
const LAMBDA_H: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ensemble(Method),
    /// Multi-label two-class learned mixin with the softening parameter.
    BinaryEnsemble,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Ensemble(Method::None),
        Objective::Ensemble(Method::Reweight),
        Objective::Ensemble(Method::BiasProduct),
        Objective::Ensemble(Method::LearnedMixin),
        Objective::Ensemble(Method::LearnedMixinH),
        Objective::BinaryEnsemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ensemble(m) => m.as_str(),
            Objective::BinaryEnsemble => "binary_ensemble",
        }
    }

    /// Whether the gradient flows through the learned gate.
    pub fn has_gate_path(self) -> bool {
        match self {
            Objective::Ensemble(m) => m.uses_gate(),
            Objective::BinaryEnsemble => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveCheck {
    pub objective: Objective,
    pub instances: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub checks: Vec<ObjectiveCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>9} {:>14}  status", "objective", "instances", "worst rel err")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<18} {:>9} {:>14.3e}  {}",
                c.objective.name(),
                c.instances,
                c.worst_relative_error,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "threshold {:e}: {}", self.threshold, if self.passed() { "all passed" } else { "FAILED" })
    }
}

/// A small random problem: classifier, batch, frozen bias rows, labels and a
/// softening parameter.
struct Instance {
    clf: Classifier,
    batch: Matrix,
    bias: BiasPredictions,
    y: Vec<usize>,
    alpha: f64,
}

impl Instance {
    fn draw(prng: &mut Prng) -> Result<Self> {
        let mut clf = Classifier::init(INPUT_DIM, HIDDEN, CLASSES, prng)?;
        let flat: Vec<f64> = clf.params_flat().iter().map(|_| prng.normal()).collect();
        clf.set_params_flat(&flat)?;
        let batch = Matrix::from_vec(BATCH, INPUT_DIM, (0..BATCH * INPUT_DIM).map(|_| prng.normal()).collect())?;
        let rows: Vec<Vec<f64>> = (0..BATCH)
            .map(|_| {
                let mut z: Vec<f64> = (0..CLASSES).map(|_| 2.0 * prng.normal()).collect();
                softmax_in_place(&mut z);
                z
            })
            .collect();
        let bias = BiasPredictions::new(Matrix::from_rows(&rows)?)?;
        let y = (0..BATCH).map(|_| prng.below(CLASSES)).collect();
        let alpha = 2.0 * prng.normal();
        Ok(Self { clf, batch, bias, y, alpha })
    }

    /// Parameter vector checked for `objective`: classifier parameters, plus
    /// `alpha` last for the binary ensemble.
    fn theta(&self, objective: Objective) -> Vec<f64> {
        let mut theta = self.clf.params_flat();
        if objective == Objective::BinaryEnsemble {
            theta.push(self.alpha);
        }
        theta
    }

    fn loss_and_grad(&self, objective: Objective, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut clf = self.clf.clone();
        let n = clf.num_params();
        clf.set_params_flat(&theta[..n])?;
        let trace = clf.forward(&self.batch)?;
        match objective {
            Objective::Ensemble(method) => {
                let cfg = EnsembleConfig::new(method).with_lambda_h(LAMBDA_H);
                let (report, up) = ensemble_loss_and_grad(&cfg, &trace, &self.bias, &self.y)?;
                let grad = clf.backward(&trace, &self.batch, &up.d_logits, &up.d_g)?.flat();
                Ok((report.total_loss, grad))
            }
            Objective::BinaryEnsemble => {
                let alpha = theta[n];
                let gates = trace.gates();
                let out = binary_ensemble_loss_and_grad(&trace, self.bias.matrix(), &self.y, alpha, &gates)?;
                let mut grad = clf.backward(&trace, &self.batch, &out.d_logits, &out.d_g)?.flat();
                grad.push(out.d_alpha);
                Ok((out.loss, grad))
            }
        }
    }
}

/// Worst relative error of `objective` over `instances` random problems.
/// `corrupt` is applied to each analytic gradient before comparison.
pub fn check_objective<F>(objective: Objective, instances: usize, seed: u64, corrupt: F) -> Result<f64>
where
    F: Fn(&mut [f64]),
{
    let mut prng = Prng::derive(seed, objective.name());
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inst = Instance::draw(&mut prng)?;
        let theta = inst.theta(objective);
        let (_, mut analytic) = inst.loss_and_grad(objective, &theta)?;
        corrupt(&mut analytic);
        let numeric = finite_diff_grad(
            |t| inst.loss_and_grad(objective, t).map_or(f64::NAN, |(l, _)| l),
            &theta,
            FD_STEP,
        )?;
        let err = if analytic.iter().all(|v| v.is_finite()) {
            max_relative_error(&analytic, &numeric, RELATIVE_ERROR_FLOOR)
        } else {
            f64::INFINITY
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gradcheck_suite() -> GradcheckReport {
    gradcheck_suite_with(|_, _| {})
}

/// The suite with a hook that may tamper with analytic gradients, for
/// negative controls.
pub fn gradcheck_suite_with<F>(corrupt: F) -> GradcheckReport
where
    F: Fn(Objective, &mut [f64]),
{
    let checks = Objective::ALL
        .iter()
        .map(|&objective| {
            let worst = check_objective(objective, GRADCHECK_INSTANCES, 0, |g| corrupt(objective, g)).unwrap_or(f64::INFINITY);
            ObjectiveCheck {
                objective,
                instances: GRADCHECK_INSTANCES,
                worst_relative_error: worst,
                passed: worst < GRADCHECK_THRESHOLD,
            }
        })
        .collect();
    GradcheckReport {
        threshold: GRADCHECK_THRESHOLD,
        checks,
    }
}
