//! Online learners sharing a predict-then-update interface.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{standard_normal, BeliefError, BeliefState, Covariance, Variant, WeightVector, DEFAULT_FLOOR};
use crate::flow::{self, FlowConfig, FlowError, Sign};
use crate::model::{predict_label, HiddenMode, LabeledExample, ModelError, ModelSpec, Workspace};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("{0}")]
    Unsupported(String),
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bflo,
    Sgd,
    Arow,
    Blang,
    Dropout,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Bflo => "bflo",
            Algorithm::Sgd => "sgd",
            Algorithm::Arow => "arow",
            Algorithm::Blang => "blang",
            Algorithm::Dropout => "dropout",
        }
    }
}

fn default_eta() -> f64 {
    0.001
}
fn default_sigma() -> f64 {
    0.2
}
fn default_iterations() -> usize {
    1
}
fn default_variant() -> Variant {
    Variant::Diagonal
}
fn default_floor() -> f64 {
    DEFAULT_FLOOR
}
fn default_r() -> f64 {
    10.0
}
fn default_p_drop() -> f64 {
    0.5
}

/// Hyperparameters for every learner; fields irrelevant to an algorithm are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_sigma")]
    pub sigma_init: f64,
    /// Update iterations per example (`m`).
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub non_expansive: bool,
    #[serde(default = "default_floor")]
    pub lambda_min: f64,
    /// AROW regularizer.
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    /// BFLO: freeze to a posterior sample instead of the mean.
    #[serde(default)]
    pub sample_at_test: bool,
}

impl LearnerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            eta: default_eta(),
            sigma_init: default_sigma(),
            iterations: default_iterations(),
            variant: default_variant(),
            non_expansive: false,
            lambda_min: default_floor(),
            r: default_r(),
            p_drop: default_p_drop(),
            sample_at_test: false,
        }
    }

    pub fn bflo(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::new(Algorithm::Bflo)
        }
    }

    /// Short label such as `bflo-diagonal` or `sgd`.
    pub fn label(&self) -> String {
        match self.algorithm {
            Algorithm::Bflo if self.non_expansive => format!("bflo-{}-nonexp", self.variant),
            Algorithm::Bflo => format!("bflo-{}", self.variant),
            a => a.as_str().to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Hyperparameter(m.to_string()));
        let uses_eta = !matches!(self.algorithm, Algorithm::Arow);
        if uses_eta && !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and non-negative");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return bad("sigma_init must be finite and non-negative");
        }
        if self.algorithm == Algorithm::Bflo && !(self.sigma_init > 0.0) {
            return bad("bflo needs sigma_init > 0");
        }
        if !(self.lambda_min > 0.0) {
            return bad("lambda_min must be positive");
        }
        if !(self.r > 0.0) {
            return bad("r must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub predicted: usize,
    /// Prediction judged against the example's true label.
    pub correct: bool,
    /// Loss of the prediction against the training label.
    pub loss: T,
    pub entropy: Option<T>,
    pub sample_norm: Option<T>,
}

pub trait OnlineLearner<T: Real>: Send {
    /// Predicts, then updates on the example.
    fn step(&mut self, example: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError>;
    /// Weights used for test-time evaluation.
    fn freeze(&mut self) -> WeightVector<T>;
    fn model(&self) -> &ModelSpec;
    fn belief(&self) -> Option<&BeliefState<T>> {
        None
    }
    /// Entropy of the current belief, for learners that keep one.
    fn entropy(&self) -> Option<T> {
        self.belief().map(BeliefState::entropy)
    }
}

/// Builds the learner for `cfg`, seeded from `seed`.
pub fn build_learner<T: Real>(
    cfg: &LearnerConfig,
    spec: ModelSpec,
    seed: u64,
) -> Result<Box<dyn OnlineLearner<T>>, LearnerError> {
    cfg.validate()?;
    spec.validate()?;
    Ok(match cfg.algorithm {
        Algorithm::Bflo => Box::new(Bflo::new(spec, cfg, seed)?),
        Algorithm::Sgd => Box::new(Sgd::new(spec, cfg, seed)),
        Algorithm::Arow => Box::new(Arow::new(spec, cfg)?),
        Algorithm::Blang => Box::new(Blang::new(spec, cfg, seed)),
        Algorithm::Dropout => Box::new(DropoutSgd::new(spec, cfg, seed)?),
    })
}

fn gaussian_init<T: Real>(rng: &mut ChaCha8Rng, d: usize, sigma: T) -> DVector<T> {
    DVector::from_fn(d, |_, _| sigma * standard_normal::<T, _>(rng))
}

fn outcome<T: Real>(z: &[T], loss: T, ex: &LabeledExample<T>) -> StepOutcome<T> {
    let predicted = predict_label(z);
    StepOutcome {
        predicted,
        correct: predicted == ex.truth(),
        loss,
        entropy: None,
        sample_norm: None,
    }
}

/// Belief flow learner.
pub struct Bflo<T: Real> {
    spec: ModelSpec,
    belief: BeliefState<T>,
    flow: FlowConfig<T>,
    eta: T,
    iterations: usize,
    floor: T,
    sample_at_test: bool,
    track_entropy: bool,
    rng: ChaCha8Rng,
    flow_updates: u64,
    w: DVector<T>,
    w_new: DVector<T>,
    grad: Vec<T>,
    support: Vec<usize>,
    noise: Vec<(T, T)>,
    ws: Workspace<T>,
}

impl<T: Real> Bflo<T> {
    pub fn new(spec: ModelSpec, cfg: &LearnerConfig, seed: u64) -> Result<Self, LearnerError> {
        let sigma = T::lit(cfg.sigma_init);
        let d = spec.num_params();
        let belief = BeliefState::isotropic(cfg.variant, DVector::zeros(d), sigma * sigma)?;
        Ok(Self::with_belief(spec, belief, cfg, seed))
    }

    /// Starts from an explicit prior belief.
    pub fn with_belief(spec: ModelSpec, belief: BeliefState<T>, cfg: &LearnerConfig, seed: u64) -> Self {
        let d = spec.num_params();
        Self {
            ws: Workspace::new(&spec),
            spec,
            belief,
            flow: FlowConfig::default().non_expansive(cfg.non_expansive),
            eta: T::lit(cfg.eta),
            iterations: cfg.iterations,
            floor: T::lit(cfg.lambda_min),
            sample_at_test: cfg.sample_at_test,
            track_entropy: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flow_updates: 0,
            w: DVector::zeros(d),
            w_new: DVector::zeros(d),
            grad: vec![T::zero(); d],
            support: Vec::new(),
            noise: Vec::new(),
        }
    }

    /// Report the belief entropy in every [`StepOutcome`].
    pub fn track_entropy(mut self, on: bool) -> Self {
        self.track_entropy = on;
        self
    }

    /// Total number of flow updates applied so far.
    pub fn flow_updates(&self) -> u64 {
        self.flow_updates
    }

    fn step_sparse_diagonal(&mut self, ex: &LabeledExample<T>, first: bool) -> Result<(Vec<T>, T), LearnerError> {
        let (mean, cov) = self.belief.parts_mut();
        let Covariance::Diagonal { variances } = cov else {
            unreachable!("diagonal path")
        };
        let (mean, variances) = (mean.as_mut_slice(), variances.as_mut_slice());
        if first {
            self.spec.support(&ex.features, &mut self.support);
        }
        let w = self.w.as_mut_slice();
        self.noise.clear();
        for &i in &self.support {
            let sd = variances[i].sqrt();
            let xi = standard_normal::<T, _>(&mut self.rng);
            w[i] = mean[i] + sd * xi;
            self.noise.push((sd, xi));
        }
        let (z, loss) = self.spec.loss_and_gradient(w, &ex.features, ex.label, &HiddenMode::Plain, &mut self.ws, &mut self.grad)?;
        let non_expansive = self.flow.non_expansive;
        // Whitened coordinates come straight from the draw: u = ξ, v = ξ − η g / sd.
        for (&i, &(sd, xi)) in self.support.iter().zip(&self.noise) {
            let step = self.eta * self.grad[i];
            if step == T::zero() {
                continue;
            }
            let w_new = w[i] - step;
            let mut a = flow::axis_scale(xi, xi - step / sd, Sign::Plus);
            if non_expansive && a > T::one() {
                a = T::one();
            }
            mean[i] = w_new - a * sd * xi;
            variances[i] = (a * a * variances[i]).max(self.floor);
        }
        Ok((z, loss))
    }

    fn step_dense(&mut self, ex: &LabeledExample<T>) -> Result<(Vec<T>, T), LearnerError> {
        self.belief.sample_into(&mut self.rng, &mut self.w);
        self.grad.iter_mut().for_each(|g| *g = T::zero());
        let (z, loss) = self.spec.loss_and_gradient(
            self.w.as_slice(),
            &ex.features,
            ex.label,
            &HiddenMode::Plain,
            &mut self.ws,
            &mut self.grad,
        )?;
        for i in 0..self.w.len() {
            self.w_new[i] = self.w[i] - self.eta * self.grad[i];
        }
        let (mut posterior, _) = flow::update(&self.belief, &self.w, &self.w_new, &self.flow)?;
        posterior.correct_spectrum_in_place(self.floor);
        self.belief = posterior;
        Ok((z, loss))
    }
}

impl<T: Real> OnlineLearner<T> for Bflo<T> {
    fn step(&mut self, ex: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError> {
        ex.features.check(self.spec.inputs())?;
        let mut first = None;
        let mut sample_norm = None;
        for it in 0..self.iterations {
            let r = if self.belief.variant() == Variant::Diagonal {
                self.step_sparse_diagonal(ex, it == 0)?
            } else {
                let r = self.step_dense(ex)?;
                if it == 0 {
                    sample_norm = Some(self.w.norm());
                }
                r
            };
            self.flow_updates += 1;
            if it == 0 {
                first = Some(r);
            }
        }
        let (z, loss) = first.expect("at least one iteration");
        let mut out = outcome(&z, loss, ex);
        out.sample_norm = sample_norm;
        if self.track_entropy {
            out.entropy = Some(self.belief.entropy());
        }
        Ok(out)
    }

    fn freeze(&mut self) -> WeightVector<T> {
        if self.sample_at_test {
            self.belief.sample(&mut self.rng)
        } else {
            self.belief.mean().clone()
        }
    }

    fn model(&self) -> &ModelSpec {
        &self.spec
    }

    fn belief(&self) -> Option<&BeliefState<T>> {
        Some(&self.belief)
    }
}

/// Plain stochastic gradient descent.
pub struct Sgd<T: Real> {
    spec: ModelSpec,
    w: DVector<T>,
    eta: T,
    iterations: usize,
    grad: Vec<T>,
    support: Vec<usize>,
    ws: Workspace<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(spec: ModelSpec, cfg: &LearnerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_init(&mut rng, spec.num_params(), T::lit(cfg.sigma_init));
        Self::with_weights(spec, w, cfg)
    }

    pub fn with_weights(spec: ModelSpec, w: DVector<T>, cfg: &LearnerConfig) -> Self {
        Self {
            grad: vec![T::zero(); spec.num_params()],
            ws: Workspace::new(&spec),
            spec,
            w,
            eta: T::lit(cfg.eta),
            iterations: cfg.iterations,
            support: Vec::new(),
        }
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.w
    }
}

/// One masked or plain SGD pass over the support of `x`.
fn sgd_pass<T: Real>(
    spec: &ModelSpec,
    w: &mut DVector<T>,
    ex: &LabeledExample<T>,
    eta: T,
    mode: &HiddenMode<T>,
    ws: &mut Workspace<T>,
    grad: &mut [T],
    support: &[usize],
) -> Result<(Vec<T>, T), LearnerError> {
    let r = spec.loss_and_gradient(w.as_slice(), &ex.features, ex.label, mode, ws, grad)?;
    for &i in support {
        w[i] -= eta * grad[i];
    }
    Ok(r)
}

impl<T: Real> OnlineLearner<T> for Sgd<T> {
    fn step(&mut self, ex: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError> {
        ex.features.check(self.spec.inputs())?;
        self.spec.support(&ex.features, &mut self.support);
        let mut first = None;
        for _ in 0..self.iterations {
            let r = sgd_pass(
                &self.spec,
                &mut self.w,
                ex,
                self.eta,
                &HiddenMode::Plain,
                &mut self.ws,
                &mut self.grad,
                &self.support,
            )?;
            first.get_or_insert(r);
        }
        let (z, loss) = first.expect("at least one iteration");
        Ok(outcome(&z, loss, ex))
    }

    fn freeze(&mut self) -> WeightVector<T> {
        self.w.clone()
    }

    fn model(&self) -> &ModelSpec {
        &self.spec
    }
}

/// Diagonal adaptive regularization of weights for binary linear models.
pub struct Arow<T: Real> {
    spec: ModelSpec,
    mean: DVector<T>,
    variances: DVector<T>,
    r: T,
}

impl<T: Real> Arow<T> {
    pub fn new(spec: ModelSpec, cfg: &LearnerConfig) -> Result<Self, LearnerError> {
        if !matches!(spec, ModelSpec::Logistic { .. }) {
            return Err(LearnerError::Unsupported("arow needs a binary linear model".into()));
        }
        let d = spec.num_params();
        Ok(Self {
            spec,
            mean: DVector::zeros(d),
            variances: DVector::from_element(d, T::one()),
            r: T::lit(cfg.r),
        })
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn variances(&self) -> &DVector<T> {
        &self.variances
    }
}

impl<T: Real> OnlineLearner<T> for Arow<T> {
    fn step(&mut self, ex: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError> {
        ex.features.check(self.spec.inputs())?;
        if ex.label > 1 {
            return Err(LearnerError::Unsupported("arow is binary only".into()));
        }
        let y = if ex.label == 1 { T::one() } else { -T::one() };
        let mut margin = T::zero();
        let mut confidence = T::zero();
        ex.features.for_each_nonzero(|j, v| {
            margin += self.mean[j] * v;
            confidence += self.variances[j] * v * v;
        });
        let predicted = usize::from(margin >= T::zero());
        let hinge = (T::one() - y * margin).max(T::zero());
        if y * margin < T::one() {
            let beta = T::one() / (confidence + self.r);
            let alpha = hinge * beta;
            let (mean, vars) = (&mut self.mean, &mut self.variances);
            ex.features.for_each_nonzero(|j, v| {
                let s = vars[j];
                mean[j] += alpha * y * s * v;
                vars[j] = s - beta * s * s * v * v;
            });
        }
        Ok(StepOutcome {
            predicted,
            correct: predicted == ex.truth(),
            loss: hinge,
            entropy: None,
            sample_norm: None,
        })
    }

    fn freeze(&mut self) -> WeightVector<T> {
        self.mean.clone()
    }

    fn model(&self) -> &ModelSpec {
        &self.spec
    }
}

/// Stochastic-gradient Langevin dynamics `w ← w − η∇ℓ + √(2η) ξ`.
pub struct Blang<T: Real> {
    spec: ModelSpec,
    w: DVector<T>,
    eta: T,
    iterations: usize,
    rng: ChaCha8Rng,
    grad: Vec<T>,
    ws: Workspace<T>,
}

impl<T: Real> Blang<T> {
    pub fn new(spec: ModelSpec, cfg: &LearnerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_init(&mut rng, spec.num_params(), T::lit(cfg.sigma_init));
        Self {
            grad: vec![T::zero(); spec.num_params()],
            ws: Workspace::new(&spec),
            spec,
            w,
            eta: T::lit(cfg.eta),
            iterations: cfg.iterations,
            rng,
        }
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.w
    }
}

impl<T: Real> OnlineLearner<T> for Blang<T> {
    fn step(&mut self, ex: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError> {
        ex.features.check(self.spec.inputs())?;
        let noise = (T::lit(2.0) * self.eta).sqrt();
        let mut first = None;
        for _ in 0..self.iterations {
            self.grad.iter_mut().for_each(|g| *g = T::zero());
            let r = self.spec.loss_and_gradient(
                self.w.as_slice(),
                &ex.features,
                ex.label,
                &HiddenMode::Plain,
                &mut self.ws,
                &mut self.grad,
            )?;
            for (w, &g) in self.w.iter_mut().zip(&self.grad) {
                *w += noise * standard_normal::<T, _>(&mut self.rng) - self.eta * g;
            }
            first.get_or_insert(r);
        }
        let (z, loss) = first.expect("at least one iteration");
        Ok(outcome(&z, loss, ex))
    }

    fn freeze(&mut self) -> WeightVector<T> {
        self.w.clone()
    }

    fn model(&self) -> &ModelSpec {
        &self.spec
    }
}

/// SGD with hidden-unit dropout; online predictions use the scaled network.
pub struct DropoutSgd<T: Real> {
    spec: ModelSpec,
    w: DVector<T>,
    eta: T,
    iterations: usize,
    p_drop: f64,
    rng: ChaCha8Rng,
    grad: Vec<T>,
    support: Vec<usize>,
    ws: Workspace<T>,
    mask: Vec<bool>,
}

impl<T: Real> DropoutSgd<T> {
    pub fn new(spec: ModelSpec, cfg: &LearnerConfig, seed: u64) -> Result<Self, LearnerError> {
        let Some(hidden) = spec.hidden() else {
            return Err(LearnerError::Unsupported("dropout needs an mlp model".into()));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian_init(&mut rng, spec.num_params(), T::lit(cfg.sigma_init));
        Ok(Self {
            grad: vec![T::zero(); spec.num_params()],
            ws: Workspace::new(&spec),
            spec,
            w,
            eta: T::lit(cfg.eta),
            iterations: cfg.iterations,
            p_drop: cfg.p_drop,
            rng,
            support: Vec::new(),
            mask: vec![true; hidden],
        })
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.w
    }

    /// Draws a fresh keep-mask; `true` means the unit is kept.
    pub fn draw_mask(&mut self) -> &[bool] {
        for m in self.mask.iter_mut() {
            *m = self.rng.random::<f64>() >= self.p_drop;
        }
        &self.mask
    }
}

impl<T: Real> OnlineLearner<T> for DropoutSgd<T> {
    fn step(&mut self, ex: &LabeledExample<T>) -> Result<StepOutcome<T>, LearnerError> {
        let keep = T::lit(1.0 - self.p_drop);
        let z = self
            .spec
            .forward_with(self.w.as_slice(), &ex.features, &HiddenMode::Scaled(keep), &mut self.ws)?;
        let loss = self.spec.loss(ex.label, &z);
        let out = outcome(&z, loss, ex);
        self.spec.support(&ex.features, &mut self.support);
        for _ in 0..self.iterations {
            self.draw_mask();
            let mode = HiddenMode::Masked(self.mask.clone());
            sgd_pass(
                &self.spec,
                &mut self.w,
                ex,
                self.eta,
                &mode,
                &mut self.ws,
                &mut self.grad,
                &self.support,
            )?;
        }
        Ok(out)
    }

    fn freeze(&mut self) -> WeightVector<T> {
        let mut w = self.w.clone();
        self.spec.scale_output_weights(w.as_mut_slice(), T::lit(1.0 - self.p_drop));
        w
    }

    fn model(&self) -> &ModelSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Features;
    use crate::belief::kl_divergence;

    fn ex(x: &[f64], y: usize) -> LabeledExample<f64> {
        LabeledExample::new(Features::Dense(x.to_vec()), y)
    }

    #[test]
    fn sgd_reference_step() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        let cfg = LearnerConfig::new(Algorithm::Sgd);
        let mut sgd = Sgd::with_weights(spec, DVector::zeros(2), &cfg);
        let out = sgd.step(&ex(&[1.0, 2.0], 1)).unwrap();
        assert_eq!(out.predicted, 1);
        assert!((sgd.weights() - DVector::from_vec(vec![0.0005, 0.001])).amax() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_keeps_weights_and_descends_otherwise() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        let mut cfg = LearnerConfig::new(Algorithm::Sgd);
        cfg.eta = 0.0;
        let mut sgd = Sgd::<f64>::new(spec, &cfg, 3);
        let before = sgd.weights().clone();
        sgd.step(&ex(&[0.3, -1.0], 0)).unwrap();
        assert_eq!(sgd.weights(), &before);

        cfg.eta = 0.05;
        let mut sgd = Sgd::<f64>::new(spec, &cfg, 3);
        let e = ex(&[0.3, -1.0], 0);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let out = sgd.step(&e).unwrap();
            assert!(out.loss <= last + 1e-15);
            last = out.loss;
        }
    }

    #[test]
    fn arow_reference_step() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        let mut arow = Arow::<f64>::new(spec, &LearnerConfig::new(Algorithm::Arow)).unwrap();
        arow.step(&ex(&[1.0, 0.0], 1)).unwrap();
        assert!((arow.mean()[0] - 1.0 / 11.0).abs() < 1e-15);
        assert_eq!(arow.mean()[1], 0.0);
        assert!((arow.variances()[0] - 10.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn arow_skips_confident_examples() {
        let spec = ModelSpec::Logistic { inputs: 1 };
        let mut arow = Arow::<f64>::new(spec, &LearnerConfig::new(Algorithm::Arow)).unwrap();
        arow.mean[0] = 2.0;
        arow.step(&ex(&[1.0], 1)).unwrap();
        assert_eq!(arow.mean()[0], 2.0);
        assert_eq!(arow.variances()[0], 1.0);
    }

    #[test]
    fn arow_rejects_mlp() {
        let spec = ModelSpec::Mlp { inputs: 2, hidden: 2, outputs: 1 };
        assert!(Arow::<f64>::new(spec, &LearnerConfig::new(Algorithm::Arow)).is_err());
    }

    #[test]
    fn bflo_zero_gradient_leaves_belief_unchanged() {
        // The label matches the clamped output exactly only in the limit, so use
        // a feature vector of zeros: the gradient vanishes identically.
        let spec = ModelSpec::Logistic { inputs: 2 };
        for variant in [Variant::Full, Variant::Diagonal, Variant::Spherical] {
            let mut b = Bflo::<f64>::new(spec, &LearnerConfig::bflo(variant), 1).unwrap();
            let prior = b.belief().unwrap().clone();
            b.step(&ex(&[0.0, 0.0], 1)).unwrap();
            assert_eq!(b.belief().unwrap(), &prior);
        }
    }

    #[test]
    fn bflo_counts_every_flow_update() {
        let spec = ModelSpec::Logistic { inputs: 3 };
        let mut cfg = LearnerConfig::bflo(Variant::Full);
        cfg.iterations = 5;
        let mut five = Bflo::<f64>::new(spec, &cfg, 9).unwrap();
        five.step(&ex(&[1.0, -0.5, 0.2], 0)).unwrap();
        assert_eq!(five.flow_updates(), 5);
        cfg.iterations = 1;
        let mut one = Bflo::<f64>::new(spec, &cfg, 9).unwrap();
        one.step(&ex(&[1.0, -0.5, 0.2], 0)).unwrap();
        assert_eq!(one.flow_updates(), 1);
    }

    #[test]
    fn bflo_one_dimensional_step_keeps_invariants() {
        let spec = ModelSpec::Logistic { inputs: 1 };
        let mut cfg = LearnerConfig::bflo(Variant::Full);
        cfg.eta = 0.5;
        cfg.sigma_init = 1.0;
        let mut b = Bflo::<f64>::new(spec, &cfg, 42).unwrap();
        let prior = b.belief().unwrap().clone();
        b.step(&ex(&[1.0], 1)).unwrap();
        let post = b.belief().unwrap();
        post.validate(1e-8).unwrap();
        assert!(kl_divergence(post, &prior).unwrap() > 0.0);
    }

    #[test]
    fn bflo_is_deterministic_per_seed() {
        let spec = ModelSpec::Mlp { inputs: 3, hidden: 4, outputs: 2 };
        let mut cfg = LearnerConfig::bflo(Variant::Diagonal);
        cfg.eta = 0.3;
        let run = |seed| {
            let mut b = Bflo::<f64>::new(spec, &cfg, seed).unwrap();
            for k in 0..20 {
                b.step(&ex(&[1.0, (k as f64).sin(), 0.0], k % 2)).unwrap();
            }
            b.belief().unwrap().clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn blang_noise_statistics() {
        let spec = ModelSpec::Logistic { inputs: 1 };
        let mut cfg = LearnerConfig::new(Algorithm::Blang);
        cfg.eta = 0.01;
        let mut b = Blang::<f64>::new(spec, &cfg, 11);
        let zero = ex(&[0.0], 1);
        let n = 10_000;
        let mut prev = b.weights()[0];
        let mut sum_sq = 0.0;
        for _ in 0..n {
            b.step(&zero).unwrap();
            let w = b.weights()[0];
            sum_sq += (w - prev).powi(2);
            prev = w;
        }
        let var = sum_sq / n as f64;
        assert!((var / (2.0 * cfg.eta) - 1.0).abs() < 0.05, "{var}");

        cfg.eta = 0.0;
        let mut b = Blang::<f64>::new(spec, &cfg, 11);
        let w0 = b.weights().clone();
        b.step(&ex(&[1.0], 1)).unwrap();
        assert_eq!(b.weights(), &w0);
    }

    #[test]
    fn dropout_edge_cases() {
        let spec = ModelSpec::Mlp { inputs: 3, hidden: 5, outputs: 2 };
        let mut cfg = LearnerConfig::new(Algorithm::Dropout);
        cfg.eta = 0.2;
        cfg.p_drop = 0.0;
        let mut d = DropoutSgd::<f64>::new(spec, &cfg, 4).unwrap();
        let mut s = Sgd::<f64>::new(spec, &cfg, 4);
        for k in 0..10 {
            let e = ex(&[0.5, -(k as f64), 1.0], k % 2);
            assert_eq!(d.step(&e).unwrap(), s.step(&e).unwrap());
        }
        assert_eq!(d.weights(), s.weights());

        cfg.p_drop = 1.0;
        let mut d = DropoutSgd::<f64>::new(spec, &cfg, 4).unwrap();
        let w = d.freeze();
        let l = spec.layout();
        assert!(w.rows_range(l.w2.clone()).iter().all(|&x| x == 0.0));
        let z = spec.forward(w.as_slice(), &Features::Dense(vec![9.0, -3.0, 1.0])).unwrap();
        for (o, zo) in z.iter().enumerate() {
            assert_eq!(*zo, w[l.b2.start + o].sigmoid());
        }

        cfg.p_drop = 0.5;
        let mut d = DropoutSgd::<f64>::new(spec, &cfg, 4).unwrap();
        let raw = d.weights().clone();
        let frozen = d.freeze();
        assert_eq!(frozen.rows_range(l.w1.start..l.b1.end), raw.rows_range(l.w1.start..l.b1.end));
        assert_eq!(frozen.rows_range(l.w2.clone()), raw.rows_range(l.w2.clone()) * 0.5);
        let mut big = DropoutSgd::<f64>::new(ModelSpec::Mlp { inputs: 1, hidden: 100, outputs: 1 }, &cfg, 8).unwrap();
        let dropped: usize = (0..100).map(|_| big.draw_mask().iter().filter(|&&k| !k).count()).sum();
        assert!((dropped as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn dropout_rejects_logistic() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        assert!(DropoutSgd::<f64>::new(spec, &LearnerConfig::new(Algorithm::Dropout), 0).is_err());
    }

    #[test]
    fn bflo_freezes_to_mean() {
        let spec = ModelSpec::Logistic { inputs: 2 };
        let mean = DVector::from_vec(vec![0.3, -0.7]);
        let belief = BeliefState::diagonal(mean.clone(), DVector::from_vec(vec![4.0, 0.1])).unwrap();
        let mut b = Bflo::with_belief(spec, belief, &LearnerConfig::bflo(Variant::Diagonal), 0);
        assert_eq!(b.freeze(), mean);
    }

    #[test]
    fn sparse_diagonal_step_matches_the_dense_flow() {
        let spec = ModelSpec::Logistic { inputs: 3 };
        let mean = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let variances = DVector::from_vec(vec![0.04, 0.09, 0.25]);
        let prior = BeliefState::diagonal(mean.clone(), variances.clone()).unwrap();
        let mut cfg = LearnerConfig::bflo(Variant::Diagonal);
        cfg.eta = 0.7;
        let mut b = Bflo::with_belief(spec, prior.clone(), &cfg, 9);
        let e = ex(&[1.0, -2.0, 0.5], 1);
        b.step(&e).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = DVector::from_fn(3, |i, _| mean[i] + variances[i].sqrt() * standard_normal::<f64, _>(&mut rng));
        let g = spec.gradient(w.as_slice(), &e.features, 1).unwrap();
        let (dense, _) = flow::update(&prior, &w, &(&w - g * 0.7), &FlowConfig::default()).unwrap();
        assert!((b.belief().unwrap().mean() - dense.mean()).amax() < 1e-14);
        assert!((b.belief().unwrap().spectrum() - dense.spectrum()).amax() < 1e-14);
    }
}
