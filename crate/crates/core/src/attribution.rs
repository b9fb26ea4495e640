//! Attribution methods: Grad*Input, Integrated Gradients, Sequential
//! Integrated Gradients, GradientShap, and a simplified greedy discretized IG.
//!
//! Every method returns an [`AttributionResult`] with the raw `m × n`
//! per-feature attribution, the normalized per-word scores, the global
//! completeness gap `delta` and the number of gradient evaluations spent.
//!
//! Sequential Integrated Gradients attributes word `i` by integrating along
//! the straight line from `x̄ⁱ` to `x`, where `x̄ⁱ` equals `x` except that
//! row `i` holds the baseline embedding. Only row `i` moves, so the
//! other words keep their meaning for the whole path, and
//! `Σ_j SIG_ij = F(x) − F(x̄ⁱ)` holds word by word.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Differentiable;
use crate::path::{
    full_baseline, greedy_discretized_path, integrate_path, sequential_baseline, straight_line_path,
    batched_gradient_eval, BaselineKind, BaselineSpec, CallCounter, Path, QuadratureRule, DEFAULT_BATCH,
    DEFAULT_STEPS,
};
use crate::tensor::{sample_gaussian, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GradInput,
    IntegratedGradients,
    SequentialIntegratedGradients,
    GradientShap,
    DiscretizedGreedy,
    /// Gaussian noise in place of an attribution; a control for the metrics.
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GradInput,
        Method::IntegratedGradients,
        Method::SequentialIntegratedGradients,
        Method::GradientShap,
        Method::DiscretizedGreedy,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GradInput => "grad-input",
            Method::IntegratedGradients => "ig",
            Method::SequentialIntegratedGradients => "sig",
            Method::GradientShap => "gradient-shap",
            Method::DiscretizedGreedy => "dig-greedy-simplified",
            Method::Random => "random",
        }
    }

    /// Default number of interpolation steps: 30 for the discretized
    /// variant, 50 otherwise.
    pub fn default_steps(self) -> usize {
        match self {
            Method::DiscretizedGreedy => crate::path::DEFAULT_DISCRETIZED_STEPS,
            _ => DEFAULT_STEPS,
        }
    }

    pub fn valid_names() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::input(format!("unknown method {s:?}; valid methods: {}", Method::valid_names())))
    }
}

/// Discretization of a path integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Integration {
    pub steps: usize,
    pub rule: QuadratureRule,
    /// Gradient evaluations per parallel batch; never changes results.
    pub batch: usize,
}

impl Integration {
    pub fn new(steps: usize, rule: QuadratureRule) -> Self {
        Integration {
            steps,
            rule,
            batch: DEFAULT_BATCH,
        }
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Integration { batch, ..self }
    }
}

impl Default for Integration {
    fn default() -> Self {
        Integration::new(DEFAULT_STEPS, QuadratureRule::Trapezoid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub method: Method,
    pub baseline: BaselineKind,
    /// Interpolation steps or Monte-Carlo samples; 1 for single-gradient methods.
    pub steps: usize,
    pub rule: Option<QuadratureRule>,
    /// Raw `m × n` attribution.
    pub per_feature: Matrix,
    /// Row sums of `per_feature`, scaled to unit Euclidean norm.
    pub per_word: Vec<f64>,
    /// `Σ_ij per_feature − (F(x) − F(x̄))` against the all-baseline input.
    pub delta: f64,
    /// `Σ_j per_feature_ij − (F(x) − F(x̄ⁱ))`; Sequential IG only.
    pub per_word_completeness: Option<Vec<f64>>,
    pub gradient_calls: u64,
}

impl AttributionResult {
    /// Unnormalized per-word sums `Σ_j per_feature_ij`.
    pub fn word_sums(&self) -> Vec<f64> {
        self.per_feature.row_sums()
    }

    pub fn max_word_residual(&self) -> Option<f64> {
        self.per_word_completeness
            .as_ref()
            .map(|r| r.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
    }
}

/// `s_i = Σ_j per_feature_ij`, divided by `‖s‖₂` unless that norm is below
/// `1e-12`, in which case `s` is returned as is.
pub fn normalize_word_attributions(per_feature: &Matrix) -> Vec<f64> {
    let sums = per_feature.row_sums();
    let norm = sums.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        sums.into_iter().map(|v| v / norm).collect()
    } else {
        sums
    }
}

/// Global completeness gap `Σ_ij per_feature − (F(x) − F(x̄))`.
pub fn delta<M: Differentiable + ?Sized>(
    per_feature: &Matrix,
    model: &M,
    x: &Matrix,
    full_baseline: &Matrix,
) -> Result<f64> {
    if per_feature.shape() != x.shape() || full_baseline.shape() != x.shape() {
        return Err(Error::input("delta: attribution, input and baseline shapes differ"));
    }
    Ok(per_feature.sum() - (model.value(x)? - model.value(full_baseline)?))
}

fn finish<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    method: Method,
    steps: usize,
    rule: Option<QuadratureRule>,
    per_feature: Matrix,
    counter: &CallCounter,
) -> Result<AttributionResult> {
    per_feature.ensure_finite(method.name())?;
    let x_bar = full_baseline(x, baseline, model)?;
    let delta = delta(&per_feature, model, x, &x_bar)?;
    if !delta.is_finite() {
        return Err(Error::numeric(format!("{method}: delta is {delta}")));
    }
    Ok(AttributionResult {
        method,
        baseline: baseline.kind(),
        steps,
        rule,
        per_word: normalize_word_attributions(&per_feature),
        per_feature,
        delta,
        per_word_completeness: None,
        gradient_calls: counter.gradient_calls(),
    })
}

fn check_input(x: &Matrix) -> Result<()> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::input("attribution input must have at least one word and one feature"));
    }
    x.ensure_finite("attribution input")
}

/// `x ⊙ ∇F(x)`. Delta is measured against the model's preferred baseline
/// (`<mask>`, else `<pad>`, else zeros).
pub fn grad_times_input<M: Differentiable + ?Sized>(model: &M, x: &Matrix) -> Result<AttributionResult> {
    check_input(x)?;
    let counter = CallCounter::new();
    let grad = batched_gradient_eval(model, std::slice::from_ref(x), 1, &counter)?.remove(0);
    let baseline = BaselineSpec::preferred(model);
    finish(model, x, &baseline, Method::GradInput, 1, None, x.hadamard(&grad), &counter)
}

/// Integrated Gradients along the straight line from the all-baseline input
/// `x̄` to `x`, every word moving at once.
pub fn integrated_gradients<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    integration: Integration,
) -> Result<AttributionResult> {
    check_input(x)?;
    let x_bar = full_baseline(x, baseline, model)?;
    let path = straight_line_path(&x_bar, x, integration.steps, integration.rule)?;
    let counter = CallCounter::new();
    let per_feature = integrate_path(model, &path, &counter, integration.batch)?;
    finish(
        model,
        x,
        baseline,
        Method::IntegratedGradients,
        integration.steps,
        Some(integration.rule),
        per_feature,
        &counter,
    )
}

/// Sequential Integrated Gradients: one straight-line integral per word,
/// from `x̄ⁱ` (only row `i` replaced by its baseline) to `x`.
///
/// Row `i` of the result is word `i`'s own integral. A word already equal to
/// its baseline gets an exact zero row and costs no gradient calls.
pub fn sequential_integrated_gradients<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    integration: Integration,
) -> Result<AttributionResult> {
    check_input(x)?;
    let (m, n) = x.shape();
    let counter = CallCounter::new();
    let f_x = model.value(x)?;
    let mut per_feature = Matrix::zeros(m, n);
    let mut residuals = Vec::with_capacity(m);
    for i in 0..m {
        let x_bar_i = sequential_baseline(x, i, baseline, model)?;
        let path = straight_line_path(&x_bar_i, x, integration.steps, integration.rule)?;
        let integral = integrate_path(model, &path, &counter, integration.batch)?;
        per_feature.set_row(i, integral.row(i));
        let word_total: f64 = integral.row(i).iter().sum();
        residuals.push(word_total - (f_x - model.value(&x_bar_i)?));
    }
    let mut result = finish(
        model,
        x,
        baseline,
        Method::SequentialIntegratedGradients,
        integration.steps,
        Some(integration.rule),
        per_feature,
        &counter,
    )?;
    result.per_word_completeness = Some(residuals);
    Ok(result)
}

pub const DEFAULT_SHAP_SAMPLES: usize = 50;

/// Default GradientShap noise: a tenth of the embedding-table spread.
pub fn default_noise_std<M: Differentiable + ?Sized>(model: &M) -> f64 {
    model.candidate_embeddings().map_or(0.0, |e| 0.1 * e.std())
}

/// GradientShap: the mean over `samples` draws of
/// `(x − x̃) ⊙ ∇F(x̃ + α (x − x̃))`, with `x̃ = x̄ + N(0, noise_std²)` and
/// `α ~ U(0, 1)`.
pub fn gradient_shap<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    samples: usize,
    noise_std: f64,
    rng: &mut Rng,
    batch: usize,
) -> Result<AttributionResult> {
    check_input(x)?;
    if samples == 0 {
        return Err(Error::input("gradient-shap needs at least one sample"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::input(format!("noise std must be non-negative, got {noise_std}")));
    }
    let (m, n) = x.shape();
    let x_bar = full_baseline(x, baseline, model)?;
    let mut offsets = Vec::with_capacity(samples);
    let mut points = Vec::with_capacity(samples);
    for _ in 0..samples {
        let noisy = x_bar.add(&sample_gaussian(rng, m, n, 0.0, noise_std));
        let alpha = rng.uniform();
        let offset = x.sub(&noisy);
        let mut point = noisy;
        point.axpy(alpha, &offset);
        offsets.push(offset);
        points.push(point);
    }
    let counter = CallCounter::new();
    let grads = batched_gradient_eval(model, &points, batch, &counter)?;
    let mut acc = Matrix::zeros(m, n);
    for (g, off) in grads.iter().zip(&offsets) {
        acc.axpy(1.0, &g.hadamard(off));
    }
    let per_feature = acc.scale(1.0 / samples as f64);
    finish(model, x, baseline, Method::GradientShap, samples, None, per_feature, &counter)
}

/// Simplified discretized IG: each word moves from its baseline row to its
/// own embedding along a greedy nearest-neighbour path through the
/// vocabulary, all words simultaneously, and the gradient is integrated as a
/// Riemann–Stieltjes sum over the resulting (generally non-monotone) path.
pub fn discretized_integrated_gradients<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    integration: Integration,
) -> Result<AttributionResult> {
    check_input(x)?;
    let candidates = model
        .candidate_embeddings()
        .ok_or_else(|| Error::input("discretized paths need an embedding table to snap to"))?;
    let x_bar = full_baseline(x, baseline, model)?;
    let word_paths = (0..x.rows())
        .map(|r| greedy_discretized_path(x_bar.row(r), x.row(r), candidates, integration.steps, integration.rule))
        .collect::<Result<Vec<_>>>()?;
    let points = (0..=integration.steps)
        .map(|k| {
            let rows: Vec<&[f64]> = word_paths.iter().map(|p| p.path.points()[k].row(0)).collect();
            Matrix::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = Path::uniform(points, integration.rule)?;
    let counter = CallCounter::new();
    let per_feature = integrate_path(model, &path, &counter, integration.batch)?;
    finish(
        model,
        x,
        baseline,
        Method::DiscretizedGreedy,
        integration.steps,
        Some(integration.rule),
        per_feature,
        &counter,
    )
}

/// Standard-normal per-feature scores. Gives the metrics a chance-level
/// reference point.
pub fn random_attribution<M: Differentiable + ?Sized>(
    model: &M,
    x: &Matrix,
    baseline: &BaselineSpec,
    rng: &mut Rng,
) -> Result<AttributionResult> {
    check_input(x)?;
    let per_feature = sample_gaussian(rng, x.rows(), x.cols(), 0.0, 1.0);
    finish(model, x, baseline, Method::Random, 1, None, per_feature, &CallCounter::new())
}

/// Everything needed to run one method on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub baseline: BaselineSpec,
    pub integration: Integration,
    /// GradientShap sample count.
    pub samples: usize,
    /// GradientShap noise; `None` selects [`default_noise_std`].
    pub noise_std: Option<f64>,
    /// Seed for the stochastic methods. Each input gets its own stream.
    pub seed: u64,
}

impl MethodConfig {
    /// Method defaults: mask baseline, trapezoid rule, the method's default
    /// step count, 50 GradientShap samples.
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            baseline: BaselineSpec::MaskToken,
            integration: Integration::new(method.default_steps(), QuadratureRule::Trapezoid),
            samples: DEFAULT_SHAP_SAMPLES,
            noise_std: None,
            seed: 0,
        }
    }

    pub fn with_baseline(mut self, baseline: BaselineSpec) -> Self {
        self.baseline = baseline;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.integration.steps = steps;
        self
    }

    pub fn with_rule(mut self, rule: QuadratureRule) -> Self {
        self.integration.rule = rule;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.integration.batch = batch;
        self
    }

    /// Runs the configured method. `stream` selects the random stream for
    /// stochastic methods (the sentence id, in corpus runs).
    pub fn run<M: Differentiable + ?Sized>(&self, model: &M, x: &Matrix, stream: u64) -> Result<AttributionResult> {
        let mut rng = Rng::derive(self.seed, stream);
        match self.method {
            Method::GradInput => grad_times_input(model, x),
            Method::IntegratedGradients => integrated_gradients(model, x, &self.baseline, self.integration),
            Method::SequentialIntegratedGradients => {
                sequential_integrated_gradients(model, x, &self.baseline, self.integration)
            }
            Method::GradientShap => {
                let std = self.noise_std.unwrap_or_else(|| default_noise_std(model));
                gradient_shap(model, x, &self.baseline, self.samples, std, &mut rng, self.integration.batch)
            }
            Method::DiscretizedGreedy => discretized_integrated_gradients(model, x, &self.baseline, self.integration),
            Method::Random => random_attribution(model, x, &self.baseline, &mut rng),
        }
    }
}
