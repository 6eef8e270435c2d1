//! Predictive families: the restricted model classes whose best-in-class
//! negative log-likelihood defines every entropy in this crate.
//!
//! Two families are provided. `V1` is Gaussian regression with a fixed
//! standard deviation `sigma`: the model predicts a mean and the per-sample
//! loss is the exact negative log density
//! `(mean - y)^2 / (2 sigma^2) + ln sigma + 0.5 ln 2pi`. `V2` is softmax
//! classification: the model predicts logits and the loss is cross-entropy.
//! Both losses are in nats, and everything downstream (entropies,
//! heterogeneity scores, optimizer objectives) inherits that unit.
//!
//! The mean function is either linear (optional intercept) or a
//! one-hidden-layer tanh MLP, so all derivatives used by the outer optimizer
//! exist.
//!
//! Weighted fitting solves `argmin_theta sum_i w_i loss_i(theta)` plus a
//! small ridge scaled by the total weight. `ClosedForm` (V1 + linear only)
//! solves the weighted normal equations exactly; `GradientDescent` runs
//! exactly `t` full-gradient steps on the *unnormalized* weighted sum and
//! returns wherever it lands. The truncation is intentional: those `t`-step
//! iterates are what the outer hypergradient differentiates through, and the
//! step size `alpha` therefore scales inversely with the total weight.

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

// ---------------------------------------------------------------------------
// Specs and parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    V1 { sigma: f64 },
    V2 { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mean_fn", rename_all = "snake_case")]
pub enum MeanFn {
    Linear { intercept: bool },
    Mlp { hidden: usize },
}

/// A predictive family together with the input dimension it acts on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    pub mean_fn: MeanFn,
    pub d: usize,
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, mean_fn: MeanFn, d: usize) -> Result<Self> {
        let spec = FamilySpec { kind, mean_fn, d };
        spec.validate()?;
        Ok(spec)
    }

    /// Gaussian regression, sigma = 1, linear mean with intercept.
    pub fn v1_linear(d: usize) -> Self {
        FamilySpec {
            kind: FamilyKind::V1 { sigma: 1.0 },
            mean_fn: MeanFn::Linear { intercept: true },
            d,
        }
    }

    /// Same but without intercept, the form the analytical oracles assume.
    pub fn v1_linear_no_intercept(d: usize) -> Self {
        FamilySpec {
            kind: FamilyKind::V1 { sigma: 1.0 },
            mean_fn: MeanFn::Linear { intercept: false },
            d,
        }
    }

    /// Softmax classification over `classes` labels, linear logits.
    pub fn v2_linear(d: usize, classes: usize) -> Self {
        FamilySpec {
            kind: FamilyKind::V2 { classes },
            mean_fn: MeanFn::Linear { intercept: true },
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FamilyKind::V1 { sigma } => {
                if !(sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::InvalidConfig(format!("sigma = {sigma} must be positive")));
                }
            }
            FamilyKind::V2 { classes } => {
                if classes < 2 {
                    return Err(Error::InvalidConfig("V2 needs at least 2 classes".into()));
                }
            }
        }
        match self.mean_fn {
            MeanFn::Linear { .. } => {}
            MeanFn::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidConfig("MLP needs at least one hidden unit".into()));
                }
            }
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        Ok(())
    }

    /// Number of outputs of the mean function: 1 for V1, `classes` logits for V2.
    pub fn outputs(&self) -> usize {
        match self.kind {
            FamilyKind::V1 { .. } => 1,
            FamilyKind::V2 { classes } => classes,
        }
    }

    pub fn param_len(&self) -> usize {
        let c = self.outputs();
        match self.mean_fn {
            MeanFn::Linear { intercept } => c * (self.d + usize::from(intercept)),
            MeanFn::Mlp { hidden } => hidden * self.d + hidden + c * hidden + c,
        }
    }

    /// Is the task classification, and if so with how many classes.
    pub fn n_classes(&self) -> Option<usize> {
        match self.kind {
            FamilyKind::V1 { .. } => None,
            FamilyKind::V2 { classes } => Some(classes),
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self.kind {
            FamilyKind::V1 { sigma } => Some(sigma),
            FamilyKind::V2 { .. } => None,
        }
    }

    /// The additive constant of the V1 log density, `ln sigma + 0.5 ln 2pi`.
    /// Zero for V2. Subtracting it from any entropy gives the
    /// "constant-free" value reports also carry.
    pub fn entropy_constant(&self) -> f64 {
        match self.kind {
            FamilyKind::V1 { sigma } => sigma.ln() + HALF_LN_2PI,
            FamilyKind::V2 { .. } => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: FamilySpec,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(spec: FamilySpec, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != spec.param_len() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries, architecture needs {}",
                theta.len(),
                spec.param_len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters contain NaN or infinity".into()));
        }
        Ok(ModelParams { spec, theta })
    }

    pub fn zeros(spec: FamilySpec) -> Self {
        ModelParams { theta: vec![0.0; spec.param_len()], spec }
    }

    /// Small random init: linear weights N(0, 0.1); MLP layers scaled by
    /// 1/sqrt(fan-in) with zero biases. Zeros would pin an MLP in a
    /// symmetric saddle, so seeded init is the right choice there.
    pub fn seeded(spec: FamilySpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |sd: f64| sd * gauss.sample(&mut rng);
        let theta = match spec.mean_fn {
            MeanFn::Linear { .. } => (0..spec.param_len()).map(|_| draw(0.1)).collect(),
            MeanFn::Mlp { hidden } => {
                let c = spec.outputs();
                let mut t = Vec::with_capacity(spec.param_len());
                let s1 = 1.0 / (spec.d as f64).sqrt();
                t.extend((0..hidden * spec.d).map(|_| draw(s1)));
                t.extend(std::iter::repeat_n(0.0, hidden));
                let s2 = 1.0 / (hidden as f64).sqrt();
                t.extend((0..c * hidden).map(|_| draw(s2)));
                t.extend(std::iter::repeat_n(0.0, c));
                t
            }
        };
        ModelParams { spec, theta }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FitMethod {
    /// Exact weighted ridge least squares. V1 + linear only.
    ClosedForm,
    /// Exactly `steps` full-gradient steps of size `alpha` on the
    /// unnormalized weighted loss, from the declared init.
    GradientDescent { alpha: f64, steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "snake_case")]
pub enum ParamInit {
    Zeros,
    Seeded { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: FitMethod,
    /// Ridge strength on the normalized objective; applied to every
    /// coefficient (intercepts included) purely as a numerical guard.
    pub ridge: f64,
    pub init: ParamInit,
}

impl FitOptions {
    pub fn closed_form() -> Self {
        FitOptions { method: FitMethod::ClosedForm, ridge: 1e-8, init: ParamInit::Zeros }
    }

    pub fn gradient_descent(alpha: f64, steps: usize) -> Self {
        FitOptions { method: FitMethod::GradientDescent { alpha, steps }, ridge: 1e-8, init: ParamInit::Zeros }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn with_init(mut self, init: ParamInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig("ridge must be finite and nonnegative".into()));
        }
        if let FitMethod::GradientDescent { alpha, steps } = self.method {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::InvalidConfig("alpha must be positive".into()));
            }
            if steps == 0 {
                return Err(Error::InvalidConfig("gradient descent needs at least one step".into()));
            }
        }
        Ok(())
    }

    pub fn init_params(&self, spec: FamilySpec) -> ModelParams {
        match self.init {
            ParamInit::Zeros => ModelParams::zeros(spec),
            ParamInit::Seeded { seed } => ModelParams::seeded(spec, seed),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass, loss, gradients
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Predicted mean of the Gaussian (V1).
    Mean(f64),
    /// Class probabilities on the simplex (V2).
    Probs(Vec<f64>),
}

/// Scratch space for forward/backward passes, reusable across samples so the
/// hot fitting loops stay allocation-free.
#[derive(Clone, Debug, Default)]
pub(crate) struct Workspace {
    hidden: Vec<f64>,
    outputs: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
}

fn check_sample(spec: &FamilySpec, x: ArrayView1<f64>, y: f64) -> Result<()> {
    if x.len() != spec.d {
        return Err(Error::DimensionMismatch(format!(
            "feature row has {} entries, spec expects {}",
            x.len(),
            spec.d
        )));
    }
    if let FamilyKind::V2 { classes } = spec.kind {
        if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
            return Err(Error::InvalidConfig(format!("target {y} is not a class in 0..{classes}")));
        }
    }
    Ok(())
}

/// Mean-function outputs (a scalar mean for V1, logits for V2), written into
/// `ws.outputs`; the MLP hidden activations land in `ws.hidden`.
fn forward(spec: &FamilySpec, theta: &[f64], x: ArrayView1<f64>, ws: &mut Workspace) {
    let c = spec.outputs();
    let d = spec.d;
    ws.outputs.resize(c, 0.0);
    match spec.mean_fn {
        MeanFn::Linear { intercept } => {
            let stride = d + usize::from(intercept);
            for k in 0..c {
                let block = &theta[k * stride..(k + 1) * stride];
                let mut z = if intercept { block[d] } else { 0.0 };
                for (j, &xv) in x.iter().enumerate() {
                    z += block[j] * xv;
                }
                ws.outputs[k] = z;
            }
        }
        MeanFn::Mlp { hidden } => {
            ws.hidden.resize(hidden, 0.0);
            let (w1, rest) = theta.split_at(hidden * d);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(c * hidden);
            for h in 0..hidden {
                let row = &w1[h * d..(h + 1) * d];
                let mut z = b1[h];
                for (j, &xv) in x.iter().enumerate() {
                    z += row[j] * xv;
                }
                ws.hidden[h] = z.tanh();
            }
            for k in 0..c {
                let row = &w2[k * hidden..(k + 1) * hidden];
                ws.outputs[k] = b2[k] + linalg::dot(row, &ws.hidden);
            }
        }
    }
}

/// Loss in nats given forward outputs; for V2 also fills `ws.probs`.
fn loss_from_outputs(spec: &FamilySpec, y: f64, ws: &mut Workspace) -> f64 {
    match spec.kind {
        FamilyKind::V1 { sigma } => {
            let r = ws.outputs[0] - y;
            r * r / (2.0 * sigma * sigma) + sigma.ln() + HALF_LN_2PI
        }
        FamilyKind::V2 { classes } => {
            let lse = linalg::log_sum_exp(&ws.outputs);
            ws.probs.resize(classes, 0.0);
            for k in 0..classes {
                ws.probs[k] = (ws.outputs[k] - lse).exp();
            }
            lse - ws.outputs[y as usize]
        }
    }
}

pub(crate) fn loss_ws(
    spec: &FamilySpec,
    theta: &[f64],
    x: ArrayView1<f64>,
    y: f64,
    ws: &mut Workspace,
) -> Result<f64> {
    check_sample(spec, x, y)?;
    forward(spec, theta, x, ws);
    let l = loss_from_outputs(spec, y, ws);
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("loss is {l}")));
    }
    Ok(l)
}

/// Negative log density of target `y` under the model at `x`, in nats.
pub fn loss(params: &ModelParams, x: ArrayView1<f64>, y: f64) -> Result<f64> {
    loss_ws(&params.spec, &params.theta, x, y, &mut Workspace::default())
}

/// Accumulate `scale * d loss / d theta` into `out` (length `param_len`).
/// Returns the loss so callers get both for one forward pass.
pub(crate) fn grad_ws(
    spec: &FamilySpec,
    theta: &[f64],
    x: ArrayView1<f64>,
    y: f64,
    scale: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<f64> {
    check_sample(spec, x, y)?;
    forward(spec, theta, x, ws);
    let l = loss_from_outputs(spec, y, ws);
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("loss is {l}")));
    }

    // d loss / d output_k.
    let c = spec.outputs();
    ws.delta.resize(c, 0.0);
    match spec.kind {
        FamilyKind::V1 { sigma } => {
            ws.delta[0] = (ws.outputs[0] - y) / (sigma * sigma);
        }
        FamilyKind::V2 { .. } => {
            for k in 0..c {
                ws.delta[k] = ws.probs[k] - f64::from(k == y as usize);
            }
        }
    }

    let d = spec.d;
    match spec.mean_fn {
        MeanFn::Linear { intercept } => {
            let stride = d + usize::from(intercept);
            for k in 0..c {
                let g = scale * ws.delta[k];
                let block = &mut out[k * stride..(k + 1) * stride];
                for (j, &xv) in x.iter().enumerate() {
                    block[j] += g * xv;
                }
                if intercept {
                    block[d] += g;
                }
            }
        }
        MeanFn::Mlp { hidden } => {
            let (w1_len, b1_len, w2_len) = (hidden * d, hidden, c * hidden);
            let w2_start = w1_len + b1_len;
            let b2_start = w2_start + w2_len;
            for k in 0..c {
                let g = scale * ws.delta[k];
                out[b2_start + k] += g;
                for h in 0..hidden {
                    out[w2_start + k * hidden + h] += g * ws.hidden[h];
                }
            }
            for h in 0..hidden {
                let mut back = 0.0;
                for k in 0..c {
                    back += ws.delta[k] * theta[w2_start + k * hidden + h];
                }
                let g = scale * back * (1.0 - ws.hidden[h] * ws.hidden[h]);
                out[w1_len + h] += g;
                let row = &mut out[h * d..(h + 1) * d];
                for (j, &xv) in x.iter().enumerate() {
                    row[j] += g * xv;
                }
            }
        }
    }
    Ok(l)
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn grad_params(params: &ModelParams, x: ArrayView1<f64>, y: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.theta.len()];
    grad_ws(&params.spec, &params.theta, x, y, 1.0, &mut out, &mut Workspace::default())?;
    Ok(out)
}

/// Distribution summary at `x`: the Gaussian mean for V1, the softmax
/// probability vector for V2.
pub fn predict(params: &ModelParams, x: ArrayView1<f64>) -> Result<Prediction> {
    if x.len() != params.spec.d {
        return Err(Error::DimensionMismatch(format!(
            "feature row has {} entries, spec expects {}",
            x.len(),
            params.spec.d
        )));
    }
    let mut ws = Workspace::default();
    forward(&params.spec, &params.theta, x, &mut ws);
    match params.spec.kind {
        FamilyKind::V1 { .. } => Ok(Prediction::Mean(ws.outputs[0])),
        FamilyKind::V2 { classes } => {
            let lse = linalg::log_sum_exp(&ws.outputs);
            let probs: Vec<f64> = (0..classes).map(|k| (ws.outputs[k] - lse).exp()).collect();
            Ok(Prediction::Probs(probs))
        }
    }
}

// ---------------------------------------------------------------------------
// Weighted fitting
// ---------------------------------------------------------------------------

fn check_weights(data: &Dataset, weights: &[f64]) -> Result<f64> {
    if weights.len() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} rows",
            weights.len(),
            data.n()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidConfig("total weight must be positive".into()));
    }
    Ok(total)
}

/// Exact solution of the weighted ridge normal equations, on weights
/// normalized to sum 1 so the result is invariant to weight rescaling.
fn fit_closed_form(spec: &FamilySpec, data: &Dataset, weights: &[f64], ridge: f64) -> Result<ModelParams> {
    let (FamilyKind::V1 { sigma }, MeanFn::Linear { intercept }) = (spec.kind, spec.mean_fn) else {
        return Err(Error::Unsupported("closed-form fit exists only for V1 with a linear mean".into()));
    };
    let total: f64 = weights.iter().sum();
    let p = spec.d + usize::from(intercept);
    let inv_var = 1.0 / (sigma * sigma);
    let mut a = ndarray::Array2::<f64>::zeros((p, p));
    let mut b = ndarray::Array1::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..data.n() {
        let w = weights[i] / total;
        if w == 0.0 {
            continue;
        }
        for (j, &xv) in data.features().row(i).iter().enumerate() {
            row[j] = xv;
        }
        if intercept {
            row[spec.d] = 1.0;
        }
        let y = data.targets()[i];
        for j in 0..p {
            let wj = w * row[j] * inv_var;
            for k in j..p {
                a[[j, k]] += wj * row[k];
            }
            b[j] += wj * y;
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[[j, k]] = a[[k, j]];
        }
        a[[j, j]] += ridge;
    }
    let theta = linalg::solve_spd(a, &b)?;
    ModelParams::new(*spec, theta.to_vec())
}

/// Full gradient of the unnormalized weighted objective
/// `sum_i w_i loss_i + (ridge * total_weight / 2) |theta|^2` into `out`.
pub(crate) fn weighted_grad(
    spec: &FamilySpec,
    theta: &[f64],
    data: &Dataset,
    weights: &[f64],
    ridge: f64,
    total: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<()> {
    out.fill(0.0);
    for i in 0..data.n() {
        if weights[i] == 0.0 {
            continue;
        }
        grad_ws(spec, theta, data.features().row(i), data.targets()[i], weights[i], out, ws)?;
    }
    if ridge > 0.0 {
        for (o, t) in out.iter_mut().zip(theta) {
            *o += ridge * total * t;
        }
    }
    Ok(())
}

/// The last two iterates of a truncated inner fit: `params` is the returned
/// `theta^t`, `prev` the iterate one step earlier. The outer hypergradient
/// needs both.
#[derive(Clone, Debug)]
pub struct TruncatedFit {
    pub params: ModelParams,
    pub prev: ModelParams,
}

pub(crate) fn gd_steps(
    spec: &FamilySpec,
    data: &Dataset,
    weights: &[f64],
    mut theta: Vec<f64>,
    alpha: f64,
    steps: usize,
    ridge: f64,
    total: f64,
) -> Result<TruncatedFit> {
    let mut grad = vec![0.0; theta.len()];
    let mut ws = Workspace::default();
    let mut prev = theta.clone();
    for step in 0..steps {
        weighted_grad(spec, &theta, data, weights, ridge, total, &mut grad, &mut ws)?;
        prev.copy_from_slice(&theta);
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= alpha * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "parameters became non-finite at inner step {step}; reduce alpha"
            )));
        }
    }
    Ok(TruncatedFit { params: ModelParams::new(*spec, theta)?, prev: ModelParams::new(*spec, prev)? })
}

/// Fit the weighted inner problem. See the module docs for the exact
/// objective each method solves.
pub fn fit_weighted(
    spec: &FamilySpec,
    data: &Dataset,
    weights: &[f64],
    opts: &FitOptions,
) -> Result<ModelParams> {
    spec.validate()?;
    opts.validate()?;
    if data.d() != spec.d {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} features, spec expects {}",
            data.d(),
            spec.d
        )));
    }
    let total = check_weights(data, weights)?;
    match opts.method {
        FitMethod::ClosedForm => fit_closed_form(spec, data, weights, opts.ridge),
        FitMethod::GradientDescent { alpha, steps } => {
            let init = opts.init_params(*spec);
            Ok(gd_steps(spec, data, weights, init.theta, alpha, steps, opts.ridge, total)?.params)
        }
    }
}

/// Like [`fit_weighted`] with gradient descent, but also return the
/// second-to-last iterate for hypergradient use.
pub fn fit_weighted_truncated(
    spec: &FamilySpec,
    data: &Dataset,
    weights: &[f64],
    opts: &FitOptions,
) -> Result<TruncatedFit> {
    spec.validate()?;
    opts.validate()?;
    let FitMethod::GradientDescent { alpha, steps } = opts.method else {
        return Err(Error::Unsupported(
            "truncated fits require gradient descent; closed form has no step sequence".into(),
        ));
    };
    let total = check_weights(data, weights)?;
    let init = opts.init_params(*spec);
    gd_steps(spec, data, weights, init.theta, alpha, steps, opts.ridge, total)
}

// ---------------------------------------------------------------------------
