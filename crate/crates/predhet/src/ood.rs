//! Environment-aware downstream training: once sub-populations are known
//! (discovered, clustered, or ground truth), train predictors that use them
//! and compare against plain pooled risk minimization.
//!
//! Trainers are linear-model only. The two penalized trainers implement
//! documented surrogates:
//!
//! * invariance penalty: per environment, the squared derivative of the
//!   environment risk with respect to a scalar multiplier on the model
//!   output, evaluated at multiplier 1;
//! * gradient alignment penalty: the trace variance of per-environment
//!   risk gradients, `(1/E) sum_e |g_e - mean g|^2`.
//!
//! Both reduce to pooled risk minimization at `lambda = 0`. Internally the
//! penalized trainers descend on standardized features (an exact
//! reparameterization, mapped back on return) so one step size works
//! across raw feature scales.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, Dataset, GeneratorConfig, TaskKind};
use crate::error::{Error, Result};
use crate::families::{self, FamilyKind, FamilySpec, FitMethod, FitOptions, MeanFn, ModelParams, Prediction};
use crate::im::{self, IMConfig};

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Rows grouped by label value, ascending. Every group is nonempty by
/// construction; label values need not be contiguous.
fn group_rows(envs: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if envs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} environment labels for {n} rows",
            envs.len()
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &e) in envs.iter().enumerate() {
        by_label.entry(e).or_default().push(i);
    }
    Ok(by_label.into_values().collect())
}

/// Per-sample weights that give every environment the same total mass:
/// a sample in environment `e` weighs `1 / (K * n_e)`, so the weights sum
/// to one.
pub fn balanced_weights(envs: &[usize], n: usize) -> Result<Vec<f64>> {
    let groups = group_rows(envs, n)?;
    let k = groups.len() as f64;
    let mut w = vec![0.0; n];
    for rows in &groups {
        let share = 1.0 / (k * rows.len() as f64);
        for &i in rows {
            w[i] = share;
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

pub fn train_erm(spec: &FamilySpec, data: &Dataset, opts: &FitOptions) -> Result<ModelParams> {
    // Weights sum to one so a gradient-descent budget means the same thing
    // at every dataset size.
    families::fit_weighted(spec, data, &vec![1.0 / data.n() as f64; data.n()], opts)
}

pub fn train_balanced(
    spec: &FamilySpec,
    data: &Dataset,
    envs: &[usize],
    opts: &FitOptions,
) -> Result<ModelParams> {
    let w = balanced_weights(envs, data.n())?;
    families::fit_weighted(spec, data, &w, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Penalty {
    Invariance,
    GradientAlignment,
}

/// Linear forward pass into `out` (one mean for V1, `classes` logits for V2).
fn linear_outputs(spec: &FamilySpec, theta: &[f64], x: ArrayView1<f64>, out: &mut [f64]) {
    let MeanFn::Linear { intercept } = spec.mean_fn else { unreachable!("validated linear") };
    let stride = spec.d + usize::from(intercept);
    for (k, o) in out.iter_mut().enumerate() {
        let block = &theta[k * stride..(k + 1) * stride];
        let mut z = if intercept { block[spec.d] } else { 0.0 };
        for (w, &xv) in block[..spec.d].iter().zip(x.iter()) {
            z += w * xv;
        }
        *o = z;
    }
}

/// Adds `scale * v * phi_i` to the parameter block of output `k`, where
/// `phi_i` is the feature row extended by the intercept column.
fn add_outer(
    spec: &FamilySpec,
    x: ArrayView1<f64>,
    k: usize,
    scale: f64,
    out: &mut [f64],
) {
    let MeanFn::Linear { intercept } = spec.mean_fn else { unreachable!("validated linear") };
    let stride = spec.d + usize::from(intercept);
    let block = &mut out[k * stride..(k + 1) * stride];
    for (w, &xv) in block[..spec.d].iter_mut().zip(x.iter()) {
        *w += scale * xv;
    }
    if intercept {
        block[spec.d] += scale;
    }
}

/// Column-wise affine reparameterization used to precondition the
/// penalized trainers. The optimized class is unchanged: parameters are
/// mapped back exactly. Without an intercept only scaling is applied,
/// since a mean shift could not be undone.
struct Standardizer {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    fn fit(data: &Dataset, center: bool) -> Self {
        let n = data.n() as f64;
        let mut mean = vec![0.0; data.d()];
        let mut sd = vec![1.0; data.d()];
        for j in 0..data.d() {
            let col = data.features().column(j);
            let m = if center { col.sum() / n } else { 0.0 };
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            if var > 0.0 {
                sd[j] = var.sqrt();
            }
        }
        Standardizer { mean, sd }
    }

    fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let mut feats = data.features().to_owned();
        for (j, mut col) in feats.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.sd[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Dataset::new(
            feats,
            data.targets().clone(),
            data.task(),
            data.true_envs().map(<[usize]>::to_vec),
        )
    }

    /// Maps parameters fitted on standardized features back to the raw
    /// feature scale: `w_raw = w_std / sd`, and the intercept absorbs
    /// `-sum_j w_std_j mean_j / sd_j`.
    fn params_to_raw(&self, spec: &FamilySpec, theta: &[f64]) -> Vec<f64> {
        let MeanFn::Linear { intercept } = spec.mean_fn else { unreachable!("validated linear") };
        let stride = spec.d + usize::from(intercept);
        let mut out = theta.to_vec();
        for k in 0..spec.outputs() {
            let block = &mut out[k * stride..(k + 1) * stride];
            let mut shift = 0.0;
            for (j, w) in block[..spec.d].iter_mut().enumerate() {
                shift += *w * self.mean[j] / self.sd[j];
                *w /= self.sd[j];
            }
            if intercept {
                block[spec.d] -= shift;
            }
        }
        out
    }
}

struct PenaltyScratch {
    outputs: Vec<f64>,
    probs: Vec<f64>,
    grad_env: Vec<f64>,
    grad_mean: Vec<f64>,
    d_grads: Vec<Vec<f64>>,
    env_grads: Vec<Vec<f64>>,
}

/// Risk gradient of one environment (mean over its rows, no ridge), plus
/// the penalty ingredients:
/// for the invariance penalty, `d_e = mean_i <dloss/doutput, output>` and
/// its parameter gradient; nothing extra for alignment.
fn env_risk_gradient(
    spec: &FamilySpec,
    data: &Dataset,
    rows: &[usize],
    theta: &[f64],
    grad: &mut [f64],
    d_value: &mut f64,
    d_grad: Option<&mut [f64]>,
    scratch: &mut (Vec<f64>, Vec<f64>),
) -> Result<()> {
    let c = spec.outputs();
    let (outputs, probs) = scratch;
    outputs.resize(c, 0.0);
    grad.iter_mut().for_each(|g| *g = 0.0);
    *d_value = 0.0;
    let mut dg = d_grad;
    if let Some(g) = dg.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let inv = 1.0 / rows.len() as f64;
    for &i in rows {
        let x = data.features().row(i);
        let y = data.targets()[i];
        linear_outputs(spec, theta, x, outputs);
        match spec.kind {
            FamilyKind::V1 { sigma } => {
                let f = outputs[0];
                let resid = (f - y) / (sigma * sigma);
                add_outer(spec, x, 0, inv * resid, grad);
                *d_value += inv * resid * f;
                if let Some(g) = dg.as_deref_mut() {
                    // d/dtheta of resid * f = (2f - y) / sigma^2 * phi
                    add_outer(spec, x, 0, inv * (2.0 * f - y) / (sigma * sigma), g);
                }
            }
            FamilyKind::V2 { classes } => {
                let label = data.class_target(i);
                let lse = crate::linalg::log_sum_exp(outputs);
                probs.resize(classes, 0.0);
                for (p, &z) in probs.iter_mut().zip(outputs.iter()) {
                    *p = (z - lse).exp();
                }
                let zbar: f64 = probs.iter().zip(outputs.iter()).map(|(p, z)| p * z).sum();
                for k in 0..classes {
                    let delta = probs[k] - f64::from(u8::from(k == label));
                    add_outer(spec, x, k, inv * delta, grad);
                    *d_value += inv * delta * outputs[k];
                    if let Some(g) = dg.as_deref_mut() {
                        add_outer(spec, x, k, inv * (delta + probs[k] * (outputs[k] - zbar)), g);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Alignment penalty gradient `(2/E) sum_e H_e (g_e - mean g)`, with the
/// exact linear-model Hessians: `phi phi^T / sigma^2` for V1 and the
/// softmax block Hessian `p_k (delta_kl - p_l) phi phi^T` for V2, averaged
/// over each environment's rows.
fn alignment_grad(
    spec: &FamilySpec,
    data: &Dataset,
    groups: &[Vec<usize>],
    theta: &[f64],
    env_grads: &[Vec<f64>],
    grad_mean: &[f64],
    outputs: &mut Vec<f64>,
    probs: &mut Vec<f64>,
    out: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|v| *v = 0.0);
    let e_count = groups.len() as f64;
    let MeanFn::Linear { intercept } = spec.mean_fn else { unreachable!("validated linear") };
    let stride = spec.d + usize::from(intercept);
    for (rows, g_e) in groups.iter().zip(env_grads) {
        let diff: Vec<f64> = g_e.iter().zip(grad_mean).map(|(a, b)| a - b).collect();
        let inv = 1.0 / rows.len() as f64;
        let scale_e = 2.0 / e_count;
        for &i in rows {
            let x = data.features().row(i);
            // phi^T diff_k per output block, sharing the extended row.
            match spec.kind {
                FamilyKind::V1 { sigma } => {
                    let block = &diff[..stride];
                    let mut dot = if intercept { block[spec.d] } else { 0.0 };
                    for (w, &xv) in block[..spec.d].iter().zip(x.iter()) {
                        dot += w * xv;
                    }
                    add_outer(spec, x, 0, scale_e * inv * dot / (sigma * sigma), out);
                }
                FamilyKind::V2 { classes } => {
                    linear_outputs(spec, theta, x, outputs);
                    let lse = crate::linalg::log_sum_exp(outputs);
                    probs.resize(classes, 0.0);
                    for (p, &z) in probs.iter_mut().zip(outputs.iter()) {
                        *p = (z - lse).exp();
                    }
                    // t_k = phi^T diff_k, then H phi-block:
                    // sum_l p_k (delta_kl - p_l) t_l = p_k (t_k - sum_l p_l t_l)
                    let mut t = vec![0.0; classes];
                    for (k, tk) in t.iter_mut().enumerate() {
                        let block = &diff[k * stride..(k + 1) * stride];
                        let mut dot = if intercept { block[spec.d] } else { 0.0 };
                        for (w, &xv) in block[..spec.d].iter().zip(x.iter()) {
                            dot += w * xv;
                        }
                        *tk = dot;
                    }
                    let tbar: f64 = probs.iter().zip(&t).map(|(p, tk)| p * tk).sum();
                    for k in 0..classes {
                        add_outer(spec, x, k, scale_e * inv * probs[k] * (t[k] - tbar), out);
                    }
                }
            }
        }
    }
    Ok(())
}

fn train_penalized(
    spec: &FamilySpec,
    data: &Dataset,
    envs: &[usize],
    lambda: f64,
    opts: &FitOptions,
    penalty: Penalty,
) -> Result<ModelParams> {
    spec.validate()?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be finite and nonnegative")));
    }
    if !matches!(spec.mean_fn, MeanFn::Linear { .. }) {
        return Err(Error::Unsupported(
            "penalized trainers have closed-form penalty gradients for linear means only".into(),
        ));
    }
    let FitMethod::GradientDescent { alpha, steps } = opts.method else {
        return Err(Error::Unsupported("the penalty term needs an iterative optimizer".into()));
    };
    opts.validate()?;
    let groups = group_rows(envs, data.n())?;
    // Optimize on standardized features: an exact reparameterization of
    // the same linear class that keeps step sizes meaningful when raw
    // columns differ in scale by orders of magnitude. The alignment
    // penalty's gradient norms are thereby measured in the standardized
    // parameterization.
    let standardizer = Standardizer::fit(data, matches!(spec.mean_fn, MeanFn::Linear { intercept: true }));
    let data = &standardizer.transform(data)?;
    let p = spec.param_len();
    let mut theta = opts.init_params(*spec).theta;
    let mut s = PenaltyScratch {
        outputs: Vec::new(),
        probs: Vec::new(),
        grad_env: vec![0.0; p],
        grad_mean: vec![0.0; p],
        d_grads: vec![vec![0.0; p]; groups.len()],
        env_grads: vec![vec![0.0; p]; groups.len()],
    };
    let mut total = vec![0.0; p];
    let mut d_values = vec![0.0; groups.len()];
    for step in 0..steps {
        total.iter_mut().for_each(|v| *v = 0.0);
        s.grad_mean.iter_mut().for_each(|v| *v = 0.0);
        let mut fwd = (std::mem::take(&mut s.outputs), std::mem::take(&mut s.probs));
        for (e, rows) in groups.iter().enumerate() {
            let d_grad = match penalty {
                Penalty::Invariance => Some(s.d_grads[e].as_mut_slice()),
                Penalty::GradientAlignment => None,
            };
            env_risk_gradient(spec, data, rows, &theta, &mut s.env_grads[e], &mut d_values[e], d_grad, &mut fwd)?;
            // Pooled risk gradient: environments contribute by size.
            let share = rows.len() as f64 / data.n() as f64;
            for (t, g) in total.iter_mut().zip(&s.env_grads[e]) {
                *t += share * g;
            }
            let e_inv = 1.0 / groups.len() as f64;
            for (m, g) in s.grad_mean.iter_mut().zip(&s.env_grads[e]) {
                *m += e_inv * g;
            }
        }
        (s.outputs, s.probs) = fwd;
        if lambda > 0.0 {
            match penalty {
                Penalty::Invariance => {
                    for (e, dg) in s.d_grads.iter().enumerate() {
                        for (t, g) in total.iter_mut().zip(dg) {
                            *t += lambda * 2.0 * d_values[e] * g;
                        }
                    }
                }
                Penalty::GradientAlignment => {
                    alignment_grad(
                        spec,
                        data,
                        &groups,
                        &theta,
                        &s.env_grads,
                        &s.grad_mean,
                        &mut s.outputs,
                        &mut s.probs,
                        &mut s.grad_env,
                    )?;
                    for (t, g) in total.iter_mut().zip(&s.grad_env) {
                        *t += lambda * g;
                    }
                }
            }
        }
        for (th, g) in theta.iter_mut().zip(&total) {
            *th -= alpha * (g + opts.ridge * *th);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "parameters became non-finite at step {step}; lower the step size or lambda"
            )));
        }
    }
    ModelParams::new(*spec, standardizer.params_to_raw(spec, &theta))
}

/// Pooled risk plus `lambda` times the invariance penalty, minimized by
/// gradient descent for the declared step budget.
pub fn train_irm(
    spec: &FamilySpec,
    data: &Dataset,
    envs: &[usize],
    lambda: f64,
    opts: &FitOptions,
) -> Result<ModelParams> {
    train_penalized(spec, data, envs, lambda, opts, Penalty::Invariance)
}

/// Pooled risk plus `lambda` times the gradient alignment penalty.
pub fn train_iga(
    spec: &FamilySpec,
    data: &Dataset,
    envs: &[usize],
    lambda: f64,
    opts: &FitOptions,
) -> Result<ModelParams> {
    train_penalized(spec, data, envs, lambda, opts, Penalty::GradientAlignment)
}

// ---------------------------------------------------------------------------
// KMeans baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions { max_iter: 100 }
    }
}

/// Lloyd's algorithm on per-column standardized features (targets are not
/// used). Seeded start from `k` distinct rows; an emptied cluster is
/// respawned on the row farthest from its current centroid. Deterministic
/// given the seed.
pub fn kmeans_envs(data: &Dataset, k: usize, seed: u64, opts: &KMeansOptions) -> Result<Vec<usize>> {
    let n = data.n();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k = {k} must lie in 1..={n}")));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let d = data.d();
    let mut feats = data.features().to_owned();
    for j in 0..d {
        let mut col = feats.column_mut(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| (v - mean) / sd);
        } else {
            col.fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, n, k);
    let mut centroids: Vec<Vec<f64>> = picks.iter().map(|i| feats.row(i).to_vec()).collect();
    let mut labels = vec![0usize; n];
    let dist2 = |row: ArrayView1<f64>, c: &[f64]| -> f64 {
        row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    for _ in 0..opts.max_iter {
        let mut changed = false;
        let mut far_row = vec![0usize; k];
        let mut far_dist = vec![f64::NEG_INFINITY; k];
        for i in 0..n {
            let row = feats.row(i);
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let dd = dist2(row, centroid);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            if best_d > far_dist[best] {
                far_dist[best] = best_d;
                far_row[best] = i;
            }
        }
        let mut counts = vec![0usize; k];
        for c in centroids.iter_mut() {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (cv, &fv) in centroids[l].iter_mut().zip(feats.row(i)) {
                *cv += fv;
            }
        }
        let busiest = counts.iter().enumerate().max_by_key(|(_, &c)| c).map(|(c, _)| c).unwrap_or(0);
        for (c, count) in counts.iter().enumerate() {
            if *count > 0 {
                let inv = 1.0 / *count as f64;
                centroids[c].iter_mut().for_each(|v| *v *= inv);
            } else {
                // Respawn on the farthest row of the largest cluster.
                centroids[c] = feats.row(far_row[busiest]).to_vec();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error of the predicted mean (regression).
    pub mse: Option<f64>,
    /// 0/1 accuracy of the argmax class (classification).
    pub accuracy: Option<f64>,
}

impl EvalMetrics {
    /// The table cell for this task: MSE for regression, accuracy for
    /// classification.
    pub fn cell(&self) -> f64 {
        self.mse.or(self.accuracy).expect("one metric is always set")
    }
}

pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<EvalMetrics> {
    if test.d() != params.spec.d {
        return Err(Error::DimensionMismatch(format!(
            "test data has {} features, model expects {}",
            test.d(),
            params.spec.d
        )));
    }
    match (params.spec.kind, test.task()) {
        (FamilyKind::V1 { .. }, TaskKind::Regression) => {
            let mut sum = 0.0;
            for i in 0..test.n() {
                let Prediction::Mean(m) = families::predict(params, test.features().row(i))? else {
                    unreachable!("V1 predicts a mean");
                };
                let d = m - test.targets()[i];
                sum += d * d;
            }
            Ok(EvalMetrics { mse: Some(sum / test.n() as f64), accuracy: None })
        }
        (FamilyKind::V2 { classes }, TaskKind::Classification { classes: tc }) if classes == tc => {
            let mut hits = 0usize;
            for i in 0..test.n() {
                let Prediction::Probs(p) = families::predict(params, test.features().row(i))? else {
                    unreachable!("V2 predicts probabilities");
                };
                let arg = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(c, _)| c)
                    .unwrap_or(0);
                if arg == test.class_target(i) {
                    hits += 1;
                }
            }
            Ok(EvalMetrics { mse: None, accuracy: Some(hits as f64 / test.n() as f64) })
        }
        _ => Err(Error::InvalidConfig("model family does not match the test task".into())),
    }
}

// ---------------------------------------------------------------------------
// Comparison table
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Erm,
    Balance,
    Irm { lambda: f64 },
    Iga { lambda: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Balance => "balance",
            Method::Irm { .. } => "irm",
            Method::Iga { .. } => "iga",
        }
    }

    fn needs_envs(&self) -> bool {
        !matches!(self, Method::Erm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum EnvSource {
    /// Generator ground truth carried by the dataset.
    TrueEnvs,
    /// KMeans on standardized features.
    KMeans { k: usize },
    /// Hard labels from the heterogeneity search.
    Im { k: usize },
}

impl EnvSource {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSource::TrueEnvs => "true",
            EnvSource::KMeans { .. } => "kmeans",
            EnvSource::Im { .. } => "im",
        }
    }
}

/// One aggregated table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OODResult {
    pub method: String,
    pub env_source: String,
    pub condition: String,
    pub mean: f64,
    pub sd: f64,
    pub n_seeds: usize,
}

/// The factorial experiment: a training scenario, named test conditions
/// (generated with the training seed so the causal mechanism is shared),
/// and fit budgets. `train_error_by_true_env` adds per-group training
/// error conditions named `train_g<e>`.
#[derive(Clone, Debug)]
pub struct TableSpec {
    pub train: GeneratorConfig,
    /// Fixed training data; when set, `train` is ignored and seeds only vary
    /// the test draws and the inferred environment labels.
    pub train_data: Option<Dataset>,
    pub tests: Vec<(String, GeneratorConfig)>,
    pub train_error_by_true_env: bool,
    /// Budget for the unpenalized trainers (closed form allowed).
    pub fit: FitOptions,
    /// Budget for the penalized trainers (gradient descent required).
    pub penalized_fit: FitOptions,
}

fn im_labels(spec: &FamilySpec, data: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let cfg = IMConfig::defaults(spec, k, data.n()).with_seed(seed);
    let result = im::run_im(spec, data, &cfg)?;
    Ok(im::harden(&result.assignment, cfg.tie_break))
}

fn source_labels(
    spec: &FamilySpec,
    data: &Dataset,
    source: &EnvSource,
    seed: u64,
) -> Result<Vec<usize>> {
    match source {
        EnvSource::TrueEnvs => data
            .true_envs()
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::InvalidConfig("dataset carries no ground-truth environments".into())),
        EnvSource::KMeans { k } => kmeans_envs(data, *k, seed, &KMeansOptions::default()),
        EnvSource::Im { k } => im_labels(spec, data, *k, seed),
    }
}

fn train_with(
    spec: &FamilySpec,
    data: &Dataset,
    method: &Method,
    envs: Option<&[usize]>,
    table: &TableSpec,
) -> Result<ModelParams> {
    match method {
        Method::Erm => train_erm(spec, data, &table.fit),
        Method::Balance => train_balanced(spec, data, envs.expect("envs for balance"), &table.fit),
        Method::Irm { lambda } => {
            train_irm(spec, data, envs.expect("envs for irm"), *lambda, &table.penalized_fit)
        }
        Method::Iga { lambda } => {
            train_iga(spec, data, envs.expect("envs for iga"), *lambda, &table.penalized_fit)
        }
    }
}

/// Every method x environment-source x condition cell, averaged over
/// seeds. Unpenalized pooled training ignores environments and appears
/// once per condition under the source name `none`.
pub fn run_table(
    spec: &FamilySpec,
    table: &TableSpec,
    methods: &[Method],
    env_sources: &[EnvSource],
    seeds: &[u64],
) -> Result<Vec<OODResult>> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one method and one seed".into()));
    }
    if methods.iter().any(Method::needs_envs) && env_sources.is_empty() {
        return Err(Error::InvalidConfig("environment-aware methods need an environment source".into()));
    }
    // (method, source, condition) -> per-seed cells, insertion-ordered keys.
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut push = |key: (String, String, String), value: f64, order: &mut Vec<_>| {
        let entry = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        entry.push(value);
    };
    for &seed in seeds {
        let train = match &table.train_data {
            Some(data) => data.clone(),
            None => generate(&table.train, seed)?,
        };
        let tests: Vec<(String, Dataset)> = table
            .tests
            .iter()
            .map(|(name, cfg)| Ok((name.clone(), generate(cfg, seed)?)))
            .collect::<Result<_>>()?;
        let train_groups: Vec<(String, Dataset)> = if table.train_error_by_true_env {
            let envs = train.true_envs().ok_or_else(|| {
                Error::InvalidConfig("per-group training error needs ground-truth environments".into())
            })?;
            group_rows(envs, train.n())?
                .iter()
                .enumerate()
                .map(|(e, rows)| Ok((format!("train_g{e}"), train.subset(rows)?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut labels_by_source: Vec<(String, Vec<usize>)> = Vec::new();
        if methods.iter().any(Method::needs_envs) {
            for source in env_sources {
                labels_by_source.push((source.name().into(), source_labels(spec, &train, source, seed)?));
            }
        }
        for method in methods {
            let sources: Vec<(String, Option<&[usize]>)> = if method.needs_envs() {
                labels_by_source
                    .iter()
                    .map(|(name, l)| (name.clone(), Some(l.as_slice())))
                    .collect()
            } else {
                vec![("none".to_string(), None)]
            };
            for (source_name, envs) in sources {
                let params = train_with(spec, &train, method, envs, table)?;
                for (cond, test) in tests.iter().chain(train_groups.iter()) {
                    let value = evaluate(&params, test)?.cell();
                    push(
                        (method.name().into(), source_name.clone(), cond.clone()),
                        value,
                        &mut order,
                    );
                }
            }
        }
    }
    let mut results = Vec::with_capacity(order.len());
    for key in order {
        let values = &cells[&key];
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        if !mean.is_finite() || !sd.is_finite() {
            return Err(Error::NonFinite(format!("cell {key:?} aggregated to a non-finite value")));
        }
        let (method, env_source, condition) = key;
        results.push(OODResult { method, env_source, condition, mean, sd, n_seeds: values.len() });
    }
    Ok(results)
}

/// CSV form of the comparison table. Values print at full precision; trim
/// downstream if prettiness matters.
pub fn table_to_csv(results: &[OODResult]) -> String {
    let mut out = String::from("method,env_source,condition,mean,sd\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.env_source, r.condition, r.mean, r.sd
        ));
    }
    out
}

// ---------------------------------------------------------------------------
