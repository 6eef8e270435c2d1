//! Empirical predictive entropies and the heterogeneity score of a dataset
//! under a fixed soft environment assignment.
//!
//! Everything here evaluates; nothing searches. Given a family, the four
//! quantities are
//!
//! - marginal entropy: best constant predictor's mean loss;
//! - conditional entropy: best family member's mean loss;
//! - environment marginal / conditional entropies: the same two, but fit
//!   independently per environment with the assignment column as sample
//!   weights and the whole sum still divided by N.
//!
//! The heterogeneity score is
//! `(env_marginal - env_conditional) - (marginal - conditional)`: the
//! information the features carry about the target inside the discovered
//! environments, minus what they already carry on the pooled data. Splitting
//! pure noise moves marginal and conditional terms by the same amount, so
//! the score stays at zero; only splits that separate different predictive
//! mechanisms raise it.
//!
//! Environments whose total weight falls below a mass floor (default
//! `1e-3 * N`) are skipped and contribute nothing: a near-empty environment
//! can otherwise buy arbitrary score by overfitting a handful of rows.
//!
//! Per-environment fits receive mass-normalized weights, so a gradient
//! descent step size here refers to the mean loss and does not depend on
//! environment size.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::families::{
    self, FamilyKind, FamilySpec, FitOptions, MeanFn, ModelParams, ParamInit, Workspace,
};

/// Default per-environment total-weight threshold, as a fraction of N.
pub const DEFAULT_MASS_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Assignment matrices
// ---------------------------------------------------------------------------

/// Row-stochastic N x K matrix; entry `(i, k)` is the estimated probability
/// that sample `i` belongs to environment `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    w: Array2<f64>,
}

impl AssignmentMatrix {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::InvalidConfig("assignment matrix must be nonempty".into()));
        }
        for (i, row) in w.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if !v.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "assignment ({i},{k}) = {v} is outside [0,1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(AssignmentMatrix { w })
    }

    /// Every sample spread evenly over `k` environments.
    pub fn uniform(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidConfig("need n >= 1 and k >= 1".into()));
        }
        Ok(AssignmentMatrix { w: Array2::from_elem((n, k), 1.0 / k as f64) })
    }

    /// One-hot rows from hard labels in `0..k`.
    pub fn from_hard_labels(labels: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() || k == 0 {
            return Err(Error::InvalidConfig("need labels and k >= 1".into()));
        }
        let mut w = Array2::zeros((labels.len(), k));
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidConfig(format!("label {l} at row {i} exceeds K = {k}")));
            }
            w[[i, l]] = 1.0;
        }
        Ok(AssignmentMatrix { w })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.w
    }

    /// Per-environment mass `(1/N) sum_i w_ik`; sums to 1 over environments.
    pub fn masses(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.k()).map(|k| self.w.column(k).sum() / n).collect()
    }
}

// ---------------------------------------------------------------------------
// Evaluation options and report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Fit used for the pooled and per-environment conditional entropies.
    pub fit: FitOptions,
    /// Environments with total weight below `frac * N` are skipped; `None`
    /// disables the floor.
    pub mass_floor: Option<f64>,
}

impl EvalOptions {
    /// Closed form for V1 linear, a generous descent budget otherwise.
    pub fn for_spec(spec: &FamilySpec) -> Self {
        let fit = match (spec.kind, spec.mean_fn) {
            (FamilyKind::V1 { .. }, MeanFn::Linear { .. }) => FitOptions::closed_form(),
            (_, MeanFn::Linear { .. }) => FitOptions::gradient_descent(0.2, 800),
            (_, MeanFn::Mlp { .. }) => {
                FitOptions::gradient_descent(0.05, 1500).with_init(ParamInit::Seeded { seed: 0 })
            }
        };
        EvalOptions { fit, mass_floor: Some(DEFAULT_MASS_FLOOR) }
    }

    pub fn with_mass_floor(mut self, floor: Option<f64>) -> Self {
        self.mass_floor = floor;
        self
    }

    pub fn with_fit(mut self, fit: FitOptions) -> Self {
        self.fit = fit;
        self
    }
}

/// Everything [`evaluate_heterogeneity`] measures. All entropies in nats;
/// the `_centered` copies subtract the family's additive density constant
/// (`ln sigma + 0.5 ln 2pi` for V1, zero for V2) so values are comparable
/// across sigmas.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub spec: FamilySpec,
    pub k: usize,
    pub marginal_entropy: f64,
    pub conditional_entropy: f64,
    pub env_marginal_entropy: f64,
    pub env_conditional_entropy: f64,
    pub v_information: f64,
    pub env_v_information: f64,
    pub heterogeneity: f64,
    pub env_masses: Vec<f64>,
    pub entropy_constant: f64,
    pub marginal_entropy_centered: f64,
    pub conditional_entropy_centered: f64,
    pub env_marginal_entropy_centered: f64,
    pub env_conditional_entropy_centered: f64,
    /// Converged per-environment fits; `None` for skipped environments.
    pub per_env_params: Vec<Option<ModelParams>>,
    /// True where an environment fell below the mass floor.
    pub skipped_envs: Vec<bool>,
    pub pooled_params: ModelParams,
}

/// Per-environment entropy totals plus the fits that produced them.
#[derive(Clone, Debug)]
pub struct EnvEntropies {
    pub env_conditional: f64,
    pub env_marginal: f64,
    pub per_env_params: Vec<Option<ModelParams>>,
    pub skipped: Vec<bool>,
}

// ---------------------------------------------------------------------------
// Entropies
// ---------------------------------------------------------------------------

fn check_spec_data(spec: &FamilySpec, data: &Dataset) -> Result<()> {
    spec.validate()?;
    if data.d() != spec.d {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} features, spec expects {}",
            data.d(),
            spec.d
        )));
    }
    if let Some(classes) = spec.n_classes() {
        match data.task().n_classes() {
            Some(c) if c <= classes => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "V2 with {classes} classes cannot score task {other:?}"
                )));
            }
        }
    }
    Ok(())
}

/// Mean loss of `params` over `data` with per-row weights, divided by N
/// (not by the weight total).
fn weighted_loss_sum(
    spec: &FamilySpec,
    params: &ModelParams,
    data: &Dataset,
    weights: &[f64],
) -> Result<f64> {
    let mut ws = Workspace::default();
    let mut total = 0.0;
    for i in 0..data.n() {
        if weights[i] == 0.0 {
            continue;
        }
        let l = families::loss_ws(spec, &params.theta, data.features().row(i), data.targets()[i], &mut ws)?;
        total += weights[i] * l;
    }
    Ok(total / data.n() as f64)
}

/// Best-in-family mean loss on the pooled data, with the fitted params.
pub fn empirical_conditional_entropy(
    spec: &FamilySpec,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<(f64, ModelParams)> {
    check_spec_data(spec, data)?;
    let weights = vec![1.0 / data.n() as f64; data.n()];
    let params = families::fit_weighted(spec, data, &weights, opts)?;
    let value = weighted_loss_sum(spec, &params, data, &vec![1.0; data.n()])?;
    Ok((value, params))
}

/// Entropy of the weighted label distribution, in nats.
fn shannon(freqs: &[f64]) -> f64 {
    freqs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Weighted marginal-entropy contribution of one environment: the column's
/// total weight is `col_total`, and the returned value is already divided by
/// N. For V1 the best constant is the weighted target mean; for V2 the best
/// constant distribution is the weighted label frequency vector.
fn weighted_marginal_sum(
    spec: &FamilySpec,
    data: &Dataset,
    weights: impl Iterator<Item = f64> + Clone,
    col_total: f64,
    n: f64,
) -> f64 {
    match spec.kind {
        FamilyKind::V1 { sigma } => {
            let mut wy = 0.0;
            for (w, &y) in weights.clone().zip(data.targets()) {
                wy += w * y;
            }
            let mean = wy / col_total;
            let mut ss = 0.0;
            for (w, &y) in weights.zip(data.targets()) {
                ss += w * (y - mean) * (y - mean);
            }
            ss / (2.0 * sigma * sigma * n) + (col_total / n) * spec.entropy_constant()
        }
        FamilyKind::V2 { classes } => {
            let mut freq = vec![0.0; classes];
            for (i, w) in weights.enumerate() {
                freq[data.class_target(i)] += w;
            }
            for f in &mut freq {
                *f /= col_total;
            }
            (col_total / n) * shannon(&freq)
        }
    }
}

/// Best constant predictor's mean loss on the pooled data.
pub fn empirical_marginal_entropy(spec: &FamilySpec, data: &Dataset) -> Result<f64> {
    check_spec_data(spec, data)?;
    let n = data.n() as f64;
    Ok(weighted_marginal_sum(spec, data, std::iter::repeat(1.0).take(data.n()), n, n))
}

/// Per-environment conditional and marginal entropy totals under soft
/// weights: environment `k` is fit on column `k` of `w`, every sum divided
/// by N. Environments under the mass floor are skipped and contribute zero.
pub fn weighted_env_entropies(
    spec: &FamilySpec,
    data: &Dataset,
    w: &AssignmentMatrix,
    opts: &EvalOptions,
) -> Result<EnvEntropies> {
    check_spec_data(spec, data)?;
    opts.fit.validate()?;
    if w.n() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "assignment matrix has {} rows, dataset has {}",
            w.n(),
            data.n()
        )));
    }
    let n = data.n() as f64;
    let floor = opts.mass_floor.map_or(0.0, |f| f * n);
    if let Some(f) = opts.mass_floor {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidConfig(format!("mass floor fraction {f} must lie in [0, 1)")));
        }
    }

    let mut env_conditional = 0.0;
    let mut env_marginal = 0.0;
    let mut per_env_params = Vec::with_capacity(w.k());
    let mut skipped = Vec::with_capacity(w.k());
    let mut col = vec![0.0; data.n()];
    for k in 0..w.k() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = w.matrix()[[i, k]];
        }
        let total: f64 = col.iter().sum();
        if total <= floor || total <= 0.0 {
            per_env_params.push(None);
            skipped.push(true);
            continue;
        }
        skipped.push(false);

        let normalized: Vec<f64> = col.iter().map(|v| v / total).collect();
        let params = families::fit_weighted(spec, data, &normalized, &opts.fit)?;
        env_conditional += weighted_loss_sum(spec, &params, data, &col)?;
        env_marginal += weighted_marginal_sum(spec, data, col.iter().copied(), total, n);
        per_env_params.push(Some(params));
    }
    Ok(EnvEntropies { env_conditional, env_marginal, per_env_params, skipped })
}

/// Evaluate the full report at a fixed assignment.
pub fn evaluate_heterogeneity(
    spec: &FamilySpec,
    data: &Dataset,
    w: &AssignmentMatrix,
    opts: &EvalOptions,
) -> Result<HeterogeneityReport> {
    let (conditional, pooled_params) = empirical_conditional_entropy(spec, data, &opts.fit)?;
    let marginal = empirical_marginal_entropy(spec, data)?;
    let env = weighted_env_entropies(spec, data, w, opts)?;

    let v_information = marginal - conditional;
    let env_v_information = env.env_marginal - env.env_conditional;
    let heterogeneity = env_v_information - v_information;
    let env_masses = w.masses();
    let constant = spec.entropy_constant();
    // Each skipped environment withheld `mass * constant` from the env
    // sums, so center those by the live mass only.
    let live_mass: f64 =
        env_masses.iter().zip(&env.skipped).filter(|(_, &s)| !s).map(|(m, _)| m).sum();

    Ok(HeterogeneityReport {
        spec: *spec,
        k: w.k(),
        marginal_entropy: marginal,
        conditional_entropy: conditional,
        env_marginal_entropy: env.env_marginal,
        env_conditional_entropy: env.env_conditional,
        v_information,
        env_v_information,
        heterogeneity,
        env_masses,
        entropy_constant: constant,
        marginal_entropy_centered: marginal - constant,
        conditional_entropy_centered: conditional - constant,
        env_marginal_entropy_centered: env.env_marginal - live_mass * constant,
        env_conditional_entropy_centered: env.env_conditional - live_mass * constant,
        per_env_params: env.per_env_params,
        skipped_envs: env.skipped,
        pooled_params,
    })
}

// ---------------------------------------------------------------------------
