//! The information-maximization search: projected gradient ascent on a soft
//! environment assignment, with truncated bi-level gradients.
//!
//! The outer variable is a row-stochastic matrix W. The inner problem fits
//! one model per environment against W's columns as sample weights. The
//! outer objective being minimized is
//!
//! ```text
//! J(W) = (1/N) sum_ij w_ij loss(f_j(x_i), y_i)  +  U(W)
//! ```
//!
//! where U penalizes splits that manufacture information out of the label
//! marginal alone. Minimizing J maximizes the heterogeneity score: for
//! converged inner fits, `heterogeneity = pooled_conditional - J` exactly
//! (both families), which is also how the objective trace should be read.
//!
//! Inner fits during the search are `t`-step truncated and warm-started
//! across outer iterations; every report that leaves this module re-fits to
//! convergence. The outer gradient differentiates through the final inner
//! step only (one-step truncated backpropagation), so the trace is close to
//! monotone but not exactly so, and the best iterate seen is returned rather
//! than the last.
//!
//! Everything is deterministic given the seeds in the config.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::families::{
    self, FamilyKind, FamilySpec, FitMethod, FitOptions, MeanFn, ModelParams, ParamInit,
    TruncatedFit, Workspace,
};
use crate::vinfo::{
    evaluate_heterogeneity, AssignmentMatrix, EvalOptions, HeterogeneityReport, DEFAULT_MASS_FLOOR,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the search initializes W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitW {
    /// `(1 - scale) * uniform + scale * Dirichlet(1)` per row. Pure uniform
    /// is a saddle (all environments identical), so some noise is required;
    /// scale must stay in (0, 0.5) to keep rows near the interior.
    UniformNoise { seed: u64, scale: f64 },
    /// One-hot rows from given labels, e.g. to warm-start from a clustering.
    FromLabels(Vec<usize>),
}

/// Tie rule for [`harden`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// Equal maxima go to the lowest column index.
    LowestIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IMConfig {
    /// Number of environments K (at least 2).
    pub k: usize,
    /// Outer step size on W. Outer gradient entries scale like `loss / N`,
    /// so useful values grow with N; `defaults` picks `0.02 * N`.
    pub outer_lr: f64,
    pub outer_iters: usize,
    /// Truncated inner fit (must be gradient descent: the hypergradient
    /// unrolls one inner step, which closed-form fits do not have).
    pub inner: FitOptions,
    pub init: InitW,
    pub tie_break: TieBreak,
    /// Shared with the entropy evaluations: environments whose column sums
    /// below `frac * N` are skipped. A drained column also gets a zero
    /// outer gradient, so it stays empty once it falls under the floor.
    pub mass_floor: Option<f64>,
    /// Omit the `-alpha` factor from the truncated term, reproducing the
    /// published formula verbatim instead of the derivative of the unrolled
    /// step. Off by default; the finite-difference oracle agrees with off.
    pub paper_literal_hypergradient: bool,
    /// Full heterogeneity evaluations happen every this many outer
    /// iterations (plus once before the loop and once after).
    pub eval_every: usize,
    /// Convergence-quality fits for those evaluations.
    pub report: EvalOptions,
}

impl IMConfig {
    /// Step sizes scaled for a dataset of `n` rows: see field docs.
    pub fn defaults(spec: &FamilySpec, k: usize, n: usize) -> Self {
        let inner_alpha = 0.05 * k as f64 / n.max(1) as f64;
        let inner_init = match spec.mean_fn {
            MeanFn::Linear { .. } => ParamInit::Zeros,
            MeanFn::Mlp { .. } => ParamInit::Seeded { seed: 1 },
        };
        IMConfig {
            k,
            outer_lr: 0.02 * n.max(1) as f64,
            outer_iters: 150,
            inner: FitOptions::gradient_descent(inner_alpha, 5).with_init(inner_init),
            init: InitW::UniformNoise { seed: 0, scale: 0.25 },
            tie_break: TieBreak::LowestIndex,
            mass_floor: Some(DEFAULT_MASS_FLOOR),
            paper_literal_hypergradient: false,
            eval_every: 25,
            report: EvalOptions::for_spec(spec),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        if let InitW::UniformNoise { scale, .. } = self.init {
            self.init = InitW::UniformNoise { seed, scale };
        }
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig("the search needs K >= 2".into()));
        }
        if n < self.k {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n} rows into {} environments",
                self.k
            )));
        }
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::InvalidConfig("outer_lr must be positive".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::InvalidConfig("outer_iters must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        self.inner.validate()?;
        if !matches!(self.inner.method, FitMethod::GradientDescent { .. }) {
            return Err(Error::Unsupported(
                "inner fits must use gradient descent; the outer gradient differentiates an inner step".into(),
            ));
        }
        self.report.fit.validate()?;
        if let Some(f) = self.mass_floor {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("mass floor {f} must lie in [0, 1)")));
            }
        }
        match &self.init {
            InitW::UniformNoise { scale, .. } => {
                if !(*scale > 0.0 && *scale < 0.5) {
                    return Err(Error::InvalidConfig(format!(
                        "init noise scale {scale} must lie in (0, 0.5)"
                    )));
                }
            }
            InitW::FromLabels(labels) => {
                if labels.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "init labels cover {} rows, dataset has {n}",
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= self.k) {
                    return Err(Error::InvalidConfig(format!("init label {bad} exceeds K = {}", self.k)));
                }
            }
        }
        Ok(())
    }
}

fn floor_mass(mass_floor: Option<f64>, n: usize) -> f64 {
    mass_floor.map_or(0.0, |f| f * n as f64)
}

// ---------------------------------------------------------------------------
// Regularizer
// ---------------------------------------------------------------------------

fn class_label(spec: &FamilySpec, y: f64) -> Result<usize> {
    let classes = spec
        .n_classes()
        .ok_or_else(|| Error::InvalidConfig("labels requested from a regression family".into()))?;
    let c = y as usize;
    if y.fract() != 0.0 || y < 0.0 || c >= classes {
        return Err(Error::InvalidConfig(format!("target {y} is not a class label below {classes}")));
    }
    Ok(c)
}

/// Per-column weight totals and, for V2, weighted class masses.
struct ColumnStats {
    totals: Vec<f64>,
    /// `class_mass[j][c] = sum_{i: y_i = c} w_ij`, classification only.
    class_mass: Vec<Vec<f64>>,
    /// `weighted_sum[j] = sum_i w_ij y_i`, regression only.
    weighted_sum: Vec<f64>,
}

fn column_stats(spec: &FamilySpec, w: &Array2<f64>, targets: ArrayView1<f64>) -> Result<ColumnStats> {
    let (n, k) = w.dim();
    let mut totals = vec![0.0; k];
    let mut weighted_sum = vec![0.0; k];
    let classes = spec.n_classes().unwrap_or(0);
    let mut class_mass = vec![vec![0.0; classes]; if classes > 0 { k } else { 0 }];
    for i in 0..n {
        let label = if classes > 0 { class_label(spec, targets[i])? } else { 0 };
        for j in 0..k {
            let wij = w[[i, j]];
            totals[j] += wij;
            if classes > 0 {
                class_mass[j][label] += wij;
            } else {
                weighted_sum[j] += wij * targets[i];
            }
        }
    }
    Ok(ColumnStats { totals, class_mass, weighted_sum })
}

fn regularizer_raw(
    spec: &FamilySpec,
    w: &Array2<f64>,
    targets: ArrayView1<f64>,
    mass_floor: Option<f64>,
) -> Result<f64> {
    let n = w.nrows() as f64;
    let floor = floor_mass(mass_floor, w.nrows());
    let stats = column_stats(spec, w, targets)?;
    match spec.kind {
        FamilyKind::V1 { .. } => {
            let mean = targets.sum() / n;
            let mut u = -mean * mean;
            for j in 0..w.ncols() {
                let m = stats.totals[j];
                if m <= floor || m <= 0.0 {
                    continue;
                }
                u += stats.weighted_sum[j] * stats.weighted_sum[j] / (n * m);
            }
            Ok(u)
        }
        FamilyKind::V2 { .. } => {
            let mut u = 0.0;
            for j in 0..w.ncols() {
                let m = stats.totals[j];
                if m <= floor || m <= 0.0 {
                    continue;
                }
                let entropy: f64 = stats.class_mass[j]
                    .iter()
                    .filter(|&&a| a > 0.0)
                    .map(|&a| -(a / m) * (a / m).ln())
                    .sum();
                u -= (m / n) * entropy;
            }
            Ok(u)
        }
    }
}

/// The split penalty U(W). For V1 this is the variance of the environment
/// label means, in squared-target units:
/// `sum_j (sum_i w_ij y_i)^2 / (N sum_i w_ij) - mean(y)^2`. For V2 it is
/// the negated mass-weighted entropy of each environment's label
/// distribution, in nats. Environments below the mass floor contribute zero.
pub fn regularizer(
    spec: &FamilySpec,
    w: &AssignmentMatrix,
    targets: ArrayView1<f64>,
    mass_floor: Option<f64>,
) -> Result<f64> {
    spec.validate()?;
    if w.n() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} rows, targets {}",
            w.n(),
            targets.len()
        )));
    }
    regularizer_raw(spec, w.matrix(), targets, mass_floor)
}

fn regularizer_grad_raw(
    spec: &FamilySpec,
    w: &Array2<f64>,
    targets: ArrayView1<f64>,
    mass_floor: Option<f64>,
) -> Result<Array2<f64>> {
    let (n, k) = w.dim();
    let nf = n as f64;
    let floor = floor_mass(mass_floor, n);
    let stats = column_stats(spec, w, targets)?;
    let live: Vec<bool> = stats.totals.iter().map(|&m| m > floor && m > 0.0).collect();
    let mut g = Array2::zeros((n, k));
    match spec.kind {
        FamilyKind::V1 { .. } => {
            for j in 0..k {
                if !live[j] {
                    continue;
                }
                let (s, m) = (stats.weighted_sum[j], stats.totals[j]);
                for i in 0..n {
                    g[[i, j]] = (2.0 * targets[i] * s / m - s * s / (m * m)) / nf;
                }
            }
        }
        FamilyKind::V2 { .. } => {
            for j in 0..k {
                if !live[j] {
                    continue;
                }
                let m = stats.totals[j];
                for i in 0..n {
                    let c = class_label(spec, targets[i])?;
                    let p = (stats.class_mass[j][c] / m).max(1e-12);
                    g[[i, j]] = p.ln() / nf;
                }
            }
        }
    }
    // U only matters along directions that keep row sums fixed, so remove
    // the common per-row offset. Projected updates are unchanged (Euclidean
    // simplex projection absorbs per-row constants) and the derivative of
    // the K = 1 case, constant on its feasible line, becomes exactly zero.
    // When a column is floored its entries must stay zero, so the offset is
    // only removed while every column is live.
    if live.iter().all(|&l| l) {
        for mut row in g.rows_mut() {
            let mean = row.sum() / k as f64;
            row.mapv_inplace(|v| v - mean);
        }
    }
    Ok(g)
}

/// Derivative of [`regularizer`] along row-sum-preserving directions; see
/// the in-code note on the removed per-row offset.
pub fn regularizer_grad(
    spec: &FamilySpec,
    w: &AssignmentMatrix,
    targets: ArrayView1<f64>,
    mass_floor: Option<f64>,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if w.n() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} rows, targets {}",
            w.n(),
            targets.len()
        )));
    }
    regularizer_grad_raw(spec, w.matrix(), targets, mass_floor)
}

/// U rescaled so the objective J sits in nats and
/// `heterogeneity = pooled_conditional - J` holds exactly: V1 divides by
/// `2 sigma^2`, V2 adds the (W-independent) pooled label entropy.
fn u_nats(spec: &FamilySpec, w: &Array2<f64>, data: &Dataset, mass_floor: Option<f64>) -> Result<f64> {
    let u = regularizer_raw(spec, w, data.targets().view(), mass_floor)?;
    match spec.kind {
        FamilyKind::V1 { sigma } => Ok(u / (2.0 * sigma * sigma)),
        FamilyKind::V2 { .. } => {
            Ok(u + crate::vinfo::empirical_marginal_entropy(spec, data)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Objective and hypergradient
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperOptions {
    /// The inner fit the environments were trained with. Gradient descent
    /// required; alpha may be zero to study the degenerate unroll.
    pub inner: FitOptions,
    pub paper_literal: bool,
    pub mass_floor: Option<f64>,
}

fn inner_step(opts: &FitOptions) -> Result<(f64, usize)> {
    match opts.method {
        FitMethod::GradientDescent { alpha, steps } => {
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(Error::InvalidConfig(format!("inner alpha {alpha} must be finite and >= 0")));
            }
            Ok((alpha, steps))
        }
        FitMethod::ClosedForm => Err(Error::Unsupported(
            "the hypergradient unrolls one gradient step; closed-form inner fits have none".into(),
        )),
    }
}

fn objective_raw(
    spec: &FamilySpec,
    data: &Dataset,
    w: &Array2<f64>,
    params: &[Option<&ModelParams>],
    mass_floor: Option<f64>,
) -> Result<f64> {
    let (n, k) = w.dim();
    if params.len() != k {
        return Err(Error::DimensionMismatch(format!("{} fits for {k} environments", params.len())));
    }
    let mut ws = Workspace::default();
    let mut j_val = u_nats(spec, w, data, mass_floor)?;
    for (j, p) in params.iter().enumerate() {
        let Some(p) = p else { continue };
        for i in 0..n {
            if w[[i, j]] == 0.0 {
                continue;
            }
            let l = families::loss_ws(spec, &p.theta, data.features().row(i), data.targets()[i], &mut ws)?;
            j_val += w[[i, j]] * l / n as f64;
        }
    }
    Ok(j_val)
}

/// The search objective J at a given assignment and per-environment
/// parameters, in nats. `None` entries stand for skipped environments and
/// contribute only through U (where they contribute zero as well).
pub fn objective(
    spec: &FamilySpec,
    data: &Dataset,
    w: &AssignmentMatrix,
    params: &[Option<ModelParams>],
    mass_floor: Option<f64>,
) -> Result<f64> {
    let refs: Vec<Option<&ModelParams>> = params.iter().map(|p| p.as_ref()).collect();
    objective_raw(spec, data, w.matrix(), &refs, mass_floor)
}

/// J after fitting each environment from scratch with the truncated inner
/// fit. This is the exact function the hypergradient differentiates when
/// the inner fit takes a single step, which is what the finite-difference
/// oracle perturbs. Accepts a raw matrix so off-simplex probes are allowed.
pub fn unrolled_objective(
    spec: &FamilySpec,
    data: &Dataset,
    w: &Array2<f64>,
    opts: &HyperOptions,
) -> Result<f64> {
    let (alpha, steps) = inner_step(&opts.inner)?;
    let n = data.n();
    if w.nrows() != n {
        return Err(Error::DimensionMismatch(format!("assignment has {} rows, dataset {n}", w.nrows())));
    }
    let floor = floor_mass(opts.mass_floor, n);
    let mut fits: Vec<Option<ModelParams>> = Vec::with_capacity(w.ncols());
    let mut col = vec![0.0; n];
    for j in 0..w.ncols() {
        for (i, c) in col.iter_mut().enumerate() {
            *c = w[[i, j]];
        }
        let total: f64 = col.iter().sum();
        if total <= floor || total <= 0.0 {
            fits.push(None);
            continue;
        }
        let init = opts.inner.init_params(*spec);
        let fit = families::gd_steps(spec, data, &col, init.theta, alpha, steps, opts.inner.ridge, total)?;
        fits.push(Some(fit.params));
    }
    let refs: Vec<Option<&ModelParams>> = fits.iter().map(|p| p.as_ref()).collect();
    objective_raw(spec, data, w, &refs, opts.mass_floor)
}

/// Outer gradient of J with one-step truncated backpropagation through the
/// inner fits:
///
/// ```text
/// G = grad U  +  [loss(f_j(x_i), y_i)]_ij / N  +  T
/// T_ij = -alpha * < (1/N) sum_r w_rj grad loss_r(theta_j),
///                   grad loss_i(theta_j_prev) + ridge * theta_j_prev >
/// ```
///
/// using that the inner objective's cross derivative in `(theta_j, w_ij)`
/// is the per-sample gradient. `fits` must carry the last two inner
/// iterates; a `None` column contributes only its regularizer entries
/// (zero when floored).
pub fn hypergradient(
    spec: &FamilySpec,
    data: &Dataset,
    w: &AssignmentMatrix,
    fits: &[Option<TruncatedFit>],
    opts: &HyperOptions,
) -> Result<Array2<f64>> {
    let (alpha, _) = inner_step(&opts.inner)?;
    let (n, k) = (w.n(), w.k());
    if data.n() != n {
        return Err(Error::DimensionMismatch(format!("assignment has {n} rows, dataset {}", data.n())));
    }
    if fits.len() != k {
        return Err(Error::DimensionMismatch(format!("{} fits for {k} environments", fits.len())));
    }
    let nf = n as f64;
    let mut g = regularizer_grad(spec, w, data.targets().view(), opts.mass_floor)?;
    if let FamilyKind::V1 { sigma } = spec.kind {
        g.mapv_inplace(|v| v / (2.0 * sigma * sigma));
    }

    let mut ws = Workspace::default();
    let p_len = spec.param_len();
    let mut env_grad = vec![0.0; p_len];
    let mut sample_grad = vec![0.0; p_len];
    for (j, fit) in fits.iter().enumerate() {
        let Some(fit) = fit else { continue };
        // Weighted mean gradient at theta^t: dJ/dtheta_j.
        env_grad.fill(0.0);
        for i in 0..n {
            let wij = w.matrix()[[i, j]];
            if wij == 0.0 {
                continue;
            }
            families::grad_ws(
                spec,
                &fit.params.theta,
                data.features().row(i),
                data.targets()[i],
                wij / nf,
                &mut env_grad,
                &mut ws,
            )?;
        }
        for i in 0..n {
            let x = data.features().row(i);
            let y = data.targets()[i];
            let l = families::loss_ws(spec, &fit.params.theta, x, y, &mut ws)?;
            sample_grad.fill(0.0);
            families::grad_ws(spec, &fit.prev.theta, x, y, 1.0, &mut sample_grad, &mut ws)?;
            if opts.inner.ridge > 0.0 {
                for (s, t) in sample_grad.iter_mut().zip(&fit.prev.theta) {
                    *s += opts.inner.ridge * t;
                }
            }
            let dot: f64 = env_grad.iter().zip(&sample_grad).map(|(a, b)| a * b).sum();
            let truncated = if opts.paper_literal { dot } else { -alpha * dot };
            g[[i, j]] += l / nf + truncated;
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Simplex projection and hardening
// ---------------------------------------------------------------------------

/// Euclidean projection of every row onto the probability simplex, by the
/// sort-and-threshold rule: with the row sorted descending, find the
/// largest prefix whose running mean (shifted to sum 1) keeps the last
/// element positive, subtract that shift, clip the rest to zero.
///
/// Each row is first recentered on its own maximum. The projection is
/// invariant to that shift, but without it rows with entries past ~1e16
/// lose the `- 1` inside the threshold to rounding and every entry can
/// clip to zero. Recentred, the top entry is exactly 0 and the first
/// threshold test always passes.
pub fn project_simplex_rows(m: &Array2<f64>) -> Result<AssignmentMatrix> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cannot project a matrix with non-finite entries".into()));
    }
    let (n, k) = m.dim();
    let mut out = Array2::zeros((n, k));
    let mut sorted = vec![0.0; k];
    for i in 0..n {
        let top = m.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (s, &v) in sorted.iter_mut().zip(m.row(i)) {
            *s = v - top;
        }
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cum = 0.0;
        let mut tau = 0.0;
        for (r, &u) in sorted.iter().enumerate() {
            cum += u;
            let candidate = (cum - 1.0) / (r + 1) as f64;
            if u - candidate > 0.0 {
                tau = candidate;
            }
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(m.row(i)) {
            *o = (v - top - tau).max(0.0);
        }
    }
    AssignmentMatrix::new(out)
}

/// Coordinate ascent on the heterogeneity score over hard assignments:
/// alternate convergence-quality per-environment fits with reassigning every
/// row to the environment whose fit gives it the smallest loss, until the
/// labels stop changing or `max_rounds` passes elapse.
///
/// Reassignment ignores the label-marginal part of the score on purpose.
/// Scoring rows by `constant_loss - model_loss` chases rows whose targets sit
/// far from an environment's running mean, and the alternation then locks
/// onto splits of the target values rather than of the prediction mechanism.
/// Conditional loss alone steers toward mechanism splits; the marginal term
/// is still honored because every candidate labeling is scored with the full
/// evaluation and the best one seen is what comes back.
///
/// Useful as a cheap amplifier behind [`run_im`]: the gradient search is
/// good at shaping soft weights but can stall in shallow basins, and a few
/// of these passes from its hardened labels (or from random restarts) often
/// land measurably higher.
pub fn refine_labels(
    spec: &FamilySpec,
    data: &Dataset,
    init: &[usize],
    k: usize,
    opts: &EvalOptions,
    max_rounds: usize,
) -> Result<(Vec<usize>, HeterogeneityReport)> {
    if k < 2 {
        return Err(Error::InvalidConfig("refinement needs K >= 2".into()));
    }
    if init.len() != data.n() {
        return Err(Error::InvalidConfig(format!(
            "got {} labels for {} rows",
            init.len(),
            data.n()
        )));
    }
    if max_rounds == 0 {
        return Err(Error::InvalidConfig("max_rounds must be at least 1".into()));
    }

    let mut labels = init.to_vec();
    let mut best: Option<(Vec<usize>, HeterogeneityReport)> = None;
    for _ in 0..=max_rounds {
        let w = AssignmentMatrix::from_hard_labels(&labels, k)?;
        let rep = evaluate_heterogeneity(spec, data, &w, opts)?;
        let improved = best.as_ref().map_or(true, |(_, b)| rep.heterogeneity > b.heterogeneity);
        if improved {
            best = Some((labels.clone(), rep.clone()));
        }
        if rep.per_env_params.iter().all(Option::is_none) {
            break;
        }
        let mut changed = 0usize;
        for i in 0..data.n() {
            let x = data.features().row(i);
            let y = data.targets()[i];
            let mut arg = labels[i];
            let mut lowest = f64::INFINITY;
            for (e, params) in rep.per_env_params.iter().enumerate() {
                if let Some(params) = params {
                    let l = families::loss(params, x, y)?;
                    if l < lowest {
                        lowest = l;
                        arg = e;
                    }
                }
            }
            if arg != labels[i] {
                changed += 1;
                labels[i] = arg;
            }
        }
        if changed == 0 {
            break;
        }
    }
    Ok(best.expect("at least one labeling was evaluated"))
}

/// Row-wise argmax; ties resolve by the configured rule. Hard labels for
/// downstream trainers that need disjoint environments.
pub fn harden(w: &AssignmentMatrix, tie_break: TieBreak) -> Vec<usize> {
    let TieBreak::LowestIndex = tie_break;
    w.matrix()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The outer loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    /// J at the current W and its truncated fits.
    pub objective: f64,
    /// Heterogeneity from a full evaluation; only sampled every
    /// `eval_every` iterations.
    pub heterogeneity: Option<f64>,
    pub env_masses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct IMResult {
    pub assignment: AssignmentMatrix,
    pub report: HeterogeneityReport,
    pub trace: Vec<TracePoint>,
}

fn init_w(cfg: &IMConfig, n: usize) -> Result<AssignmentMatrix> {
    match &cfg.init {
        InitW::UniformNoise { seed, scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut w = Array2::zeros((n, cfg.k));
            let mut draws = vec![0.0; cfg.k];
            for i in 0..n {
                let mut sum = 0.0;
                for d in draws.iter_mut() {
                    *d = -(1.0 - rng.random::<f64>()).ln();
                    sum += *d;
                }
                for (j, &d) in draws.iter().enumerate() {
                    w[[i, j]] = (1.0 - scale) / cfg.k as f64 + scale * d / sum;
                }
            }
            AssignmentMatrix::new(w)
        }
        InitW::FromLabels(labels) => AssignmentMatrix::from_hard_labels(labels, cfg.k),
    }
}

fn diverged(iter: usize, trace: &[TracePoint]) -> Error {
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(5)
        .map(|t| format!("iter {}: J = {:.6e}", t.iter, t.objective))
        .collect();
    Error::Diverged(format!(
        "objective became non-finite at outer iteration {iter}; reduce outer_lr or inner alpha (recent trace: {})",
        tail.join(", ")
    ))
}

/// Run the full search. Returns the best-seen assignment (by fully
/// evaluated heterogeneity), its report, and the per-iteration trace. The
/// uniform assignment is always evaluated first, so the reported score is
/// never below zero.
pub fn run_im(spec: &FamilySpec, data: &Dataset, cfg: &IMConfig) -> Result<IMResult> {
    spec.validate()?;
    cfg.validate(data.n())?;
    let (alpha, steps) = inner_step(&cfg.inner)?;
    let n = data.n();
    let report_opts = cfg.report.with_mass_floor(cfg.mass_floor);
    let hyper_opts = HyperOptions {
        inner: cfg.inner,
        paper_literal: cfg.paper_literal_hypergradient,
        mass_floor: cfg.mass_floor,
    };
    let floor = floor_mass(cfg.mass_floor, n);

    let uniform = AssignmentMatrix::uniform(n, cfg.k)?;
    let mut best_w = uniform.clone();
    let mut best_report = evaluate_heterogeneity(spec, data, &uniform, &report_opts)?;

    let mut w = init_w(cfg, n)?;
    let mut warm: Vec<Vec<f64>> = (0..cfg.k).map(|_| cfg.inner.init_params(*spec).theta).collect();
    let mut trace: Vec<TracePoint> = Vec::with_capacity(cfg.outer_iters);
    let mut col = vec![0.0; n];

    for iter in 0..cfg.outer_iters {
        let mut fits: Vec<Option<TruncatedFit>> = Vec::with_capacity(cfg.k);
        for j in 0..cfg.k {
            for (i, c) in col.iter_mut().enumerate() {
                *c = w.matrix()[[i, j]];
            }
            let total: f64 = col.iter().sum();
            if total <= floor || total <= 0.0 {
                fits.push(None);
                continue;
            }
            let fit = families::gd_steps(
                spec,
                data,
                &col,
                warm[j].clone(),
                alpha,
                steps,
                cfg.inner.ridge,
                total,
            )
            .map_err(|_| diverged(iter, &trace))?;
            warm[j] = fit.params.theta.clone();
            fits.push(Some(fit));
        }

        let refs: Vec<Option<&ModelParams>> =
            fits.iter().map(|f| f.as_ref().map(|f| &f.params)).collect();
        let objective = objective_raw(spec, data, w.matrix(), &refs, cfg.mass_floor)?;
        if !objective.is_finite() {
            return Err(diverged(iter, &trace));
        }

        let heterogeneity = if iter % cfg.eval_every == 0 {
            let report = evaluate_heterogeneity(spec, data, &w, &report_opts)?;
            let h = report.heterogeneity;
            if h > best_report.heterogeneity {
                best_w = w.clone();
                best_report = report;
            }
            Some(h)
        } else {
            None
        };
        trace.push(TracePoint { iter, objective, heterogeneity, env_masses: w.masses() });

        let grad = hypergradient(spec, data, &w, &fits, &hyper_opts)?;
        let stepped = w.matrix() - &grad.mapv(|v| v * cfg.outer_lr);
        w = project_simplex_rows(&stepped)?;
    }

    let final_report = evaluate_heterogeneity(spec, data, &w, &report_opts)?;
    if final_report.heterogeneity > best_report.heterogeneity {
        best_w = w;
        best_report = final_report;
    }
    Ok(IMResult { assignment: best_w, report: best_report, trace })
}

// ---------------------------------------------------------------------------
// K selection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct KSweepEntry {
    pub k: usize,
    pub assignment: AssignmentMatrix,
    pub report: HeterogeneityReport,
}

#[derive(Clone, Debug)]
pub struct KSweep {
    /// One entry per candidate K, ascending.
    pub entries: Vec<KSweepEntry>,
    /// The K after which the score gain fell below `elbow_ratio` times the
    /// previous gain, if any: the smallest K worth stopping at.
    pub elbow: Option<usize>,
}

/// Flag the first K whose following gain collapses relative to the gain
/// that led to it.
fn pick_elbow(ks: &[usize], scores: &[f64], ratio: f64) -> Option<usize> {
    for i in 1..ks.len().saturating_sub(1) {
        let prev_gain = scores[i] - scores[i - 1];
        let next_gain = scores[i + 1] - scores[i];
        if prev_gain > 0.0 && next_gain < ratio * prev_gain {
            return Some(ks[i]);
        }
    }
    None
}

/// Run the search once per candidate K. Each K derives its own noise seed
/// (`base + K`) so runs stay independent but reproducible.
pub fn sweep_k(
    spec: &FamilySpec,
    data: &Dataset,
    ks: &[usize],
    cfg: &IMConfig,
    elbow_ratio: f64,
) -> Result<KSweep> {
    if ks.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one candidate K".into()));
    }
    if !(elbow_ratio > 0.0 && elbow_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("elbow ratio {elbow_ratio} must lie in (0, 1)")));
    }
    let InitW::UniformNoise { seed, scale } = cfg.init else {
        return Err(Error::InvalidConfig(
            "sweeping K needs the noise initializer; fixed labels pin a single K".into(),
        ));
    };
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks[0] < 2 {
        return Err(Error::InvalidConfig("every candidate K must be at least 2".into()));
    }

    let mut entries = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut cfg_k = cfg.clone();
        cfg_k.k = k;
        cfg_k.init = InitW::UniformNoise { seed: seed + k as u64, scale };
        let result = run_im(spec, data, &cfg_k)?;
        entries.push(KSweepEntry { k, assignment: result.assignment, report: result.report });
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.report.heterogeneity).collect();
    let elbow = pick_elbow(&ks, &scores, elbow_ratio);
    Ok(KSweep { entries, elbow })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TaskKind;
    use crate::families::HALF_LN_2PI;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn regression(xs: &[f64], ys: &[f64]) -> Dataset {
        let x = Array2::from_shape_fn((xs.len(), 1), |(i, _)| xs[i]);
        Dataset::new(x, Array1::from_vec(ys.to_vec()), TaskKind::Regression, None).unwrap()
    }

    fn four_points() -> Dataset {
        regression(&[1.0, 2.0, 1.0, 2.0], &[1.0, 2.0, -1.0, -2.0])
    }

    // --------------------------------------------------------- regularizer

    #[test]
    fn v1_regularizer_frozen_values() {
        let spec = FamilySpec::v1_linear(1);
        let y = array![0.0, 2.0];
        let single = AssignmentMatrix::uniform(2, 1).unwrap();
        assert_eq!(regularizer(&spec, &single, y.view(), None).unwrap(), 0.0);

        let split = AssignmentMatrix::from_hard_labels(&[0, 1], 2).unwrap();
        let u = regularizer(&spec, &split, y.view(), None).unwrap();
        assert!((u - 1.0).abs() < 1e-15, "u = {u}");
    }

    #[test]
    fn v2_regularizer_frozen_values() {
        let spec = FamilySpec::v2_linear(1, 2);
        let y = array![0.0, 0.0, 1.0, 1.0];
        let by_label = AssignmentMatrix::from_hard_labels(&[0, 0, 1, 1], 2).unwrap();
        assert_eq!(regularizer(&spec, &by_label, y.view(), None).unwrap(), 0.0);

        let single = AssignmentMatrix::uniform(4, 1).unwrap();
        let u = regularizer(&spec, &single, y.view(), None).unwrap();
        assert!((u + 2.0f64.ln()).abs() < 1e-15, "u = {u}");
    }

    #[test]
    fn regularizer_grad_is_zero_for_a_single_environment() {
        let spec = FamilySpec::v1_linear(1);
        let y = array![1.0, -2.0, 0.5];
        let w = AssignmentMatrix::uniform(3, 1).unwrap();
        let g = regularizer_grad(&spec, &w, y.view(), None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_grad_vanishes_at_the_uniform_assignment() {
        // Uniform W is stationary for the projected problem; the tangent
        // gradient there is exactly zero, hence orthogonal to every
        // row-sum-preserving direction.
        let y = array![1.0, -2.0, 0.5, 3.0];
        let w = AssignmentMatrix::uniform(4, 3).unwrap();
        let g1 = regularizer_grad(&FamilySpec::v1_linear(1), &w, y.view(), None).unwrap();
        assert!(g1.iter().all(|&v| v.abs() < 1e-15), "{g1:?}");

        let labels = array![0.0, 1.0, 0.0, 1.0];
        let g2 = regularizer_grad(&FamilySpec::v2_linear(1, 2), &w, labels.view(), None).unwrap();
        assert!(g2.iter().all(|&v| v.abs() < 1e-15), "{g2:?}");
    }

    fn fd_check_regularizer(spec: &FamilySpec, w: &AssignmentMatrix, y: &Array1<f64>) {
        let g = regularizer_grad(spec, w, y.view(), None).unwrap();
        let h = 1e-6;
        for i in 0..w.n() {
            for j in 0..w.k() {
                let jn = (j + 1) % w.k();
                let mut plus = w.matrix().clone();
                plus[[i, j]] += h;
                plus[[i, jn]] -= h;
                let mut minus = w.matrix().clone();
                minus[[i, j]] -= h;
                minus[[i, jn]] += h;
                let up = regularizer_raw(spec, &plus, y.view(), None).unwrap();
                let um = regularizer_raw(spec, &minus, y.view(), None).unwrap();
                let fd = (up - um) / (2.0 * h);
                let an = g[[i, j]] - g[[i, jn]];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "({i},{j}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let w = AssignmentMatrix::new(array![
            [0.6, 0.3, 0.1],
            [0.2, 0.5, 0.3],
            [0.4, 0.2, 0.4],
            [0.3, 0.3, 0.4],
            [0.25, 0.5, 0.25],
        ])
        .unwrap();
        let y = array![1.5, -0.5, 2.0, 0.0, -1.0];
        fd_check_regularizer(&FamilySpec::v1_linear(1), &w, &y);
        let labels = array![0.0, 1.0, 1.0, 0.0, 1.0];
        fd_check_regularizer(&FamilySpec::v2_linear(1, 2), &w, &labels);
    }

    #[test]
    fn floored_environments_drop_out_of_the_regularizer() {
        let spec = FamilySpec::v1_linear(1);
        let eps = 1e-5;
        let w = AssignmentMatrix::new(array![[1.0 - eps, eps], [1.0 - eps, eps]]).unwrap();
        let y = array![0.0, 2.0];
        let floored = regularizer(&spec, &w, y.view(), Some(DEFAULT_MASS_FLOOR)).unwrap();
        let open = regularizer(&spec, &w, y.view(), None).unwrap();
        assert!(floored < open, "dropping the tiny env loses its mean term");
        let g = regularizer_grad(&spec, &w, y.view(), Some(DEFAULT_MASS_FLOOR)).unwrap();
        assert!(g.column(1).iter().all(|&v| v == 0.0));
    }

    // -------------------------------------------------------- hypergradient

    #[test]
    fn hypergradient_reduces_to_loss_terms_when_inner_gradients_vanish() {
        // theta interpolates the data exactly, so the per-sample inner
        // gradients at prev are zero and the truncated term drops out.
        let data = regression(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]);
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let exact = ModelParams::new(spec, vec![2.0]).unwrap();
        let fits = vec![
            Some(TruncatedFit { params: exact.clone(), prev: exact.clone() }),
            Some(TruncatedFit { params: exact.clone(), prev: exact.clone() }),
        ];
        let w = AssignmentMatrix::new(array![
            [0.7, 0.3],
            [0.4, 0.6],
            [0.5, 0.5],
            [0.2, 0.8],
        ])
        .unwrap();
        let opts = HyperOptions {
            inner: FitOptions::gradient_descent(0.1, 1).with_ridge(0.0),
            paper_literal: false,
            mass_floor: None,
        };
        let g = hypergradient(&spec, &data, &w, &fits, &opts).unwrap();
        let base = regularizer_grad(&spec, &w, data.targets().view(), None).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let expected = base[[i, j]] / 2.0 + HALF_LN_2PI / 4.0;
                assert!((g[[i, j]] - expected).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_inner_alpha_erases_the_truncated_term() {
        let data = four_points();
        let spec = FamilySpec::v1_linear(1);
        let opts = FitOptions {
            method: FitMethod::GradientDescent { alpha: 0.0, steps: 1 },
            ridge: 0.0,
            init: ParamInit::Zeros,
        };
        let w = AssignmentMatrix::uniform(4, 2).unwrap();
        let zeros = ModelParams::zeros(spec);
        let fits = vec![
            Some(TruncatedFit { params: zeros.clone(), prev: zeros.clone() }),
            Some(TruncatedFit { params: zeros.clone(), prev: zeros.clone() }),
        ];
        let hyper = HyperOptions { inner: opts, paper_literal: false, mass_floor: None };
        let g = hypergradient(&spec, &data, &w, &fits, &hyper).unwrap();

        let base = regularizer_grad(&spec, &w, data.targets().view(), None).unwrap();
        let mut ws = Workspace::default();
        for i in 0..4 {
            for j in 0..2 {
                let l = families::loss_ws(
                    &spec,
                    &zeros.theta,
                    data.features().row(i),
                    data.targets()[i],
                    &mut ws,
                )
                .unwrap();
                let expected = base[[i, j]] / 2.0 + l / 4.0;
                assert!((g[[i, j]] - expected).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn hypergradient_rejects_closed_form_inner_fits() {
        let data = four_points();
        let spec = FamilySpec::v1_linear(1);
        let w = AssignmentMatrix::uniform(4, 2).unwrap();
        let opts =
            HyperOptions { inner: FitOptions::closed_form(), paper_literal: false, mass_floor: None };
        let err = hypergradient(&spec, &data, &w, &[None, None], &opts).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    // ----------------------------------------------------------- projection

    #[test]
    fn projection_frozen_examples() {
        let p = project_simplex_rows(&array![[1.2, 0.3]]).unwrap();
        assert!((p.matrix()[[0, 0]] - 0.95).abs() < 1e-12);
        assert!((p.matrix()[[0, 1]] - 0.05).abs() < 1e-12);

        let p = project_simplex_rows(&array![[-1.0, -1.0, 5.0]]).unwrap();
        assert_eq!(p.matrix().row(0).to_vec(), vec![0.0, 0.0, 1.0]);

        let on = array![[0.25, 0.75]];
        let p = project_simplex_rows(&on).unwrap();
        assert!((p.matrix()[[0, 0]] - 0.25).abs() < 1e-12, "already on the simplex");
    }

    #[test]
    fn projection_survives_extreme_magnitudes() {
        // Entries big enough that `x - 1.0 == x` in f64. A runaway outer
        // step produces rows like these; the projection must still return
        // valid simplex rows (the vertex nearest the largest entry, or
        // uniform over ties) instead of clipping everything to zero.
        let m = array![
            [-1e20, -1e20],
            [1e20, 1e20],
            [2e19, -2e19],
            [f64::MIN, f64::MAX],
        ];
        let p = project_simplex_rows(&m).unwrap();
        assert_eq!(p.matrix().row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(p.matrix().row(1).to_vec(), vec![0.5, 0.5]);
        assert_eq!(p.matrix().row(2).to_vec(), vec![1.0, 0.0]);
        assert_eq!(p.matrix().row(3).to_vec(), vec![0.0, 1.0]);

        let wide = project_simplex_rows(&array![[-3e18, -4e18, -5e18]]).unwrap();
        assert_eq!(wide.matrix().row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn projection_is_idempotent_nonexpansive_and_valid(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let ma = Array2::from_shape_vec((2, 2), a).unwrap();
            let mb = Array2::from_shape_vec((2, 2), b).unwrap();
            let pa = project_simplex_rows(&ma).unwrap();
            let pb = project_simplex_rows(&mb).unwrap();
            // Output satisfies the assignment invariants by construction
            // (the constructor validates).
            let twice = project_simplex_rows(pa.matrix()).unwrap();
            for (x, y) in pa.matrix().iter().zip(twice.matrix()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let d_in: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
            let d_out: f64 = pa.matrix().iter().zip(pb.matrix()).map(|(x, y)| (x - y) * (x - y)).sum();
            prop_assert!(d_out <= d_in + 1e-12);
        }
    }

    // ------------------------------------------------ objective consistency

    #[test]
    fn heterogeneity_equals_pooled_conditional_minus_objective_v1() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let w = AssignmentMatrix::from_hard_labels(&[0, 0, 1, 1], 2).unwrap();
        let opts = EvalOptions {
            fit: FitOptions::closed_form().with_ridge(0.0),
            mass_floor: None,
        };
        let report = evaluate_heterogeneity(&spec, &data, &w, &opts).unwrap();
        let j = objective(&spec, &data, &w, &report.per_env_params, None).unwrap();
        assert!(
            ((report.conditional_entropy - j) - report.heterogeneity).abs() < 1e-8,
            "identity off by {}",
            ((report.conditional_entropy - j) - report.heterogeneity).abs()
        );
    }

    #[test]
    fn heterogeneity_equals_pooled_conditional_minus_objective_v2() {
        let x = array![[1.0], [2.0], [-1.0], [-2.0], [1.5], [-1.5]];
        let y = array![0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let data = Dataset::new(x, y, TaskKind::Classification { classes: 2 }, None).unwrap();
        let spec = FamilySpec::v2_linear(1, 2);
        let w = AssignmentMatrix::from_hard_labels(&[0, 0, 1, 1, 0, 1], 2).unwrap();
        let opts = EvalOptions {
            fit: FitOptions::gradient_descent(0.5, 1200),
            mass_floor: None,
        };
        let report = evaluate_heterogeneity(&spec, &data, &w, &opts).unwrap();
        let j = objective(&spec, &data, &w, &report.per_env_params, None).unwrap();
        assert!(
            ((report.conditional_entropy - j) - report.heterogeneity).abs() < 1e-8,
            "identity off by {}",
            ((report.conditional_entropy - j) - report.heterogeneity).abs()
        );
    }

    // ------------------------------------------------------------- run_im

    fn small_cfg(spec: &FamilySpec) -> IMConfig {
        let mut cfg = IMConfig::defaults(spec, 2, 4);
        cfg.outer_lr = 0.3;
        cfg.outer_iters = 120;
        cfg.inner = FitOptions::gradient_descent(0.05, 10);
        cfg.eval_every = 5;
        cfg.mass_floor = None;
        cfg.report = EvalOptions { fit: FitOptions::closed_form(), mass_floor: None };
        cfg
    }

    #[test]
    fn run_im_finds_structure_in_the_four_point_instance() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let cfg = small_cfg(&spec);
        let result = run_im(&spec, &data, &cfg).unwrap();
        assert!(
            result.report.heterogeneity >= 0.125 - 1e-9,
            "found {}",
            result.report.heterogeneity
        );
        assert!(result.trace.len() == cfg.outer_iters);
        assert!(result.trace.iter().all(|t| t.objective.is_finite()));
    }

    #[test]
    fn run_im_reports_the_best_seen_iterate_and_never_below_zero() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let cfg = small_cfg(&spec);
        let result = run_im(&spec, &data, &cfg).unwrap();
        assert!(result.report.heterogeneity >= 0.0, "uniform baseline is always a candidate");
        let best_on_trace = result
            .trace
            .iter()
            .filter_map(|t| t.heterogeneity)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            result.report.heterogeneity >= best_on_trace - 1e-12,
            "returned {} but trace saw {best_on_trace}",
            result.report.heterogeneity
        );
    }

    #[test]
    fn run_im_is_deterministic() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let cfg = small_cfg(&spec);
        let a = run_im(&spec, &data, &cfg).unwrap();
        let b = run_im(&spec, &data, &cfg).unwrap();
        assert_eq!(a.report.heterogeneity, b.report.heterogeneity);
        assert_eq!(a.assignment.matrix(), b.assignment.matrix());
        let oa: Vec<f64> = a.trace.iter().map(|t| t.objective).collect();
        let ob: Vec<f64> = b.trace.iter().map(|t| t.objective).collect();
        assert_eq!(oa, ob);
    }

    #[test]
    fn run_im_validates_its_config() {
        let data = four_points();
        let spec = FamilySpec::v1_linear(1);
        let mut cfg = IMConfig::defaults(&spec, 2, 4);
        cfg.k = 1;
        assert!(run_im(&spec, &data, &cfg).is_err());
        let mut cfg = IMConfig::defaults(&spec, 2, 4);
        cfg.inner = FitOptions::closed_form();
        assert!(matches!(run_im(&spec, &data, &cfg), Err(Error::Unsupported(_))));
        let cfg = IMConfig::defaults(&spec, 5, 4);
        assert!(run_im(&spec, &data, &cfg).is_err(), "5 environments for 4 rows");
    }

    // ------------------------------------------------------------ hardening

    #[test]
    fn harden_rows_and_ties() {
        let w = AssignmentMatrix::new(array![[0.7, 0.3], [0.5, 0.5], [0.1, 0.9]]).unwrap();
        assert_eq!(harden(&w, TieBreak::LowestIndex), vec![0, 0, 1]);
    }

    #[test]
    fn harden_is_equivariant_under_column_permutation_without_ties() {
        let w = AssignmentMatrix::new(array![[0.7, 0.3], [0.2, 0.8], [0.4, 0.6]]).unwrap();
        let swapped = AssignmentMatrix::new(array![[0.3, 0.7], [0.8, 0.2], [0.6, 0.4]]).unwrap();
        let base = harden(&w, TieBreak::LowestIndex);
        let flipped = harden(&swapped, TieBreak::LowestIndex);
        let remapped: Vec<usize> = flipped.iter().map(|&l| 1 - l).collect();
        assert_eq!(base, remapped);
    }

    // ------------------------------------------------------------ refinement

    #[test]
    fn refinement_separates_two_slopes_from_a_mixed_start() {
        // Two noiseless mechanisms y = x and y = -x over the same xs. From a
        // half-and-half mixed labeling the per-env fits land at slopes -1/3
        // and +1/3, one reassignment pass sorts every point by sign, and the
        // refits are then exact. At that labeling each environment's
        // conditional loss is the bare entropy constant and its mean sits at
        // +-2.5, so the score is the marginal gain alone:
        // mean((y_e - mean_e)^2) / 2 = 1.25 / 2 = 0.625 nats.
        let data = regression(
            &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
            &[1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0],
        );
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let opts = EvalOptions::for_spec(&spec).with_mass_floor(None);
        let (labels, rep) =
            refine_labels(&spec, &data, &[0, 1, 0, 1, 1, 0, 1, 0], 2, &opts, 25).unwrap();
        assert!((rep.heterogeneity - 0.625).abs() < 1e-9, "got {}", rep.heterogeneity);
        let sorted = vec![labels[0]; 4];
        let mut expect = sorted.clone();
        expect.extend(vec![1 - labels[0]; 4]);
        assert_eq!(labels, expect, "points grouped by mechanism");
    }

    #[test]
    fn refinement_is_stable_at_the_optimum() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let opts = EvalOptions::for_spec(&spec).with_mass_floor(None);
        let (labels, rep) = refine_labels(&spec, &data, &[0, 1, 1, 0], 2, &opts, 25).unwrap();
        assert_eq!(labels, vec![0, 1, 1, 0]);
        assert!((rep.heterogeneity - 0.325).abs() < 1e-9);
    }

    #[test]
    fn refinement_never_scores_below_its_starting_labels() {
        let data = regression(&[1.0, 2.0, 3.0, -1.0, -2.0, 0.5], &[2.0, 3.9, 6.3, 1.1, 2.2, -0.4]);
        let spec = FamilySpec::v1_linear(1);
        let opts = EvalOptions::for_spec(&spec).with_mass_floor(None);
        for init in [[0, 1, 0, 1, 0, 1], [1, 1, 0, 0, 1, 0], [0, 0, 0, 1, 1, 1]] {
            let w = AssignmentMatrix::from_hard_labels(&init, 2).unwrap();
            let before = evaluate_heterogeneity(&spec, &data, &w, &opts).unwrap().heterogeneity;
            let (_, rep) = refine_labels(&spec, &data, &init, 2, &opts, 10).unwrap();
            assert!(rep.heterogeneity >= before - 1e-12);
        }
    }

    #[test]
    fn refinement_tolerates_an_environment_draining() {
        // Labels start three ways but one environment fits everything; the
        // returned labeling may leave columns empty and still evaluates.
        let data = regression(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let opts = EvalOptions::for_spec(&spec).with_mass_floor(None);
        let (labels, rep) = refine_labels(&spec, &data, &[0, 1, 2, 0], 3, &opts, 25).unwrap();
        assert_eq!(labels.len(), 4);
        assert!(rep.heterogeneity.abs() < 1e-9, "identical slopes everywhere");
    }

    #[test]
    fn refinement_rejects_bad_inputs() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let opts = EvalOptions::for_spec(&spec);
        assert!(matches!(
            refine_labels(&spec, &data, &[0, 0, 1], 2, &opts, 10),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            refine_labels(&spec, &data, &[0, 0, 1, 1], 1, &opts, 10),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            refine_labels(&spec, &data, &[0, 0, 1, 1], 2, &opts, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(refine_labels(&spec, &data, &[0, 0, 2, 1], 2, &opts, 10).is_err());
    }

    // ---------------------------------------------------------------- sweeps

    #[test]
    fn sweeping_a_single_k_matches_a_direct_run() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let cfg = small_cfg(&spec);
        let sweep = sweep_k(&spec, &data, &[2], &cfg, 0.5).unwrap();
        assert_eq!(sweep.entries.len(), 1);
        assert!(sweep.elbow.is_none());

        let InitW::UniformNoise { seed, scale } = cfg.init else { unreachable!() };
        let mut derived = cfg.clone();
        derived.init = InitW::UniformNoise { seed: seed + 2, scale };
        let direct = run_im(&spec, &data, &derived).unwrap();
        assert_eq!(sweep.entries[0].report.heterogeneity, direct.report.heterogeneity);
    }

    #[test]
    fn elbow_flags_the_k_where_gains_collapse() {
        assert_eq!(pick_elbow(&[2, 3, 4, 5], &[0.1, 0.5, 0.9, 0.92], 0.5), Some(4));
        assert_eq!(pick_elbow(&[2, 3, 4], &[0.1, 0.2, 0.3], 0.5), None, "steady gains");
        assert_eq!(pick_elbow(&[2, 3, 4], &[0.1, 0.5, 0.51], 0.5), Some(3));
        assert_eq!(pick_elbow(&[2, 3], &[0.1, 0.5], 0.5), None, "too short");
    }

    #[test]
    fn sweep_validates_inputs() {
        let data = four_points();
        let spec = FamilySpec::v1_linear_no_intercept(1);
        let cfg = small_cfg(&spec);
        assert!(sweep_k(&spec, &data, &[], &cfg, 0.5).is_err());
        assert!(sweep_k(&spec, &data, &[1, 2], &cfg, 0.5).is_err());
        assert!(sweep_k(&spec, &data, &[2], &cfg, 1.5).is_err());
        let mut labeled = cfg.clone();
        labeled.init = InitW::FromLabels(vec![0, 1, 0, 1]);
        assert!(sweep_k(&spec, &data, &[2], &labeled, 0.5).is_err());
    }
}
