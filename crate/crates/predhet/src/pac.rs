//! Finite-sample deviation bound for the heterogeneity score, and a
//! Monte-Carlo estimate of the Rademacher complexity that feeds it.
//!
//! The bound says: with probability at least `1 - 2(K+1) delta`, the
//! population score and the empirical score computed from `N` samples differ
//! by at most `4(K+1) R + 2(K+1) B sqrt(2 ln(1/delta) / N)`, where `R` is the
//! Rademacher complexity of the class of functions
//! `g(x, y) = log f[x](y) * q(E = e | x, y)` (a family log-density gated by an
//! environment posterior) and `B` bounds those log-densities.
//!
//! No constants for `R` are available in general, so [`bound_value`] reports
//! the bound but nothing in this crate asserts it is tight. The estimator
//! [`empirical_rademacher`] replaces the sup over the class by gradient
//! ascent, which makes it a heuristic, not a certificate; the closed-form
//! classes in [`FunctionClass`] exist to test that estimator against answers
//! we can compute exactly.

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::families::{self, FamilySpec, FitMethod, FitOptions, ModelParams, ParamInit};

// ---------------------------------------------------------------------------
// The deviation bound
// ---------------------------------------------------------------------------

/// Inputs to [`bound_value`]. `delta` is the per-event confidence parameter;
/// the bound then holds with probability `1 - 2(k+1) delta`, which is why
/// only `delta < 1/(2k+2)` is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Uniform bound on the family's log-densities, in nats. Zero is allowed
    /// (it collapses the concentration term) even though it describes a
    /// degenerate family.
    pub b: f64,
    /// Environment count K.
    pub k: usize,
    pub delta: f64,
    /// Sample count N.
    pub n: usize,
    /// Rademacher complexity estimate, e.g. from [`empirical_rademacher`].
    pub rademacher: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() || self.b < 0.0 {
            return Err(Error::InvalidConfig("log-density bound b must be finite and >= 0".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("environment count k must be at least 1".into()));
        }
        let cap = 1.0 / (2.0 * self.k as f64 + 2.0);
        if !(self.delta > 0.0 && self.delta < cap) {
            return Err(Error::InvalidConfig(format!(
                "delta = {} outside (0, {cap}) for k = {}",
                self.delta, self.k
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("sample count n must be at least 1".into()));
        }
        if !self.rademacher.is_finite() || self.rademacher < 0.0 {
            return Err(Error::InvalidConfig("rademacher estimate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Right-hand side of the deviation bound:
/// `4(K+1) R + 2(K+1) B sqrt(2 ln(1/delta) / N)`, in nats.
pub fn bound_value(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let kp = inputs.k as f64 + 1.0;
    let conc = (2.0 * (1.0 / inputs.delta).ln() / inputs.n as f64).sqrt();
    Ok(4.0 * kp * inputs.rademacher + 2.0 * kp * inputs.b * conc)
}

// ---------------------------------------------------------------------------
// Empirical Rademacher complexity
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate: mean over sign draws of the maximized correlation,
/// with the standard error of that mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Settings for [`empirical_rademacher`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherOptions {
    /// Log-densities are clamped to `[-b, b]` inside the correlation, matching
    /// the boundedness assumption of [`bound_value`].
    pub b: f64,
    /// Budget for the inner ascent. Must be gradient descent; there is no
    /// closed form for the gated correlation.
    pub ascent: FitOptions,
    /// Base seed; draw `i` uses an independent stream derived from it.
    pub seed: u64,
}

impl RademacherOptions {
    pub fn new(b: f64, ascent: FitOptions, seed: u64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidConfig("clip bound b must be finite and positive".into()));
        }
        if !matches!(ascent.method, FitMethod::GradientDescent { .. }) {
            return Err(Error::Unsupported(
                "rademacher ascent needs a gradient-descent budget".into(),
            ));
        }
        Ok(RademacherOptions { b, ascent, seed })
    }
}

fn sign_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64 + 1);
    rng
}

fn summarize(values: &[f64]) -> Result<RademacherEstimate> {
    let draws = values.len();
    let mean = values.iter().sum::<f64>() / draws as f64;
    let var = if draws > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws - 1) as f64
    } else {
        0.0
    };
    let std_error = (var / draws as f64).sqrt();
    if !mean.is_finite() || !std_error.is_finite() {
        return Err(Error::NonFinite("rademacher estimate".into()));
    }
    Ok(RademacherEstimate { mean, std_error, draws })
}

/// Estimate the Rademacher complexity of the gated log-density class built
/// from `spec`: draw a sign vector, run gradient ascent jointly over the
/// family parameters and a logistic gate on `(x, y)`, record the best
/// correlation seen, and average over `draws`.
///
/// The ascent makes no concavity claim, so the per-draw value is a lower
/// bound on the true sup and the whole estimate is a heuristic.
pub fn empirical_rademacher(
    spec: &FamilySpec,
    data: &Dataset,
    draws: usize,
    opts: &RademacherOptions,
) -> Result<RademacherEstimate> {
    if draws == 0 {
        return Err(Error::InvalidConfig("draws must be at least 1".into()));
    }
    let n = data.n();
    if n == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if data.features().ncols() != spec.d {
        return Err(Error::DimensionMismatch(format!(
            "data has {} features, spec expects {}",
            data.features().ncols(),
            spec.d
        )));
    }
    let FitMethod::GradientDescent { alpha, steps } = opts.ascent.method else {
        return Err(Error::Unsupported("rademacher ascent needs a gradient-descent budget".into()));
    };
    let mut values = Vec::with_capacity(draws);
    for i in 0..draws {
        let sigma = sign_vector(&mut draw_rng(opts.seed, i), n);
        values.push(gated_sup(spec, data, &sigma, opts.b, alpha, steps, opts.ascent.init)?);
    }
    summarize(&values)
}

/// One inner sup: maximize `(1/N) sum_i sigma_i clamp(log f[x_i](y_i)) q_i`
/// over the family parameters and a logistic gate `q_i` on `[x_i, y_i, 1]`.
fn gated_sup(
    spec: &FamilySpec,
    data: &Dataset,
    sigma: &[f64],
    b: f64,
    alpha: f64,
    steps: usize,
    init: ParamInit,
) -> Result<f64> {
    let n = data.n();
    let d = spec.d;
    let mut params = match init {
        ParamInit::Zeros => ModelParams::zeros(spec.clone()),
        ParamInit::Seeded { seed } => ModelParams::seeded(spec.clone(), seed),
    };
    let mut gate = vec![0.0f64; d + 2];

    let objective = |params: &ModelParams, gate: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for i in 0..n {
            let x = data.features().row(i);
            let y = data.targets()[i];
            let logf = (-families::loss(params, x, y)?).clamp(-b, b);
            total += sigma[i] * logf * gate_prob(gate, x, y);
        }
        Ok(total / n as f64)
    };

    let mut best = objective(&params, &gate)?;
    for _ in 0..steps {
        let mut g_theta = vec![0.0f64; params.theta.len()];
        let mut g_gate = vec![0.0f64; gate.len()];
        for i in 0..n {
            let x = data.features().row(i);
            let y = data.targets()[i];
            let logf = -families::loss(&params, x, y)?;
            let clipped = logf.clamp(-b, b);
            let q = gate_prob(&gate, x, y);
            let s = sigma[i] / n as f64;
            if logf.abs() < b {
                // d(logf)/d(theta) = -d(loss)/d(theta); zero once clamped.
                let gl = families::grad_params(&params, x, y)?;
                for (acc, gv) in g_theta.iter_mut().zip(&gl) {
                    *acc -= s * q * gv;
                }
            }
            let gq = s * clipped * q * (1.0 - q);
            for (j, acc) in g_gate.iter_mut().enumerate() {
                let z = match j.checked_sub(d) {
                    None => x[j],
                    Some(0) => y,
                    Some(_) => 1.0,
                };
                *acc += gq * z;
            }
        }
        for (t, g) in params.theta.iter_mut().zip(&g_theta) {
            *t += alpha * g;
        }
        for (t, g) in gate.iter_mut().zip(&g_gate) {
            *t += alpha * g;
        }
        let value = objective(&params, &gate)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("rademacher inner objective".into()));
        }
        if value > best {
            best = value;
        }
    }
    Ok(best)
}

fn gate_prob(gate: &[f64], x: ArrayView1<f64>, y: f64) -> f64 {
    let d = x.len();
    let mut z = gate[d] * y + gate[d + 1];
    for (g, xv) in gate.iter().zip(x.iter()) {
        z += g * xv;
    }
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Closed-form classes for testing the estimator
// ---------------------------------------------------------------------------

/// Function classes whose per-draw sup has a closed form. These are
/// measurement instruments for the Monte-Carlo machinery, not part of the
/// bound itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FunctionClass {
    /// A single fixed constant function. The correlation is `c * mean(sigma)`,
    /// which is centered, so the estimate must hover near zero.
    Singleton { value: f64 },
    /// Two constant functions `{+magnitude, -magnitude}`; the sup picks the
    /// sign of `sum(sigma)`.
    ConstantPair { magnitude: f64 },
    /// Linear functions of the first `dims` features with coefficient norm at
    /// most `radius`; the sup is `radius * ||mean of sigma_i x_i||`. Nested in
    /// `dims` on the same draws, which gives a monotonicity oracle.
    LinearBall { radius: f64, dims: usize },
}

/// Same Monte-Carlo loop as [`empirical_rademacher`], with the inner sup
/// evaluated exactly for the given class.
pub fn class_rademacher(
    class: &FunctionClass,
    data: &Dataset,
    draws: usize,
    seed: u64,
) -> Result<RademacherEstimate> {
    if draws == 0 {
        return Err(Error::InvalidConfig("draws must be at least 1".into()));
    }
    let n = data.n();
    if n == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if let FunctionClass::LinearBall { radius, dims } = class {
        if !(radius.is_finite() && *radius >= 0.0) {
            return Err(Error::InvalidConfig("radius must be finite and >= 0".into()));
        }
        if *dims == 0 || *dims > data.features().ncols() {
            return Err(Error::InvalidConfig(format!(
                "dims = {dims} outside 1..={}",
                data.features().ncols()
            )));
        }
    }
    let mut values = Vec::with_capacity(draws);
    for i in 0..draws {
        let sigma = sign_vector(&mut draw_rng(seed, i), n);
        let mean_sigma = sigma.iter().sum::<f64>() / n as f64;
        let value = match class {
            FunctionClass::Singleton { value } => value * mean_sigma,
            FunctionClass::ConstantPair { magnitude } => magnitude.abs() * mean_sigma.abs(),
            FunctionClass::LinearBall { radius, dims } => {
                let mut acc = vec![0.0f64; *dims];
                for (i, s) in sigma.iter().enumerate() {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a += s * data.features()[[i, j]];
                    }
                }
                let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt() / n as f64;
                radius * norm
            }
        };
        values.push(value);
    }
    summarize(&values)
}

/// Exact Rademacher complexity of the two-constant class on `n` points:
/// `magnitude * E|sum(sigma)| / n`, via the binomial distribution of the
/// number of +1 signs. Exact in f64 up to the guard, no sampling involved.
pub fn exact_constant_pair_rademacher(magnitude: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    if n > 50 {
        return Err(Error::TooLarge(format!("exact enumeration capped at n = 50, got {n}")));
    }
    // P(j heads) = C(n, j) / 2^n; |sum| = |2j - n|.
    let mut coef = 1.0f64; // C(n, 0)
    let mut expect = 0.0;
    for j in 0..=n {
        expect += coef * (2.0 * j as f64 - n as f64).abs();
        coef = coef * (n - j) as f64 / (j + 1) as f64;
    }
    Ok(magnitude.abs() * expect / 2f64.powi(n as i32) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_homogeneous;
    use proptest::prelude::*;

    fn inputs(b: f64, k: usize, delta: f64, n: usize, r: f64) -> BoundInputs {
        BoundInputs { b, k, delta, n, rademacher: r }
    }

    // ------------------------------------------------------------------
    // bound_value
    // ------------------------------------------------------------------

    #[test]
    fn zero_complexity_and_zero_b_give_zero() {
        let v = bound_value(&inputs(0.0, 2, 0.05, 100, 0.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn matches_hand_computed_value() {
        let v = bound_value(&inputs(1.0, 2, 0.05, 10_000, 0.01)).unwrap();
        let expected = 0.12 + 6.0 * (2.0 * 20f64.ln() / 10_000.0).sqrt();
        assert!((v - expected).abs() < 1e-12, "v = {v}");
        assert!((v - 0.2669).abs() < 5e-4, "v = {v}");
    }

    #[test]
    fn doubling_n_divides_the_concentration_term_by_sqrt_2() {
        let base = inputs(1.5, 3, 0.02, 500, 0.0);
        let v1 = bound_value(&base).unwrap();
        let v2 = bound_value(&BoundInputs { n: 1000, ..base }).unwrap();
        assert!((v1 / v2 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_delta() {
        // k = 2 caps delta at 1/6.
        assert!(bound_value(&inputs(1.0, 2, 1.0 / 6.0, 100, 0.0)).is_err());
        assert!(bound_value(&inputs(1.0, 2, 0.0, 100, 0.0)).is_err());
        assert!(bound_value(&inputs(1.0, 2, 0.16, 100, 0.0)).is_ok());
    }

    #[test]
    fn rejects_bad_scalars() {
        assert!(bound_value(&inputs(-1.0, 2, 0.05, 100, 0.0)).is_err());
        assert!(bound_value(&inputs(1.0, 0, 0.05, 100, 0.0)).is_err());
        assert!(bound_value(&inputs(1.0, 2, 0.05, 0, 0.0)).is_err());
        assert!(bound_value(&inputs(1.0, 2, 0.05, 100, -0.1)).is_err());
        assert!(bound_value(&inputs(1.0, 2, 0.05, 100, f64::NAN)).is_err());
    }

    proptest! {
        // Monotone up in b, k and rademacher; down in n and delta. Delta is
        // drawn valid for k + 1 so both sides of the k comparison accept it.
        #[test]
        fn bound_is_monotone_in_each_input(
            b in 0.01f64..5.0,
            k in 1usize..6,
            delta_frac in 0.05f64..0.95,
            n in 1usize..100_000,
            r in 0.0f64..2.0,
        ) {
            let delta = delta_frac / (2.0 * (k + 1) as f64 + 2.0);
            let base = inputs(b, k, delta, n, r);
            let v = bound_value(&base).unwrap();
            let up_b = bound_value(&BoundInputs { b: b + 0.5, ..base }).unwrap();
            let up_k = bound_value(&BoundInputs { k: k + 1, ..base }).unwrap();
            let up_r = bound_value(&BoundInputs { rademacher: r + 0.1, ..base }).unwrap();
            let up_n = bound_value(&BoundInputs { n: n * 2, ..base }).unwrap();
            let up_delta = bound_value(&BoundInputs { delta: delta * 1.05, ..base }).unwrap();
            prop_assert!(up_b >= v);
            prop_assert!(up_k > v);
            prop_assert!(up_r > v);
            prop_assert!(up_n <= v);
            prop_assert!(up_delta <= v);
        }
    }

    // ------------------------------------------------------------------
    // closed-form classes
    // ------------------------------------------------------------------

    #[test]
    fn singleton_estimate_is_statistically_zero() {
        let data = generate_homogeneous(40, 1.0, 0.5, 0).unwrap();
        let est = class_rademacher(&FunctionClass::Singleton { value: 2.0 }, &data, 200, 7).unwrap();
        assert!(est.std_error > 0.0);
        assert!(est.mean.abs() < 3.0 * est.std_error, "mean {} se {}", est.mean, est.std_error);
    }

    #[test]
    fn constant_pair_matches_exact_enumeration() {
        for n in [4usize, 9, 12] {
            let data = generate_homogeneous(n, 1.0, 0.5, 1).unwrap();
            let exact = exact_constant_pair_rademacher(1.5, n).unwrap();
            let est =
                class_rademacher(&FunctionClass::ConstantPair { magnitude: 1.5 }, &data, 4000, 11)
                    .unwrap();
            let rel = (est.mean - exact).abs() / exact;
            assert!(rel < 0.05, "n = {n}: exact {exact}, mc {}", est.mean);
        }
    }

    #[test]
    fn exact_enumeration_known_small_cases() {
        // n = 1: E|sigma| = 1. n = 2: mean of {2, 0, 0, 2} = 1.
        assert!((exact_constant_pair_rademacher(1.0, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((exact_constant_pair_rademacher(1.0, 2).unwrap() - 0.5).abs() < 1e-15);
        // n = 4: E|sum| = (2*4 + 8*2) / 16 = 1.5, divided by n.
        assert!((exact_constant_pair_rademacher(1.0, 4).unwrap() - 0.375).abs() < 1e-15);
        assert!(exact_constant_pair_rademacher(1.0, 51).is_err());
    }

    #[test]
    fn larger_linear_ball_never_scores_lower() {
        let data = generate_homogeneous(30, 1.0, 0.5, 2).unwrap();
        // Two columns: duplicate the single feature with a sign flip so dims
        // actually differ.
        let mut feats = ndarray::Array2::zeros((30, 2));
        for i in 0..30 {
            feats[[i, 0]] = data.features()[[i, 0]];
            feats[[i, 1]] = -2.0 * data.features()[[i, 0]] + (i as f64 / 30.0);
        }
        let wide = Dataset::new(feats, data.targets().to_owned(), data.task(), None).unwrap();
        let small =
            class_rademacher(&FunctionClass::LinearBall { radius: 1.0, dims: 1 }, &wide, 50, 3)
                .unwrap();
        let large =
            class_rademacher(&FunctionClass::LinearBall { radius: 1.0, dims: 2 }, &wide, 50, 3)
                .unwrap();
        assert!(large.mean >= small.mean, "large {} < small {}", large.mean, small.mean);
        // Radius scales the sup linearly, so doubling it doubles the mean.
        let scaled =
            class_rademacher(&FunctionClass::LinearBall { radius: 2.0, dims: 2 }, &wide, 50, 3)
                .unwrap();
        assert!((scaled.mean - 2.0 * large.mean).abs() < 1e-12);
    }

    #[test]
    fn class_estimator_rejects_bad_inputs() {
        let data = generate_homogeneous(10, 1.0, 0.5, 0).unwrap();
        let c = FunctionClass::Singleton { value: 1.0 };
        assert!(class_rademacher(&c, &data, 0, 0).is_err());
        let bad = FunctionClass::LinearBall { radius: 1.0, dims: 2 };
        assert!(class_rademacher(&bad, &data, 5, 0).is_err());
    }

    // ------------------------------------------------------------------
    // gated log-density estimator
    // ------------------------------------------------------------------

    fn ascent_opts(seed: u64) -> RademacherOptions {
        RademacherOptions::new(1.0, FitOptions::gradient_descent(0.1, 150), seed).unwrap()
    }

    #[test]
    fn gated_estimate_is_positive_and_shrinks_with_n() {
        let spec = FamilySpec::v1_linear(1);
        let small = generate_homogeneous(50, 1.0, 0.5, 5).unwrap();
        let large = generate_homogeneous(800, 1.0, 0.5, 5).unwrap();
        let opts = ascent_opts(9);
        let r_small = empirical_rademacher(&spec, &small, 20, &opts).unwrap();
        let r_large = empirical_rademacher(&spec, &large, 20, &opts).unwrap();
        assert!(r_small.mean > 0.0, "ascent found nothing on n = 50");
        assert!(
            r_small.mean > r_large.mean,
            "complexity should shrink with n: {} vs {}",
            r_small.mean,
            r_large.mean
        );
    }

    #[test]
    fn gated_estimate_never_exceeds_the_clip_bound() {
        // |g| <= b * 1, so no correlation can beat b.
        let spec = FamilySpec::v1_linear(1);
        let data = generate_homogeneous(30, 1.0, 0.5, 3).unwrap();
        let opts = ascent_opts(1);
        let est = empirical_rademacher(&spec, &data, 30, &opts).unwrap();
        assert!(est.mean <= opts.b + 1e-12);
    }

    #[test]
    fn gated_estimate_is_deterministic_in_the_seed() {
        let spec = FamilySpec::v1_linear(1);
        let data = generate_homogeneous(40, 1.0, 0.5, 4).unwrap();
        let a = empirical_rademacher(&spec, &data, 5, &ascent_opts(2)).unwrap();
        let b = empirical_rademacher(&spec, &data, 5, &ascent_opts(2)).unwrap();
        let c = empirical_rademacher(&spec, &data, 5, &ascent_opts(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gated_estimator_rejects_bad_inputs() {
        let spec = FamilySpec::v1_linear(1);
        let data = generate_homogeneous(10, 1.0, 0.5, 0).unwrap();
        assert!(empirical_rademacher(&spec, &data, 0, &ascent_opts(0)).is_err());
        assert!(RademacherOptions::new(0.0, FitOptions::gradient_descent(0.1, 10), 0).is_err());
        assert!(RademacherOptions::new(1.0, FitOptions::closed_form(), 0).is_err());
        let wide = FamilySpec::v1_linear(3);
        assert!(empirical_rademacher(&wide, &data, 1, &ascent_opts(0)).is_err());
    }

    #[test]
    fn classification_family_is_accepted_too() {
        use crate::dataset::{generate, GeneratorConfig};
        let spec = FamilySpec::v2_linear(11, 2);
        let data = generate(&GeneratorConfig::spurious_label_benchmark(60, 0.85), 0).unwrap();
        let est = empirical_rademacher(&spec, &data, 5, &ascent_opts(0)).unwrap();
        assert!(est.mean.is_finite() && est.mean >= 0.0);
    }

    // ------------------------------------------------------------------
    // sanity experiment: observed N-dependence sits under the bound
    // ------------------------------------------------------------------

    #[test]
    fn score_gap_across_sample_sizes_sits_under_the_bound() {
        use crate::im::{run_im, IMConfig};

        // The bound concerns |population - empirical|; the triangle
        // inequality puts |empirical@N - empirical@10N| under the sum of the
        // two bounds, and the N term dominates. The log-density clip uses
        // b = 1, on the order of the Gaussian family's densities near its
        // noise scale. The Monte-Carlo complexity is a heuristic, so this is
        // recorded as a 90%-of-trials check rather than a certainty.
        let spec = FamilySpec::v1_linear(1);
        let opts = RademacherOptions::new(1.0, FitOptions::gradient_descent(0.1, 100), 0).unwrap();
        let mut passes = 0;
        let trials = 20;
        for trial in 0..trials {
            let small = generate_homogeneous(100, 1.0, 1.0, 100 + trial).unwrap();
            let big = generate_homogeneous(1000, 1.0, 1.0, 200 + trial).unwrap();
            let h_small = run_im(&spec, &small, &IMConfig::defaults(&spec, 2, 100))
                .unwrap()
                .report
                .heterogeneity;
            let h_big = run_im(&spec, &big, &IMConfig::defaults(&spec, 2, 1000))
                .unwrap()
                .report
                .heterogeneity;
            let r = empirical_rademacher(&spec, &small, 10, &opts).unwrap();
            let bound = bound_value(&BoundInputs {
                b: 1.0,
                k: 2,
                delta: 0.05,
                n: 100,
                rademacher: r.mean,
            })
            .unwrap();
            if (h_small - h_big).abs() < bound {
                passes += 1;
            }
        }
        assert!(passes * 10 >= trials * 9, "only {passes}/{trials} trials under the bound");
    }
}
