//! Tiny dense linear-algebra helpers. The systems solved here are at most a
//! few dozen unknowns (feature dimension plus intercept), so a plain Cholesky
//! factorization is all we need; pulling in a LAPACK backend for this would
//! be overkill.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
///
/// `A` is consumed as a working buffer. Fails with [`Error::SingularSystem`]
/// when a pivot drops below a small positive threshold, which for our
/// weighted normal equations means the weighted design is rank deficient and
/// the caller should have added a ridge.
pub(crate) fn solve_spd(mut a: Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());

    // Pivots are judged relative to the largest diagonal entry; an exactly
    // rank-deficient matrix can still leave a ~1e-15 pivot after rounding.
    let scale = (0..n).map(|j| a[[j, j]].abs()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);

    // In-place lower Cholesky factor.
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 1e-12 * scale) || !d.is_finite() {
            return Err(Error::SingularSystem);
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
    }

    // Forward then backward substitution.
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= a[[i, k]] * x[k];
        }
        x[i] = s / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= a[[k, i]] * x[k];
        }
        x[i] = s / a[[i, i]];
    }
    Ok(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log(sum(exp(z))).
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_known_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = solve_spd(a.clone(), &b).unwrap();
        let r0 = 4.0 * x[0] + 1.0 * x[1] - 1.0;
        let r1 = 1.0 * x[0] + 3.0 * x[1] - 2.0;
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12, "residual too large");
    }

    #[test]
    fn rejects_singular_matrix() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![1.0, 1.0];
        assert!(matches!(solve_spd(a, &b), Err(Error::SingularSystem)));
    }

    #[test]
    fn log_sum_exp_matches_direct_on_small_values() {
        let z = [0.1f64, -0.3, 0.7];
        let direct = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z) - direct).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_logits() {
        let z = [1000.0, 999.0];
        let v = log_sum_exp(&z);
        assert!((v - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }
}
