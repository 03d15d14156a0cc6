//! Dense symmetric positive-definite solves for the small normal-equation
//! systems of the calibration fitter.

use crate::scalar::Scalar;

/// Solves `A x = b` for symmetric positive-definite `A` (row-major `n×n`)
/// by Cholesky factorisation after Jacobi (diagonal) scaling.
///
/// On failure returns the index of the first column whose scaled pivot
/// collapses, i.e. the direction that is (numerically) a combination of the
/// preceding ones.
pub fn solve_spd<T: Scalar>(a: &[T], b: &[T], n: usize) -> Result<Vec<T>, usize> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut scale = vec![T::zero(); n];
    for i in 0..n {
        let d = a[i * n + i];
        if !(d > T::zero()) || !d.is_finite() {
            return Err(i);
        }
        scale[i] = T::one() / d.sqrt();
    }
    let mut l = vec![T::zero(); n * n];
    let tol = T::epsilon() * T::idx(n) * T::lit(64.0);
    for j in 0..n {
        let mut diag = a[j * n + j] * scale[j] * scale[j];
        for k in 0..j {
            diag = diag - l[j * n + k] * l[j * n + k];
        }
        if !(diag > tol) {
            return Err(j);
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j] * scale[i] * scale[j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    // Forward then backward substitution on the scaled system.
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i] * scale[i];
        for k in 0..i {
            s = s - l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s = s - l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x.iter().zip(&scale).map(|(xi, si)| *xi * *si).collect())
}

/// Ordinary least squares `min ‖M x − y‖²` via the normal equations; rows of `M` are given as slices.
pub fn least_squares<T: Scalar>(rows: &[Vec<T>], y: &[T], n: usize) -> Result<Vec<T>, usize> {
    let mut ata = vec![T::zero(); n * n];
    let mut aty = vec![T::zero(); n];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..n {
            aty[i] = aty[i] + row[i] * yi;
            for j in 0..n {
                ata[i * n + j] = ata[i * n + j] + row[i] * row[j];
            }
        }
    }
    solve_spd(&ata, &aty, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_badly_scaled_system() {
        let a = [1e6, 2.0, 2.0, 3e-4];
        let x_true = [0.5, -1000.0];
        let b = [a[0] * x_true[0] + a[1] * x_true[1], a[2] * x_true[0] + a[3] * x_true[1]];
        let x = solve_spd(&a, &b, 2).unwrap();
        assert_abs_diff_eq!(x[0], x_true[0], epsilon = 1e-9);
        assert_abs_diff_eq!(x[1], x_true[1], epsilon = 1e-6);
    }

    #[test]
    fn reports_dependent_column() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let y: Vec<f64> = (0..5).map(|i| i as f64).collect();
        assert_eq!(least_squares(&rows, &y, 3), Err(1));
    }
}
