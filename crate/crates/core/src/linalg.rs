//! Dense kernels used by the reduction methods: thin SVD with a
//! deterministic sign convention and Lawson–Hanson NNLS with early exit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column-major dense matrix.
pub type DenseMatrix = DMatrix<f64>;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `n × r` left singular vectors.
    pub left: DenseMatrix,
    /// Non-increasing singular values, length `r = min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// `r × ℓ` right singular vectors (transposed).
    pub right: DenseMatrix,
}

impl SvdResult {
    /// Numerical rank: singular values above `max(n, ℓ)·ε·σ₁`.
    pub fn rank(&self) -> usize {
        let Some(&s1) = self.singular_values.first() else { return 0 };
        let dim = self.left.nrows().max(self.right.ncols()) as f64;
        let cut = dim * f64::EPSILON * s1;
        self.singular_values.iter().filter(|&&s| s > cut && s > 0.0).count()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&self.singular_values));
        &self.left * sigma * &self.right
    }
}

pub fn check_finite(m: &DenseMatrix) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, column: j });
        }
    }
    Ok(())
}

/// Thin SVD. Each left vector is signed so that its largest-magnitude entry
/// (lowest index on ties) is positive; the right vector flips with it.
pub fn svd_thin(matrix: &DenseMatrix) -> Result<SvdResult> {
    if matrix.is_empty() {
        return Err(Error::Dimension("SVD of an empty matrix".into()));
    }
    check_finite(matrix)?;
    let svd = nalgebra::linalg::SVD::new(matrix.clone(), true, true);
    let mut left = svd.u.expect("requested U");
    let mut right = svd.v_t.expect("requested Vᵀ");
    let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    for k in 0..singular_values.len() {
        let col = left.column(k);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            left.column_mut(k).neg_mut();
            right.row_mut(k).neg_mut();
        }
    }
    Ok(SvdResult { left, singular_values, right })
}

/// First `m` left singular vectors.
pub fn truncate_basis(svd: &SvdResult, m: usize) -> Result<DenseMatrix> {
    let r = svd.singular_values.len();
    if m == 0 || m > r {
        return Err(Error::Truncation { requested: m, available: r });
    }
    Ok(svd.left.columns(0, m).into_owned())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NnlsTermination {
    /// `‖Yw − b‖ < τ‖b‖` reached.
    ToleranceMet,
    /// Optimality (KKT) reached before the tolerance test fired; the residual
    /// also satisfies the tolerance.
    Optimal,
    /// Optimum reached but the tolerance is not attainable.
    ToleranceNotMet,
}

#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub termination: NnlsTermination,
}

impl NnlsSolution {
    pub fn tolerance_not_met(&self) -> bool {
        self.termination == NnlsTermination::ToleranceNotMet
    }
}

fn residual_norm(y: &DenseMatrix, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    (y * w - b).norm()
}

/// Least squares on the columns listed in `set`.
fn ls_on(y: &DenseMatrix, b: &DVector<f64>, set: &[usize]) -> Option<DVector<f64>> {
    let sub = y.select_columns(set);
    let qr = sub.qr();
    let r = qr.r();
    if (0..set.len()).any(|i| r[(i, i)].abs() <= 1e-14 * r[(0, 0)].abs().max(f64::MIN_POSITIVE)) {
        return None;
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
}

/// Sparse non-negative least squares `min ‖Yw − b‖, w ≥ 0` by the
/// Lawson–Hanson active-set method, greedily growing the support from
/// `w = 0` and stopping as soon as `‖Yw − b‖ < τ‖b‖`.
pub fn snnls(y: &DenseMatrix, b: &[f64], tau: f64) -> Result<NnlsSolution> {
    if y.nrows() != b.len() {
        return Err(Error::Dimension(format!("Y has {} rows but b has {}", y.nrows(), b.len())));
    }
    if !(tau >= 0.0) {
        return Err(Error::Invalid(format!("tolerance τ = {tau} must be non-negative")));
    }
    check_finite(y)?;
    let b_full = DVector::from_column_slice(b);
    if b_full.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite right-hand side".into()));
    }
    let n = y.ncols();

    // Tall systems are compressed by a QR of [Y | b]; residual norms are
    // preserved exactly because b lies in the span of the factor.
    let (yc, bc) = if y.nrows() > n + 1 {
        let mut aug = DMatrix::zeros(y.nrows(), n + 1);
        aug.columns_mut(0, n).copy_from(y);
        aug.column_mut(n).copy_from(&b_full);
        let r = aug.qr().r();
        (r.columns(0, n).into_owned(), r.column(n).into_owned())
    } else {
        (y.clone(), b_full.clone())
    };

    let target = tau * b_full.norm();
    let mut w = DVector::zeros(n);
    let mut passive = vec![false; n];
    // Columns numerically dependent on the current support.
    let mut excluded = vec![false; n];
    let mut iterations = 0;
    let max_iterations = 3 * n + 10;
    let grad_tol = 1e-13 * (yc.norm() * bc.norm()).max(f64::MIN_POSITIVE);

    let termination = loop {
        let res = &bc - &yc * &w;
        if res.norm() < target {
            break NnlsTermination::ToleranceMet;
        }
        let grad = yc.transpose() * &res;
        let mut pick = None;
        let mut best = grad_tol;
        for j in 0..n {
            if !passive[j] && !excluded[j] && grad[j] > best {
                best = grad[j];
                pick = Some(j);
            }
        }
        let Some(j) = pick else {
            break if res.norm() < target || target == 0.0 {
                NnlsTermination::Optimal
            } else {
                NnlsTermination::ToleranceNotMet
            };
        };
        if iterations >= max_iterations {
            break NnlsTermination::ToleranceNotMet;
        }
        iterations += 1;
        passive[j] = true;

        // Inner loop: restore feasibility of the passive-set solution.
        loop {
            let set: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let Some(z) = ls_on(&yc, &bc, &set) else {
                passive[j] = false;
                excluded[j] = true;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                w.fill(0.0);
                for (i, &k) in set.iter().enumerate() {
                    w[k] = z[i];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (i, &k) in set.iter().enumerate() {
                if z[i] <= 0.0 {
                    let a = w[k] / (w[k] - z[i]);
                    if a < alpha {
                        alpha = a;
                    }
                }
            }
            for (i, &k) in set.iter().enumerate() {
                w[k] += alpha * (z[i] - w[k]);
                if w[k] <= 1e-15 * (1.0 + z[i].abs()) {
                    w[k] = 0.0;
                    passive[k] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    };

    let weights: Vec<f64> = w.iter().map(|&v| v.max(0.0)).collect();
    let residual_norm = residual_norm(y, &b_full, &DVector::from_column_slice(&weights));
    Ok(NnlsSolution { weights, residual_norm, iterations, termination })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_svd() {
        let s = svd_thin(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
        let m = truncate_basis(&s, 1).unwrap();
        assert_eq!(m.ncols(), 1);
        assert!((m.norm() - 1.0).abs() < 1e-15);
        assert!(matches!(truncate_basis(&s, 4), Err(Error::Truncation { available: 3, .. })));
        assert!(truncate_basis(&s, 0).is_err());
    }

    #[test]
    fn rank_one_outer_product() {
        let u = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0]);
        let v = DVector::from_vec(vec![0.0, 3.0, 0.0]);
        let s = svd_thin(&(&u * v.transpose())).unwrap();
        assert!((s.singular_values[0] - 6.0).abs() < 1e-12);
        assert!(s.singular_values[1..].iter().all(|x| x.abs() < 1e-12));
        assert_eq!(s.rank(), 1);
        assert!(s.left[(0, 0)] > 0.0);
    }

    #[test]
    fn non_finite_reports_column() {
        let mut m = DMatrix::zeros(3, 3);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(svd_thin(&m), Err(Error::NonFinite { row: 1, column: 2 })));
    }

    #[test]
    fn nnls_trivial_cases() {
        let b = vec![1.0, 2.0, 3.0];
        let y = DMatrix::from_column_slice(3, 1, &b);
        let s = snnls(&y, &b, 1e-6).unwrap();
        assert!((s.weights[0] - 1.0).abs() < 1e-14);
        assert!(s.residual_norm < 1e-14);

        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, 1.0, 3.0, 1.0]);
        let s = snnls(&y, &[0.0; 3], 0.5).unwrap();
        assert_eq!(s.weights, vec![0.0, 0.0]);
        assert_eq!(s.residual_norm, 0.0);
    }

    #[test]
    fn nnls_flags_unreachable_tolerance() {
        // b points away from the only column: w = 0 is optimal.
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s = snnls(&y, &[-1.0, 0.0], 1e-3).unwrap();
        assert_eq!(s.weights, vec![0.0]);
        assert!(s.tolerance_not_met());
    }
}
