//! Slow, transparent reference implementations used as test oracles.
//!
//! Everything here works on plain row-major `Vec<Vec<f64>>` and is written
//! without any of the numerical libraries used by the production code.

pub type Rows = Vec<Vec<f64>>;

pub fn transpose(a: &Rows) -> Rows {
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    c
}

/// Gaussian elimination with partial pivoting. `None` if a pivot vanishes.
pub fn gauss_solve(a: &Rows, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let mut m: Rows = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..=n {
                m[row][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// non-increasing order and the matching eigenvectors as columns.
pub fn jacobi_eigen(a: &Rows) -> (Vec<f64>, Rows) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Rows = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let total: f64 = a.iter().flatten().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (values, vectors)
}

/// Non-negative least squares by enumerating every support set and solving
/// the unconstrained problem on it; returns the best feasible candidate.
pub fn nnls_exhaustive(y: &Rows, b: &[f64]) -> (Vec<f64>, f64) {
    let n = y[0].len();
    let resid = |w: &[f64]| -> f64 {
        y.iter().zip(b).map(|(row, &bi)| {
            let r: f64 = row.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - bi;
            r * r
        }).sum::<f64>().sqrt()
    };
    let mut best_w = vec![0.0; n];
    let mut best_r = resid(&best_w);
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let k = set.len();
        let mut ata = vec![vec![0.0; k]; k];
        let mut atb = vec![0.0; k];
        for (p, &i) in set.iter().enumerate() {
            for (q, &j) in set.iter().enumerate() {
                ata[p][q] = y.iter().map(|row| row[i] * row[j]).sum();
            }
            atb[p] = y.iter().zip(b).map(|(row, &bi)| row[i] * bi).sum();
        }
        let Some(z) = gauss_solve(&ata, &atb) else { continue };
        if z.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut w = vec![0.0; n];
        for (p, &i) in set.iter().enumerate() {
            w[i] = z[p];
        }
        let r = resid(&w);
        if r < best_r {
            best_r = r;
            best_w = w;
        }
    }
    (best_w, best_r)
}

/// Greedy interpolation-index selection, transcribed step by step: the first
/// index maximises |φ₁|; each further index maximises the residual of
/// interpolating the next basis vector at the indices chosen so far.
/// Ties go to the lowest index. `omega` is row-major `n × k`.
pub fn deim_transcription(omega: &Rows) -> Vec<usize> {
    let n = omega.len();
    let k = omega[0].len();
    let argmax = |v: &[f64]| -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        best
    };
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| omega[i][j]).collect() };
    let mut p = vec![argmax(&col(0))];
    for i in 1..k {
        let phi = col(i);
        // (Zᵀ Ω_i) c = Zᵀ φ_i
        let a: Rows = p.iter().map(|&row| (0..i).map(|j| omega[row][j]).collect()).collect();
        let rhs: Vec<f64> = p.iter().map(|&row| phi[row]).collect();
        let c = gauss_solve(&a, &rhs).expect("singular interpolation matrix");
        let r: Vec<f64> = (0..n).map(|row| phi[row] - (0..i).map(|j| omega[row][j] * c[j]).sum::<f64>()).collect();
        p.push(argmax(&r));
    }
    p
}

/// Linear interpolation of a curve given by points with non-decreasing
/// abscissae.
pub fn interp_monotone(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v < x);
    if k == 0 {
        return ys[0];
    }
    if k >= xs.len() {
        return *ys.last().unwrap();
    }
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}

/// Mean relative force deviation sampled densely on `[0, min(max u)]` for
/// two curves through the origin whose displacements are increasing.
pub fn dense_curve_error(reference: &[(f64, f64)], candidate: &[(f64, f64)], samples: usize) -> f64 {
    let split = |c: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
        let mut xs = vec![0.0];
        let mut ys = vec![0.0];
        for &(u, f) in c {
            xs.push(u);
            ys.push(f);
        }
        (xs, ys)
    };
    let (rx, ry) = split(reference);
    let (cx, cy) = split(candidate);
    let upper = rx.last().unwrap().min(*cx.last().unwrap());
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..samples {
        let u = upper * (k as f64 + 0.5) / samples as f64;
        let fr = interp_monotone(&rx, &ry, u);
        if fr == 0.0 {
            continue;
        }
        let fc = interp_monotone(&cx, &cy, u);
        sum += ((fr - fc) / fr).abs();
        count += 1;
    }
    sum / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalises() {
        let a = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 1.0]];
        let (vals, vecs) = jacobi_eigen(&a);
        let av = matmul(&a, &vecs);
        for j in 0..3 {
            for i in 0..3 {
                assert!((av[i][j] - vals[j] * vecs[i][j]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn exhaustive_nnls_simple() {
        let y = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (w, r) = nnls_exhaustive(&y, &[2.0, -1.0]);
        assert_eq!(w, vec![2.0, 0.0]);
        assert!((r - 1.0).abs() < 1e-15);
    }
}
