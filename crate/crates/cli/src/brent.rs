//! Brent's root finder: bracketing with inverse quadratic interpolation,
//! secant steps and bisection fallback.

#[derive(Clone, Debug, PartialEq)]
pub struct BrentOutcome {
    pub root: f64,
    pub f_root: f64,
    /// Function evaluations including the two bracket ends.
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BrentError<E> {
    #[error("f({a}) = {fa} and f({b}) = {fb} do not bracket a root")]
    NotBracketing { a: f64, b: f64, fa: f64, fb: f64 },
    #[error(transparent)]
    Eval(E),
}

/// Finds a zero of `f` in `[a, b]` to absolute tolerance `tol` in `x`.
/// `f` is called first at `a`, then at `b`, then at each iterate.
pub fn brent<E, F>(mut f: F, a: f64, b: f64, tol: f64, max_evaluations: usize) -> Result<BrentOutcome, BrentError<E>>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a).map_err(BrentError::Eval)?;
    let mut fb = f(b).map_err(BrentError::Eval)?;
    let mut evaluations = 2;
    if fa == 0.0 {
        return Ok(BrentOutcome { root: a, f_root: fa, evaluations, converged: true });
    }
    if fb == 0.0 {
        return Ok(BrentOutcome { root: b, f_root: fb, evaluations, converged: true });
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return Err(BrentError::NotBracketing { a, b, fa, fb });
    }
    let (mut c, mut fc) = (b, fb);
    let (mut d, mut e) = (b - a, b - a);
    loop {
        if fb.signum() == fc.signum() {
            // keep the root between b and c
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(BrentOutcome { root: b, f_root: fb, evaluations, converged: true });
        }
        if evaluations >= max_evaluations {
            return Ok(BrentOutcome { root: b, f_root: fb, evaluations, converged: false });
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b).map_err(BrentError::Eval)?;
        evaluations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> BrentOutcome {
        brent::<(), _>(|x| Ok(f(x)), a, b, tol, 100).unwrap()
    }

    #[test]
    fn linear_root_in_few_iterations() {
        let out = solve(|b| 3.0 * b - 6.3, 1.0, 4.0, 1e-6);
        assert!((out.root - 2.1).abs() < 1e-6);
        assert!(out.evaluations - 2 <= 3, "{out:?}");
    }

    #[test]
    fn cubic_and_transcendental() {
        let out = solve(|x| x * x * x - 2.0 * x - 5.0, 2.0, 3.0, 1e-12);
        assert!((out.root - 2.0945514815423265).abs() < 1e-10);
        let out = solve(|x| x.cos() - x, 0.0, 1.0, 1e-12);
        assert!((out.root - 0.7390851332151607).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_bracketing_interval() {
        assert!(matches!(brent::<(), _>(|x| Ok(x * x + 1.0), -1.0, 1.0, 1e-6, 50), Err(BrentError::NotBracketing { .. })));
    }

    #[test]
    fn evaluation_order_starts_with_the_bracket() {
        let mut calls = Vec::new();
        brent::<(), _>(
            |x| {
                calls.push(x);
                Ok(x - 0.3)
            },
            0.0,
            1.0,
            1e-9,
            50,
        )
        .unwrap();
        assert_eq!(&calls[..2], &[0.0, 1.0]);
    }
}
