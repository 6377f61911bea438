//! Finite-strain gradient-extended damage-plasticity at a single Gauss point.
//!
//! The free energy is `f_dam(D) (ψ_e(C_e) + ψ_p(C_pe, ξ_p)) + ψ_d(ξ_d) + ψ_d̄(D − D̄, ∇D̄)`
//! with a compressible Neo-Hookean elastic part, Armstrong–Frederick kinematic
//! and Voce isotropic hardening, Voce damage hardening and a micromorphic
//! penalty coupling the local damage `D` to the nodal field `D̄`. The plastic
//! and damage surfaces are treated as two independent loading functions with
//! their own multipliers.

mod return_map;

pub use return_map::{stress_update, StressReturn, LOCAL_MAX_ITERATIONS, LOCAL_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::MaterialError;
use crate::tensor::{Mat3, Real};

/// Upper bound for the local damage; keeps `f_dam(D)` strictly positive.
pub const DAMAGE_CAP: f64 = 0.999;

/// Weakening function `f_dam(D)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weakening {
    /// `(1 − D)²`
    #[default]
    Quadratic,
}

impl Weakening {
    #[inline]
    pub(crate) fn eval<T: Real>(self, d: T) -> (T, T) {
        match self {
            Weakening::Quadratic => {
                let one_minus = -d + 1.0;
                (one_minus * one_minus, one_minus * -2.0)
            }
        }
    }
}

/// Returns `f_dam(D)`, `f_dam'(D)` and `f_dam''(D)`.
pub fn weakening(kind: Weakening, damage: f64) -> Result<(f64, f64, f64), MaterialError> {
    if !(0.0..1.0).contains(&damage) {
        return Err(MaterialError::Domain(format!("damage {damage} outside [0, 1)")));
    }
    match kind {
        Weakening::Quadratic => {
            let q = 1.0 - damage;
            Ok((q * q, -2.0 * q, 2.0))
        }
    }
}

/// The twelve material parameters plus the choice of weakening function.
///
/// Units: stresses and moduli in MPa, `a_grad` in MPa·mm², the exponents
/// `f_iso` and `s_dam` and the kinematic parameter `b_kin` are dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub lambda: f64,
    pub mu: f64,
    pub sigma0: f64,
    pub a_kin: f64,
    pub b_kin: f64,
    pub e_iso: f64,
    pub f_iso: f64,
    pub y0: f64,
    pub r_dam: f64,
    pub s_dam: f64,
    pub a_grad: f64,
    pub h_pen: f64,
    #[serde(default)]
    pub weakening: Weakening,
}

impl MaterialParams {
    /// Reference parameter set for the numerical examples. The kinematic
    /// saturation parameter `b_kin` is not part of that set and must be
    /// supplied by the caller.
    pub fn reference(b_kin: f64) -> Self {
        MaterialParams {
            lambda: 25_000.0,
            mu: 55_000.0,
            sigma0: 400.0,
            a_kin: 450.0,
            b_kin,
            e_iso: 265.0,
            f_iso: 16.93,
            y0: 2.5,
            r_dam: 5.0,
            s_dam: 10.0,
            a_grad: 500.0,
            h_pen: 1.0e4,
            weakening: Weakening::Quadratic,
        }
    }

    /// Internal length `L = sqrt(A / H)` in mm.
    pub fn internal_length(&self) -> f64 {
        (self.a_grad / self.h_pen).sqrt()
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let named = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("sigma0", self.sigma0),
            ("a_kin", self.a_kin),
            ("b_kin", self.b_kin),
            ("e_iso", self.e_iso),
            ("f_iso", self.f_iso),
            ("y0", self.y0),
            ("r_dam", self.r_dam),
            ("s_dam", self.s_dam),
            ("a_grad", self.a_grad),
            ("h_pen", self.h_pen),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MaterialError::Domain(format!("parameter {name} = {v} must be positive and finite")));
            }
        }
        Ok(())
    }
}

/// Internal variables at one integration point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussPointState {
    /// Plastic right Cauchy–Green tensor, six symmetric components.
    pub cp: [f64; 6],
    /// Irrecoverable part of the plastic deformation (kinematic hardening).
    pub cpi: [f64; 6],
    pub xi_p: f64,
    pub damage: f64,
    pub xi_d: f64,
}

impl Default for GaussPointState {
    fn default() -> Self {
        Self::virgin()
    }
}

impl GaussPointState {
    pub fn virgin() -> Self {
        GaussPointState {
            cp: crate::tensor::sym_identity(),
            cpi: crate::tensor::sym_identity(),
            xi_p: 0.0,
            damage: 0.0,
            xi_d: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        if !Mat3::from_sym(&self.cp).is_spd() || !Mat3::from_sym(&self.cpi).is_spd() {
            return Err(MaterialError::Domain("plastic tensors must be symmetric positive definite".into()));
        }
        if !(0.0..1.0).contains(&self.damage) || self.xi_p < 0.0 || self.xi_d < 0.0 {
            return Err(MaterialError::Domain("scalar internal variables out of range".into()));
        }
        Ok(())
    }
}

fn check_spd(t: &[f64; 6], what: &str) -> Result<Mat3<f64>, MaterialError> {
    let m = Mat3::from_sym(t);
    if t.iter().any(|v| !v.is_finite()) || !m.is_spd() {
        return Err(MaterialError::Domain(format!("{what} is not symmetric positive definite")));
    }
    Ok(m)
}

#[inline]
pub(crate) fn neo_hooke<T: Real>(trace: T, det: T, shear: f64, bulk: f64) -> T {
    let ln_det = det.ln();
    (trace - 3.0 - ln_det) * (shear / 2.0) + (det - 1.0 - ln_det) * (bulk / 4.0)
}

#[inline]
pub(crate) fn voce_energy<T: Real>(xi: T, modulus: f64, rate: f64) -> T {
    (xi + ((xi * -rate).exp() - 1.0) / rate) * modulus
}

/// Elastic energy `ψ_e(C_e)` in MPa.
pub fn energy_elastic(c_e: &[f64; 6], params: &MaterialParams) -> Result<f64, MaterialError> {
    let m = check_spd(c_e, "C_e")?;
    Ok(neo_hooke(m.trace(), m.det(), params.mu, params.lambda))
}

/// Plastic energy `ψ_p(C_pe, ξ_p)` in MPa.
pub fn energy_plastic(c_pe: &[f64; 6], xi_p: f64, params: &MaterialParams) -> Result<f64, MaterialError> {
    if !(xi_p >= 0.0) {
        return Err(MaterialError::Domain(format!("accumulated plastic strain {xi_p} < 0")));
    }
    let m = check_spd(c_pe, "C_pe")?;
    let kinematic = (m.trace() - 3.0 - m.det().ln()) * (params.a_kin / 2.0);
    Ok(kinematic + voce_energy(xi_p, params.e_iso, params.f_iso))
}

/// Damage hardening energy `ψ_d(ξ_d)` in MPa.
pub fn energy_damage(xi_d: f64, params: &MaterialParams) -> Result<f64, MaterialError> {
    if !(xi_d >= 0.0) {
        return Err(MaterialError::Domain(format!("damage hardening variable {xi_d} < 0")));
    }
    Ok(voce_energy(xi_d, params.r_dam, params.s_dam))
}

/// Micromorphic energy `H/2 (D − D̄)² + A/2 |∇D̄|²` in MPa.
pub fn energy_micromorphic(damage: f64, dbar: f64, grad_dbar: &[f64], params: &MaterialParams) -> Result<f64, MaterialError> {
    if !damage.is_finite() || !dbar.is_finite() || grad_dbar.iter().any(|g| !g.is_finite()) {
        return Err(MaterialError::Domain("non-finite micromorphic argument".into()));
    }
    let g2: f64 = grad_dbar.iter().map(|g| g * g).sum();
    Ok(0.5 * params.h_pen * (damage - dbar).powi(2) + 0.5 * params.a_grad * g2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energies_vanish_at_reference() {
        let p = MaterialParams::reference(10.0);
        let id = crate::tensor::sym_identity();
        assert_eq!(energy_elastic(&id, &p).unwrap(), 0.0);
        assert_eq!(energy_plastic(&id, 0.0, &p).unwrap(), 0.0);
        assert_eq!(energy_damage(0.0, &p).unwrap(), 0.0);
        assert_eq!(energy_micromorphic(0.3, 0.3, &[0.0, 0.0], &p).unwrap(), 0.0);
    }

    #[test]
    fn elastic_energy_direct_formula() {
        // C_e = diag(1.21, 1/1.21, 1): det = 1, so only the shear term survives.
        let p = MaterialParams::reference(10.0);
        let ce = [1.21, 1.0 / 1.21, 1.0, 0.0, 0.0, 0.0];
        let tr: f64 = 1.21 + 1.0 / 1.21 + 1.0;
        let det: f64 = 1.21 * (1.0 / 1.21);
        let oracle = 0.5 * 55_000.0 * (tr - 3.0 - det.ln()) + 0.25 * 25_000.0 * (det - 1.0 - det.ln());
        let got = energy_elastic(&ce, &p).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
        assert!((got - 0.5 * 55_000.0 * (tr - 3.0)).abs() < 1e-6);

        let mut zero = p;
        zero.mu = 0.0;
        zero.lambda = 0.0;
        assert_eq!(energy_elastic(&ce, &zero).unwrap(), 0.0);
    }

    #[test]
    fn plastic_energy_limits_and_domain() {
        let p = MaterialParams::reference(10.0);
        let id = crate::tensor::sym_identity();
        let xi = 50.0;
        let asym = p.e_iso * (xi - 1.0 / p.f_iso);
        assert!((energy_plastic(&id, xi, &p).unwrap() - asym).abs() < 1e-9 * asym);
        assert!(energy_plastic(&id, -1e-3, &p).is_err());
        assert!(energy_plastic(&[1.0, -1.0, 1.0, 0.0, 0.0, 0.0], 0.0, &p).is_err());
    }

    #[test]
    fn micromorphic_penalty_value() {
        let p = MaterialParams::reference(10.0);
        let v = energy_micromorphic(0.3, 0.2, &[0.0, 0.0], &p).unwrap();
        assert!((v - 50.0).abs() < 1e-9);
        let g = energy_micromorphic(0.3, 0.2, &[0.1, -0.2], &p).unwrap();
        assert!((g - (50.0 + 0.5 * 500.0 * 0.05)).abs() < 1e-9);
    }

    #[test]
    fn weakening_values_and_derivative() {
        assert_eq!(weakening(Weakening::Quadratic, 0.0).unwrap().0, 1.0);
        assert_eq!(weakening(Weakening::Quadratic, 0.5).unwrap().0, 0.25);
        assert!(weakening(Weakening::Quadratic, 1.0).is_err());
        assert!(weakening(Weakening::Quadratic, -0.1).is_err());
        let h = 1e-6;
        let fd = (weakening(Weakening::Quadratic, 0.3 + h).unwrap().0 - weakening(Weakening::Quadratic, 0.3 - h).unwrap().0) / (2.0 * h);
        let (_, d1, _) = weakening(Weakening::Quadratic, 0.3).unwrap();
        assert!((fd - d1).abs() <= 1e-6 * d1.abs());
        assert!(d1 <= 0.0);
    }

    #[test]
    fn internal_length_from_reference_set() {
        let p = MaterialParams::reference(10.0);
        assert!((p.internal_length() - (0.05f64).sqrt()).abs() < 1e-15);
        p.validate().unwrap();
    }
}
