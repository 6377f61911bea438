//! Implicit two-surface return mapping and its consistent tangent.
//!
//! Local unknowns are the six components of `C_p`, the six components of
//! `C_pi`, and the multiplier increments `Δλ_p`, `Δλ_d` (14 in total). The
//! plastic tensors are advanced with a symmetric exponential update
//! `C^{n+1} = G^{1/2} exp(Δ · dev(G^{-1/2} N G^{-1/2})) G^{1/2}` with
//! `G = C^n`, which keeps them symmetric positive definite with constant
//! determinant. Jacobians are obtained by forward-mode differentiation of the
//! residual, and the consistent tangent by implicit differentiation of the
//! converged local system.

use nalgebra::{SMatrix, SVector};
use num_dual::{Derivative, DualSVec64};

use super::{neo_hooke, voce_energy, GaussPointState, MaterialParams, DAMAGE_CAP};
use crate::error::MaterialError;
use crate::tensor::{lift, Mat3, Real};

pub const LOCAL_TOLERANCE: f64 = 1e-10;
pub const LOCAL_MAX_ITERATIONS: usize = 50;

const NX: usize = 14;
const NP: usize = 7;
const SQRT_3_2: f64 = 1.224_744_871_391_589;

/// Result of a Gauss-point update.
#[derive(Clone, Debug)]
pub struct StressReturn {
    /// Second Piola–Kirchhoff stress, six symmetric components [MPa].
    pub stress: [f64; 6],
    /// Generalized stress `a0 = −H (D − D̄)` [MPa].
    pub a0: f64,
    /// Generalized stress vector `b0 = A ∇D̄`.
    pub b0: [f64; 3],
    /// `∂S_i/∂C_j` with respect to the six symmetric components of `C`
    /// (an off-diagonal component perturbs both symmetric entries).
    pub dstress_dc: [[f64; 6]; 6],
    pub dstress_ddbar: [f64; 6],
    pub da0_dc: [f64; 6],
    pub da0_ddbar: f64,
    pub new_state: GaussPointState,
    /// Multiplier increments `(Δλ_p, Δλ_d)`.
    pub multipliers: (f64, f64),
    /// Multiplier rates `Δλ / Δt`.
    pub rates: (f64, f64),
    /// Yield and damage functions at the returned state.
    pub phi_p: f64,
    pub phi_d: f64,
    pub damage_capped: bool,
    pub local_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ActiveSet {
    plastic: bool,
    damage: bool,
    /// Damage increment pinned to reach the cap.
    pinned_damage: Option<f64>,
}

struct Context<'a> {
    params: &'a MaterialParams,
    old: &'a GaussPointState,
    cp_half: Mat3<f64>,
    cp_half_inv: Mat3<f64>,
    cpi_half: Mat3<f64>,
    cpi_half_inv: Mat3<f64>,
}

struct LocalEval<T> {
    residual: [T; NX],
    /// `S` (six components) followed by `a0`.
    outputs: [T; NP],
    phi_p: T,
    phi_d: T,
}

fn local_system<T: Real>(x: &[T; NX], p: &[T; NP], ctx: &Context, act: ActiveSet, with_outputs: bool) -> LocalEval<T> {
    let pr = ctx.params;
    let old = ctx.old;
    let c = Mat3::from_sym(&[p[0], p[1], p[2], p[3], p[4], p[5]]);
    let dbar = p[6];
    let cp = Mat3::from_sym(&[x[0], x[1], x[2], x[3], x[4], x[5]]);
    let cpi = Mat3::from_sym(&[x[6], x[7], x[8], x[9], x[10], x[11]]);
    let dl_p = x[12];
    let dl_d = x[13];

    let damage = dl_d + old.damage;
    let (f_dam, df_dam) = pr.weakening.eval(damage);
    let xi_p = dl_p / f_dam + old.xi_p;
    let xi_d = dl_d + old.xi_d;

    let cp_inv = cp.inverse();
    let cpi_inv = cpi.inverse();
    let det_c = c.det();
    let det_cp = cp.det();
    let det_ce = det_c / det_cp;

    // Effective mixed stress times C_p: Ỹ C_p (symmetric).
    let cp_cpi_inv = cp.mul(&cpi_inv);
    let m_eff = c
        .sub(&cp)
        .scale_f(pr.mu)
        .add(&cp.scale((det_ce - 1.0) * (pr.lambda / 2.0)))
        .sub(&cp_cpi_inv.mul(&cp).sub(&cp).scale_f(pr.a_kin));
    let y_eff = m_eff.mul(&cp_inv);
    let tr_y = y_eff.trace();
    let norm2 = y_eff.trace_mul(&y_eff) - tr_y * tr_y / 3.0;
    let norm = if norm2.re() > 0.0 { norm2.sqrt() } else { lift(0.0) };
    let q_p = ((xi_p * -pr.f_iso).exp() * -1.0 + 1.0) * pr.e_iso;
    let phi_p = norm * SQRT_3_2 - q_p - pr.sigma0;

    let mut residual = [lift::<T>(0.0); NX];
    if act.plastic {
        let dev_m = m_eff.sub(&cp.scale(tr_y / 3.0));
        let dir = Mat3::f_mul(&ctx.cp_half_inv, &dev_m).mul_f(&ctx.cp_half_inv).dev();
        let step = dl_p * (2.0 * SQRT_3_2) / (f_dam * norm);
        let cp_new = Mat3::f_mul(&ctx.cp_half, &dir.scale(step).exp()).mul_f(&ctx.cp_half).to_sym();

        let tr_kin = (cp_cpi_inv.trace() - 3.0) * pr.a_kin;
        let b_eff = cp.sub(&cpi).scale_f(pr.a_kin).sub(&cpi.scale(tr_kin / 3.0));
        let dir_k = Mat3::f_mul(&ctx.cpi_half_inv, &b_eff).mul_f(&ctx.cpi_half_inv).dev();
        let step_k = dl_p * (2.0 * pr.b_kin / pr.a_kin);
        let cpi_new = Mat3::f_mul(&ctx.cpi_half, &dir_k.scale(step_k).exp()).mul_f(&ctx.cpi_half).to_sym();
        for k in 0..6 {
            residual[k] = x[k] - cp_new[k];
            residual[6 + k] = x[6 + k] - cpi_new[k];
        }
        residual[12] = phi_p / pr.sigma0;
    } else {
        for k in 0..6 {
            residual[k] = x[k] - old.cp[k];
            residual[6 + k] = x[6 + k] - old.cpi[k];
        }
        residual[12] = dl_p;
    }

    // Damage driving force and loading function.
    let c_inv = c.inverse();
    let psi_e = neo_hooke(c.trace_mul(&cp_inv), det_ce, pr.mu, pr.lambda);
    let det_cpe = det_cp / cpi.det();
    let psi_p = neo_hooke(cp_cpi_inv.trace(), det_cpe, pr.a_kin, 0.0) + voce_energy(xi_p, pr.e_iso, pr.f_iso);
    let driving = -(df_dam * (psi_e + psi_p)) - (damage - dbar) * pr.h_pen;
    let q_d = ((xi_d * -pr.s_dam).exp() * -1.0 + 1.0) * pr.r_dam;
    let phi_d = driving - q_d - pr.y0;
    residual[13] = match (act.damage, act.pinned_damage) {
        (_, Some(pinned)) => dl_d - pinned,
        (true, None) => phi_d / pr.y0.max(1.0),
        (false, None) => dl_d,
    };

    let mut outputs = [lift::<T>(0.0); NP];
    if with_outputs {
        let s = cp_inv
            .sub(&c_inv)
            .scale_f(pr.mu)
            .add(&c_inv.scale((det_ce - 1.0) * (pr.lambda / 2.0)))
            .scale(f_dam)
            .to_sym();
        outputs[..6].copy_from_slice(&s);
        outputs[6] = (damage - dbar) * -pr.h_pen;
    }
    LocalEval { residual, outputs, phi_p, phi_d }
}

type D14 = DualSVec64<NX>;
type D21 = DualSVec64<{ NX + NP }>;
type D7 = DualSVec64<NP>;

fn seeded<const N: usize>(values: &[f64], offset: usize) -> Vec<DualSVec64<N>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| DualSVec64::<N>::from_re(v).derivative(offset + i))
        .collect()
}

fn eps_row<const N: usize>(d: &DualSVec64<N>) -> SVector<f64, N> {
    match &d.eps {
        Derivative(Some(m)) => *m,
        Derivative(None) => SVector::zeros(),
    }
}

fn max_abs(r: &[f64]) -> f64 {
    r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn pack_state(old: &GaussPointState) -> [f64; NX] {
    let mut x = [0.0; NX];
    x[..6].copy_from_slice(&old.cp);
    x[6..12].copy_from_slice(&old.cpi);
    x
}

/// Local Newton on the active-set subsystem. Returns the converged unknowns
/// and the iteration count.
fn solve_local(x0: [f64; NX], p: &[f64; NP], ctx: &Context, act: ActiveSet) -> Result<([f64; NX], usize), MaterialError> {
    let p_dual: Vec<D14> = p.iter().map(|&v| D14::from_re(v)).collect();
    let p_dual: [D14; NP] = p_dual.try_into().expect("length");
    let mut x = x0;
    let mut history = Vec::new();
    for it in 0..LOCAL_MAX_ITERATIONS {
        let xd: [D14; NX] = seeded::<NX>(&x, 0).try_into().expect("length");
        let ev = local_system(&xd, &p_dual, ctx, act, false);
        let r: [f64; NX] = std::array::from_fn(|i| ev.residual[i].re);
        let rn = max_abs(&r);
        history.push(rn);
        if !rn.is_finite() {
            break;
        }
        if rn < LOCAL_TOLERANCE {
            return Ok((x, it));
        }
        let jac = SMatrix::<f64, NX, NX>::from_fn(|i, j| eps_row(&ev.residual[i])[j]);
        let rhs = SVector::<f64, NX>::from_column_slice(&r);
        let Some(dx) = jac.lu().solve(&rhs) else {
            break;
        };
        // Damped update: keep the plastic tensors positive definite.
        let mut alpha = 1.0;
        loop {
            let trial: [f64; NX] = std::array::from_fn(|i| x[i] - alpha * dx[i]);
            let cp = Mat3::from_sym(&[trial[0], trial[1], trial[2], trial[3], trial[4], trial[5]]);
            let cpi = Mat3::from_sym(&[trial[6], trial[7], trial[8], trial[9], trial[10], trial[11]]);
            if (cp.det() > 0.0 && cpi.det() > 0.0 && trial[13] + ctx.old.damage < 1.0) || alpha < 1e-3 {
                x = trial;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(MaterialError::LocalNewton { gauss_point: 0, history })
}

/// Gauss-point update from the committed state `old` to the deformation `C`
/// and micromorphic damage `D̄`, integrated by backward Euler over one
/// pseudo-time increment `dt`.
///
/// `c` holds the six symmetric components of the right Cauchy–Green tensor;
/// `grad_dbar` is the reference gradient of `D̄` (third entry zero in 2D).
pub fn stress_update(
    c: &[f64; 6],
    dbar: f64,
    grad_dbar: &[f64; 3],
    old: &GaussPointState,
    params: &MaterialParams,
    dt: f64,
) -> Result<StressReturn, MaterialError> {
    if !(dt > 0.0) {
        return Err(MaterialError::Domain(format!("pseudo-time increment {dt} must be positive")));
    }
    let cm = Mat3::from_sym(c);
    if c.iter().any(|v| !v.is_finite()) || !(cm.det() > 0.0) {
        return Err(MaterialError::Domain("C must be positive definite".into()));
    }
    if !dbar.is_finite() || grad_dbar.iter().any(|g| !g.is_finite()) {
        return Err(MaterialError::Domain("non-finite micromorphic damage".into()));
    }
    let (cp_half, cp_half_inv) = Mat3::from_sym(&old.cp)
        .spd_sqrt_pair()
        .ok_or_else(|| MaterialError::Domain("C_p not positive definite".into()))?;
    let (cpi_half, cpi_half_inv) = Mat3::from_sym(&old.cpi)
        .spd_sqrt_pair()
        .ok_or_else(|| MaterialError::Domain("C_pi not positive definite".into()))?;
    let ctx = Context { params, old, cp_half, cp_half_inv, cpi_half, cpi_half_inv };

    let p: [f64; NP] = [c[0], c[1], c[2], c[3], c[4], c[5], dbar];
    let x_old = pack_state(old);
    let tol_p = 1e-8 * params.sigma0;
    let tol_d = 1e-8 * params.y0.max(1.0);

    let elastic = ActiveSet { plastic: false, damage: false, pinned_damage: None };
    let trial = local_system::<f64>(&x_old, &p, &ctx, elastic, false);
    let trial_p = trial.phi_p > tol_p;
    let trial_d = trial.phi_d > tol_d;

    let (x, act, iterations, capped) = if !trial_p && !trial_d {
        (x_old, elastic, 0, false)
    } else {
        let both = ActiveSet { plastic: true, damage: true, pinned_damage: None };
        let p_only = ActiveSet { plastic: true, damage: false, pinned_damage: None };
        let d_only = ActiveSet { plastic: false, damage: true, pinned_damage: None };
        let candidates: &[ActiveSet] = match (trial_p, trial_d) {
            (true, true) => &[both, p_only, d_only],
            (true, false) => &[p_only, both],
            _ => &[d_only, both],
        };
        let mut found = None;
        let mut last_err = MaterialError::NoActiveSet;
        for &act in candidates {
            match solve_local(x_old, &p, &ctx, act) {
                Ok((mut x, it)) => {
                    let mut act = act;
                    let mut capped = false;
                    if act.damage && x[13] + old.damage > DAMAGE_CAP {
                        act.pinned_damage = Some(DAMAGE_CAP - old.damage);
                        match solve_local(x, &p, &ctx, act) {
                            Ok((xc, _)) => x = xc,
                            Err(e) => {
                                last_err = e;
                                continue;
                            }
                        }
                        capped = true;
                    }
                    let ev = local_system::<f64>(&x, &p, &ctx, act, false);
                    let admissible = x[12] >= -1e-12
                        && x[13] >= -1e-12
                        && (act.plastic || ev.phi_p <= tol_p)
                        && (act.damage || ev.phi_d <= tol_d);
                    if admissible {
                        found = Some((x, act, it, capped));
                        break;
                    }
                }
                Err(e) => last_err = e,
            }
        }
        found.ok_or(last_err)?
    };

    // Consistent tangent: dO/dp = O_p − O_x J_x⁻¹ J_p.
    let (outputs, dout_dp, phi_p, phi_d) = if act == elastic {
        let xd: [D7; NX] = std::array::from_fn(|i| D7::from_re(x[i]));
        let pd: [D7; NP] = seeded::<NP>(&p, 0).try_into().expect("length");
        let ev = local_system(&xd, &pd, &ctx, act, true);
        let out: [f64; NP] = std::array::from_fn(|i| ev.outputs[i].re);
        let d = SMatrix::<f64, NP, NP>::from_fn(|i, j| eps_row(&ev.outputs[i])[j]);
        (out, d, ev.phi_p.re, ev.phi_d.re)
    } else {
        let xd: [D21; NX] = seeded::<{ NX + NP }>(&x, 0).try_into().expect("length");
        let pd: [D21; NP] = seeded::<{ NX + NP }>(&p, NX).try_into().expect("length");
        let ev = local_system(&xd, &pd, &ctx, act, true);
        let jx = SMatrix::<f64, NX, NX>::from_fn(|i, j| eps_row(&ev.residual[i])[j]);
        let jp = SMatrix::<f64, NX, NP>::from_fn(|i, j| eps_row(&ev.residual[i])[NX + j]);
        let ox = SMatrix::<f64, NP, NX>::from_fn(|i, j| eps_row(&ev.outputs[i])[j]);
        let op = SMatrix::<f64, NP, NP>::from_fn(|i, j| eps_row(&ev.outputs[i])[NX + j]);
        let dx_dp = jx
            .lu()
            .solve(&jp)
            .ok_or_else(|| MaterialError::LocalNewton { gauss_point: 0, history: vec![f64::NAN] })?;
        let d = op - ox * dx_dp;
        let out: [f64; NP] = std::array::from_fn(|i| ev.outputs[i].re);
        (out, d, ev.phi_p.re, ev.phi_d.re)
    };

    let mut dstress_dc = [[0.0; 6]; 6];
    let mut dstress_ddbar = [0.0; 6];
    let mut da0_dc = [0.0; 6];
    for i in 0..6 {
        for j in 0..6 {
            dstress_dc[i][j] = dout_dp[(i, j)];
        }
        dstress_ddbar[i] = dout_dp[(i, 6)];
        da0_dc[i] = dout_dp[(6, i)];
    }
    let damage = old.damage + x[13];
    let (f_dam, _) = params.weakening.eval(damage);
    let new_state = GaussPointState {
        cp: [x[0], x[1], x[2], x[3], x[4], x[5]],
        cpi: [x[6], x[7], x[8], x[9], x[10], x[11]],
        xi_p: old.xi_p + x[12] / f_dam,
        damage,
        xi_d: old.xi_d + x[13],
    };
    Ok(StressReturn {
        stress: [outputs[0], outputs[1], outputs[2], outputs[3], outputs[4], outputs[5]],
        a0: outputs[6],
        b0: [params.a_grad * grad_dbar[0], params.a_grad * grad_dbar[1], params.a_grad * grad_dbar[2]],
        dstress_dc,
        dstress_ddbar,
        da0_dc,
        da0_ddbar: dout_dp[(6, 6)],
        new_state,
        multipliers: (x[12], x[13]),
        rates: (x[12] / dt, x[13] / dt),
        phi_p,
        phi_d,
        damage_capped: capped,
        local_iterations: iterations,
    })
}
