use hyperred_core::material::{stress_update, GaussPointState, MaterialParams, StressReturn};
use hyperred_core::tensor::Mat3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c_from_f(f: &[[f64; 3]; 3]) -> [f64; 6] {
    let fm = Mat3(*f);
    let mut ft = fm;
    for i in 0..3 {
        for j in 0..3 {
            ft.0[i][j] = fm.0[j][i];
        }
    }
    ft.mul(&fm).to_sym()
}

fn random_direction(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut h = [[0.0; 3]; 3];
    for row in h.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    // bias towards tension so that both surfaces are exercised
    h[0][0] = rng.gen_range(0.3..1.0);
    h
}

fn deformed(h: &[[f64; 3]; 3], t: f64) -> [f64; 6] {
    let mut f = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            f[i][j] = if i == j { 1.0 } else { 0.0 } + t * h[i][j];
        }
    }
    c_from_f(&f)
}

fn check_kkt(r: &StressReturn, p: &MaterialParams) {
    let tol_p = 1e-8 * p.sigma0;
    let tol_d = 1e-8 * p.y0.max(1.0);
    let (dlp, dld) = r.multipliers;
    assert!(dlp >= 0.0 && dld >= 0.0, "negative multiplier {dlp} {dld}");
    assert!(r.phi_p <= tol_p, "phi_p = {}", r.phi_p);
    if !r.damage_capped {
        assert!(r.phi_d <= tol_d, "phi_d = {}", r.phi_d);
        assert!((dld * r.phi_d / p.y0.max(1.0)).abs() <= 1e-8);
    }
    assert!((dlp * r.phi_p / p.sigma0).abs() <= 1e-8);
}

#[test]
fn small_strain_matches_linear_elasticity() {
    let p = MaterialParams::reference(10.0);
    let eps = 1e-4;
    let c = [(1.0 + eps) * (1.0 + eps), 1.0, 1.0, 0.0, 0.0, 0.0];
    let r = stress_update(&c, 0.0, &[0.0; 3], &GaussPointState::virgin(), &p, 1.0).unwrap();
    assert_eq!(r.multipliers, (0.0, 0.0));
    let s11 = (p.lambda + 2.0 * p.mu) * eps;
    let s22 = p.lambda * eps;
    assert!((r.stress[0] - s11).abs() <= 1e-3 * s11, "{} vs {s11}", r.stress[0]);
    assert!((r.stress[1] - s22).abs() <= 1e-3 * s22);
    assert!((r.stress[2] - s22).abs() <= 1e-3 * s22);
    assert!(r.stress[3..].iter().all(|s| s.abs() < 1e-9));
}

#[test]
fn discrete_kkt_on_random_paths() {
    let p = MaterialParams::reference(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut plastic_steps = 0;
    let mut damage_steps = 0;
    for _ in 0..200 {
        let h = random_direction(&mut rng);
        let t_max = rng.gen_range(0.005..0.06);
        let steps = 8;
        let mut state = GaussPointState::virgin();
        let mut last_damage = 0.0;
        for k in 1..=steps {
            // load, then partially unload on the last step
            let t = if k == steps { 0.7 * t_max } else { t_max * k as f64 / (steps - 1) as f64 };
            let c = deformed(&h, t);
            let r = stress_update(&c, 0.0, &[0.0; 3], &state, &p, 1.0).unwrap();
            check_kkt(&r, &p);
            plastic_steps += (r.multipliers.0 > 0.0) as usize;
            damage_steps += (r.multipliers.1 > 0.0) as usize;
            assert!(r.new_state.damage >= last_damage);
            assert!(r.new_state.xi_p >= state.xi_p && r.new_state.xi_d >= state.xi_d);
            last_damage = r.new_state.damage;
            r.new_state.validate().unwrap();
            state = r.new_state;
        }
    }
    assert!(plastic_steps > 100 && damage_steps > 100, "{plastic_steps} {damage_steps}");
}

fn tangent_error(c: &[f64; 6], dbar: f64, state: &GaussPointState, p: &MaterialParams) -> f64 {
    let base = stress_update(c, dbar, &[0.0; 3], state, p, 1.0).unwrap();
    let mut scale = 0.0f64;
    let mut err = 0.0f64;
    let fd_col = |k: usize| -> [f64; 7] {
        let h = 1e-7;
        let mut cp = *c;
        let mut cm = *c;
        let (mut dp, mut dm) = (dbar, dbar);
        if k < 6 {
            cp[k] += h;
            cm[k] -= h;
        } else {
            dp += h;
            dm -= h;
        }
        let rp = stress_update(&cp, dp, &[0.0; 3], state, p, 1.0).unwrap();
        let rm = stress_update(&cm, dm, &[0.0; 3], state, p, 1.0).unwrap();
        let mut out = [0.0; 7];
        for i in 0..6 {
            out[i] = (rp.stress[i] - rm.stress[i]) / (2.0 * h);
        }
        out[6] = (rp.a0 - rm.a0) / (2.0 * h);
        out
    };
    for k in 0..7 {
        let fd = fd_col(k);
        for i in 0..7 {
            let ad = match (i < 6, k < 6) {
                (true, true) => base.dstress_dc[i][k],
                (true, false) => base.dstress_ddbar[i],
                (false, true) => base.da0_dc[k],
                (false, false) => base.da0_ddbar,
            };
            scale = scale.max(ad.abs());
            err = err.max((ad - fd[i]).abs());
        }
    }
    err / scale
}

#[test]
fn tangents_match_finite_differences() {
    let p = MaterialParams::reference(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut inelastic = 0;
    while checked < 100 {
        let h = random_direction(&mut rng);
        let t_max = rng.gen_range(0.003..0.05);
        let dbar = rng.gen_range(0.0..0.05);
        let mut state = GaussPointState::virgin();
        for k in 1..=4 {
            let c = deformed(&h, t_max * k as f64 / 5.0);
            state = stress_update(&c, dbar, &[0.0; 3], &state, &p, 1.0).unwrap().new_state;
        }
        let c = deformed(&h, t_max);
        let r = stress_update(&c, dbar, &[0.0; 3], &state, &p, 1.0).unwrap();
        if r.damage_capped {
            continue;
        }
        inelastic += (r.multipliers.0 > 0.0 || r.multipliers.1 > 0.0) as usize;
        let e = tangent_error(&c, dbar, &state, &p);
        assert!(e < 1e-4, "relative tangent error {e} (multipliers {:?})", r.multipliers);
        checked += 1;
    }
    assert!(inelastic > 50);
}

#[test]
fn unloading_to_same_state_is_idempotent() {
    let p = MaterialParams::reference(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let h = random_direction(&mut rng);
        let c = deformed(&h, 0.03);
        let first = stress_update(&c, 0.01, &[0.0; 3], &GaussPointState::virgin(), &p, 1.0).unwrap();
        let again = stress_update(&c, 0.01, &[0.0; 3], &first.new_state, &p, 1.0).unwrap();
        assert_eq!(again.multipliers, (0.0, 0.0));
        assert_eq!(again.new_state, first.new_state);
    }
}

#[test]
fn damage_disabled_matches_below_threshold() {
    // Below the damage threshold the damaging model and a model with an
    // unreachable threshold must agree exactly.
    let p = MaterialParams::reference(10.0);
    let mut no_damage = p;
    no_damage.y0 = 1e12;
    let mut state_a = GaussPointState::virgin();
    let mut state_b = GaussPointState::virgin();
    for k in 1..=10 {
        let stretch = 1.0 + 0.00045 * k as f64;
        let c = [stretch * stretch, 1.0, 1.0, 0.0, 0.0, 0.0];
        let a = stress_update(&c, 0.0, &[0.0; 3], &state_a, &p, 1.0).unwrap();
        let b = stress_update(&c, 0.0, &[0.0; 3], &state_b, &no_damage, 1.0).unwrap();
        assert!(a.phi_d < 0.0);
        assert_eq!(a.stress, b.stress);
        assert_eq!(a.new_state, b.new_state);
        state_a = a.new_state;
        state_b = b.new_state;
    }
    assert!(state_a.xi_p > 0.0);
}

#[test]
fn pseudo_time_increment_does_not_change_results() {
    let p = MaterialParams::reference(10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let h = random_direction(&mut rng);
        let c = deformed(&h, 0.04);
        let a = stress_update(&c, 0.0, &[0.0; 3], &GaussPointState::virgin(), &p, 1.0).unwrap();
        let b = stress_update(&c, 0.0, &[0.0; 3], &GaussPointState::virgin(), &p, 0.01).unwrap();
        assert_eq!(a.stress, b.stress);
        assert_eq!(a.new_state, b.new_state);
        assert!((a.rates.0 * 1.0 - b.rates.0 * 0.01).abs() <= 1e-15);
    }
}
