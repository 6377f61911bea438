use std::sync::{Arc, OnceLock};

use hyperred_core::assembly::{virgin_states, Assembler};
use hyperred_core::decsw::*;
use hyperred_core::dofs::{number_dofs, BcSpec};
use hyperred_core::dpod::{build_decomposed_basis, ProjectedSystem, ReducedBasis};
use hyperred_core::linalg::{svd_thin, truncate_basis};
use hyperred_core::material::MaterialParams;
use hyperred_core::mesh::PlateGeometry;
use hyperred_core::metrics::curve_error;
use hyperred_core::solver::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fom {
    asm: Arc<Assembler>,
    record: ContinuationRecord,
    store: SnapshotStore,
}

fn config() -> SolverConfig {
    SolverConfig { initial_arc_length: 0.002, max_arc_length: 0.02, stop_after_peak: Some(0.15), ..Default::default() }
}

fn fom() -> &'static Fom {
    static FOM: OnceLock<Fom> = OnceLock::new();
    FOM.get_or_init(|| {
        let mesh = PlateGeometry::new(2.0, 0.5, 4.0, 6, 6).build().unwrap();
        let layout = number_dofs(&mesh, &BcSpec::quarter_plate()).unwrap();
        let asm = Arc::new(Assembler::new(Arc::new(mesh), Arc::new(layout), MaterialParams::reference(10.0)).unwrap());
        let mut sys = FomSystem::new(asm.clone(), "top").unwrap();
        let record = arc_length_run(&mut sys, &config(), asm.layout.p_ref().iter().sum()).unwrap();
        let store = sys.snapshot_store(serde_json::Value::Null);
        Fom { asm, record, store }
    })
}

fn replay(f: &Fom) -> SolverConfig {
    SolverConfig {
        arc_schedule: Some(f.store.arc_schedule()),
        target_displacement: Some(f.record.steps.last().unwrap().u_control),
        stop_after_peak: None,
        ..config()
    }
}

#[test]
fn single_snapshot_system_sums_to_b() {
    let f = fom();
    let basis = build_decomposed_basis(&f.store, 4, 2).unwrap();
    let store = f.store.truncated(1);
    let t = build_ecsw_training(&[(&store, &f.asm)], &basis, 1e-3).unwrap();
    assert_eq!(t.y.shape(), (6, f.asm.n_elements()));
    assert_eq!(t.snapshots, 1);
    for i in 0..6 {
        let row: f64 = t.y.row(i).iter().sum();
        assert!((row - t.b[i]).abs() <= 1e-12 * t.y.row(i).amax().max(1.0));
    }
}

#[test]
fn columns_are_projected_element_forces() {
    let f = fom();
    let basis = build_decomposed_basis(&f.store, 5, 3).unwrap();
    let t = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1e-3).unwrap();
    // first snapshot: history is virgin, so each element can be assembled alone
    let v = f.asm.layout.expand(f.store.solutions.column(0).as_slice());
    let states = virgin_states(f.asm.n_elements());
    for e in [0, 7, 20, f.asm.n_elements() - 1] {
        let c = f.asm.assemble_subset(&v, &states, &[e], &[1.0]).unwrap();
        let r = DVector::from_vec(f.asm.layout.restrict(&c.r_full));
        let expected = basis.phi.transpose() * r;
        let got = t.y.view((0, e), (basis.dim(), 1));
        assert!((got - &expected).amax() <= 1e-10 * expected.amax().max(1.0), "element {e}");
    }
}

#[test]
fn recorded_forces_match_replay() {
    let f = fom();
    let basis = build_decomposed_basis(&f.store, 5, 3).unwrap();
    assert!(f.store.element_forces.is_some());
    let mut bare = f.store.clone();
    bare.element_forces = None;
    let recorded = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1e-3).unwrap();
    let replayed = build_ecsw_training(&[(&bare, &f.asm)], &basis, 1e-3).unwrap();
    let scale = replayed.y.amax();
    assert!((&recorded.y - &replayed.y).amax() <= 1e-12 * scale);
}

#[test]
fn tolerance_extremes() {
    let f = fom();
    let basis = build_decomposed_basis(&f.store, 5, 3).unwrap();
    let mut t = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1.01).unwrap();
    assert!(compute_ecsw_weights(&t).unwrap().is_empty());
    t.tau = 1e-10;
    let w = compute_ecsw_weights(&t).unwrap();
    // elastic elements give nearly dependent columns, so the exact fit need
    // not be the unit vector; it must still reproduce b
    assert!(w.residual_ratio <= 1e-10, "{}", w.residual_ratio);
    assert!(w.len() > f.asm.n_elements() / 2, "{}", w.len());
}

#[test]
fn weights_meet_the_tolerance() {
    let f = fom();
    let basis = build_decomposed_basis(&f.store, 5, 3).unwrap();
    let mut t = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1e-3).unwrap();
    let b = DVector::from_column_slice(&t.b);
    let mut sizes = Vec::new();
    for tau in [1e-1, 1e-2, 1e-3, 1e-4] {
        t.tau = tau;
        let w = compute_ecsw_weights(&t).unwrap();
        assert!(!w.tolerance_not_met);
        let mut full = DVector::zeros(t.y.ncols());
        for (&e, &we) in w.elements.iter().zip(&w.weights) {
            full[e] = we;
        }
        let res = (&t.y * full - &b).norm();
        assert!(res <= tau * b.norm() * (1.0 + 1e-9), "τ = {tau}: {res}");
        assert!((res / b.norm() - w.residual_ratio).abs() < 1e-9);
        sizes.push(w.len());
    }
    assert!(sizes.windows(2).all(|s| s[0] <= s[1]), "{sizes:?}");
}

#[test]
fn unit_weights_reproduce_galerkin_bit_for_bit() {
    let f = fom();
    let basis = Arc::new(build_decomposed_basis(&f.store, 5, 3).unwrap());
    let cfg = SolverConfig { max_steps: 20, ..config() };
    let mut a = ProjectedSystem::galerkin(f.asm.clone(), basis.clone(), "top").unwrap();
    let mut b = ecsw_system(f.asm.clone(), basis, &EcswWeights::unit(f.asm.n_elements()), "top").unwrap();
    let ra = arc_length_run(&mut a, &cfg, f.record.load_resultant).unwrap();
    let rb = arc_length_run(&mut b, &cfg, f.record.load_resultant).unwrap();
    assert_eq!(ra.curve(), rb.curve());
}

#[test]
fn monolithic_basis_takes_the_same_path() {
    let f = fom();
    let svd = svd_thin(&f.store.solutions).unwrap();
    let phi = truncate_basis(&svd, 8).unwrap();
    let basis = Arc::new(ReducedBasis::from_columns(phi, f.store.fields.clone()).unwrap());
    assert_eq!((basis.m_u, basis.m_d), (0, 0));
    let t = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1e-4).unwrap();
    let w = compute_ecsw_weights(&t).unwrap();
    assert!(!w.is_empty() && w.len() <= f.asm.n_elements());
    let mut sys = ecsw_system(f.asm.clone(), basis, &w, "top").unwrap();
    let rec = arc_length_run(&mut sys, &replay(f), f.record.load_resultant).unwrap();
    assert!(curve_error(&f.record.curve(), &rec.curve(), 1000).unwrap().epsilon.is_finite());
}

#[test]
fn hyper_reduced_run_tracks_the_full_order_curve() {
    let f = fom();
    let basis = Arc::new(build_decomposed_basis(&f.store, 12, 6).unwrap());
    let t = build_ecsw_training(&[(&f.store, &f.asm)], &basis, 1e-5).unwrap();
    let w = compute_ecsw_weights(&t).unwrap();
    let mut sys = ecsw_system(f.asm.clone(), basis, &w, "top").unwrap();
    let rec = arc_length_run(&mut sys, &replay(f), f.record.load_resultant).unwrap();
    let e = curve_error(&f.record.curve(), &rec.curve(), 1000).unwrap();
    assert!(e.epsilon < 1e-2, "ε = {} with {} elements", e.epsilon, w.len());
}

#[test]
fn weights_file_round_trips() {
    let w = EcswWeights { tau: 1e-4, elements: vec![0, 3, 9], weights: vec![1.5, 0.25, 3.0], residual_ratio: 5e-5, tolerance_not_met: false };
    let text = serde_json::to_string_pretty(&w).unwrap();
    assert_eq!(serde_json::from_str::<EcswWeights>(&text).unwrap(), w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn support_is_scale_equivariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(12, 8, |_, _| rng.gen_range(0.0..1.0));
        let b = y.column_sum().as_slice().to_vec();
        let t = EcswTraining { y: y.clone(), b: b.clone(), tau: 0.05, snapshots: 2 };
        let s = EcswTraining { y: y * scale, b: b.iter().map(|v| v * scale).collect(), tau: 0.05, snapshots: 2 };
        let (a, c) = (compute_ecsw_weights(&t).unwrap(), compute_ecsw_weights(&s).unwrap());
        prop_assert_eq!(&a.elements, &c.elements);
        for (x, z) in a.weights.iter().zip(&c.weights) {
            prop_assert!((x - z).abs() <= 1e-8 * x.abs().max(1.0));
        }
    }
}
