use std::sync::{Arc, OnceLock};

use hyperred_core::assembly::{virgin_states, Assembler};
use hyperred_core::dofs::{number_dofs, BcSpec, Field};
use hyperred_core::dpod::*;
use hyperred_core::material::MaterialParams;
use hyperred_core::mesh::{unit_square, PlateGeometry};
use hyperred_core::metrics::curve_error;
use hyperred_core::solver::*;
use hyperred_core::Error;
use hyperred_testkit::{jacobi_eigen, Rows};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store_from(solutions: DMatrix<f64>, fields: Vec<Field>) -> SnapshotStore {
    SnapshotStore { internal_forces: solutions.clone(), solutions, nonlinear_forces: None, element_forces: None, fields, provenance: serde_json::Value::Null }
}

fn alternating_fields(n_nodes: usize) -> Vec<Field> {
    (0..3 * n_nodes).map(|i| if i % 3 == 2 { Field::Damage } else { Field::Displacement }).collect()
}

fn random_store(rng: &mut ChaCha8Rng, n_nodes: usize, cols: usize) -> SnapshotStore {
    let fields = alternating_fields(n_nodes);
    store_from(DMatrix::from_fn(fields.len(), cols, |_, _| rng.gen_range(-1.0..1.0)), fields)
}

struct Fom {
    asm: Arc<Assembler>,
    record: ContinuationRecord,
    store: SnapshotStore,
}

fn plate_config() -> SolverConfig {
    SolverConfig { initial_arc_length: 0.002, max_arc_length: 0.02, stop_after_peak: Some(0.15), ..Default::default() }
}

fn fom() -> &'static Fom {
    static FOM: OnceLock<Fom> = OnceLock::new();
    FOM.get_or_init(|| {
        let mesh = PlateGeometry::new(2.0, 0.5, 4.0, 6, 6).build().unwrap();
        let layout = number_dofs(&mesh, &BcSpec::quarter_plate()).unwrap();
        let asm = Arc::new(Assembler::new(Arc::new(mesh), Arc::new(layout), MaterialParams::reference(10.0)).unwrap());
        let mut sys = FomSystem::new(asm.clone(), "top").unwrap();
        let record = arc_length_run(&mut sys, &plate_config(), asm.layout.p_ref().iter().sum()).unwrap();
        let store = sys.snapshot_store(serde_json::Value::Null);
        Fom { asm, record, store }
    })
}

fn replay_config(store: &SnapshotStore, record: &ContinuationRecord) -> SolverConfig {
    SolverConfig {
        arc_schedule: Some(store.arc_schedule()),
        target_displacement: Some(record.steps.last().unwrap().u_control),
        stop_after_peak: None,
        ..plate_config()
    }
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Leading left singular vectors from the eigen-decomposition of `DᵀD`.
fn oracle_modes(d: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(&to_rows(&(d.transpose() * d)));
    let mut out = DMatrix::zeros(d.nrows(), m);
    for k in 0..m {
        let v = DVector::from_fn(d.ncols(), |i, _| vecs[i][k]);
        out.set_column(k, &(d * v / vals[k].sqrt()));
    }
    out
}

#[test]
fn split_is_exact_and_follows_field_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = random_store(&mut rng, 4, 5);
    let (u, d) = decompose_snapshots(&store).unwrap();
    assert_eq!(&u + &d, store.solutions);
    // a single element with nothing fixed: damage at local rows 2, 5, 8, 11
    let mesh = unit_square(1, 1.0);
    let layout = number_dofs(&mesh, &BcSpec::default()).unwrap();
    let fields = layout.free_fields();
    let damage: Vec<usize> = (0..fields.len()).filter(|&i| fields[i] == Field::Damage).collect();
    assert_eq!(damage, vec![2, 5, 8, 11]);
    let (_, dd) = decompose_snapshots(&store_from(DMatrix::from_element(12, 2, 1.0), fields)).unwrap();
    for i in 0..12 {
        assert_eq!(dd[(i, 0)] != 0.0, damage.contains(&i));
    }
}

#[test]
fn zero_damage_snapshots_split_to_zero() {
    let fields = alternating_fields(3);
    let d = DMatrix::from_fn(9, 2, |i, j| if fields[i] == Field::Damage { 0.0 } else { (i + j) as f64 });
    let (_, dd) = decompose_snapshots(&store_from(d, fields.clone())).unwrap();
    assert!(dd.iter().all(|&v| v == 0.0));
    // and no damage modes can be requested from them
    let err = build_decomposed_basis(&store_from(DMatrix::from_fn(9, 2, |i, j| if fields[i] == Field::Damage { 0.0 } else { (i * j + 1) as f64 }), fields), 1, 1);
    assert!(matches!(err, Err(Error::Rank { field: "damage", attainable: 0, .. })), "{err:?}");
}

#[test]
fn single_snapshot_modes_are_normalised_masked_snapshot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = random_store(&mut rng, 5, 1);
    let b = build_decomposed_basis(&store, 1, 1).unwrap();
    let (du, dd) = decompose_snapshots(&store).unwrap();
    for (col, d) in [(0, du), (1, dd)] {
        let expected = d.column(0) / d.column(0).norm();
        let got = b.phi.column(col);
        let sign = got.dot(&expected).signum();
        assert!((got * sign - expected).norm() < 1e-12);
    }
    assert!(build_decomposed_basis(&store, 2, 1).is_err());
}

#[test]
fn per_field_modes_match_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = random_store(&mut rng, 8, 6); // 24 × 6
    let b = build_decomposed_basis(&store, 3, 2).unwrap();
    assert_eq!((b.m_u, b.m_d, b.dim()), (3, 2, 5));
    let (du, dd) = decompose_snapshots(&store).unwrap();
    for (d, cols, m) in [(du, b.phi.columns(0, 3).into_owned(), 3), (dd, b.phi.columns(3, 2).into_owned(), 2)] {
        let o = oracle_modes(&d, m);
        // compare spans through the projectors (signs are arbitrary)
        let diff = &cols * cols.transpose() - &o * o.transpose();
        assert!(diff.amax() < 1e-8, "{}", diff.amax());
    }
    let gram = b.phi.transpose() * &b.phi;
    assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-10);
}

#[test]
fn basis_columns_respect_constraints_and_round_trip() {
    let f = fom();
    let b = build_decomposed_basis(&f.store, 5, 3).unwrap();
    // rows are free DOFs only, tagged like the layout
    assert_eq!(b.fields, f.asm.layout.free_fields());
    for (j, field) in b.column_fields.iter().enumerate() {
        let field = field.unwrap();
        assert!(b.phi.column(j).iter().zip(&b.fields).all(|(v, g)| *g == field || *v == 0.0));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("basis.hrsnap");
    b.save(&path).unwrap();
    assert_eq!(ReducedBasis::load(&path).unwrap(), b);
}

#[test]
fn identity_basis_reproduces_the_full_order_curve() {
    let f = fom();
    let n = f.asm.layout.n_free();
    let basis = Arc::new(ReducedBasis::from_columns(DMatrix::identity(n, n), f.asm.layout.free_fields()).unwrap());
    assert_eq!(basis.m_u + basis.m_d, n);
    let mut sys = ProjectedSystem::galerkin(f.asm.clone(), basis, "top").unwrap();
    let cfg = replay_config(&f.store, &f.record);
    let rec = arc_length_run(&mut sys, &cfg, f.record.load_resultant).unwrap();
    let e = curve_error(&f.record.curve(), &rec.curve(), 1000).unwrap();
    assert!(e.epsilon < 1e-8, "ε = {}", e.epsilon);
}

#[test]
fn converged_reduced_state_is_galerkin_orthogonal() {
    let f = fom();
    let basis = Arc::new(build_decomposed_basis(&f.store, 8, 4).unwrap());
    let mut sys = ProjectedSystem::galerkin(f.asm.clone(), basis.clone(), "top").unwrap();
    let lambda = 0.5 * f.record.steps[0].load_factor;
    let cfg = SolverConfig { abs_tol: 0.0, newton_tol: 1e-10, ..Default::default() };
    let out = newton_step(&mut sys, &vec![0.0; basis.dim()], lambda, &cfg).unwrap();
    let v = f.asm.layout.expand(&sys.reconstruct(&out.x));
    let g = f.asm.assemble_full(&v, &virgin_states(f.asm.n_elements()), lambda).unwrap().g;
    let projected = basis.phi.transpose() * DVector::from_vec(g.clone());
    let p = DVector::from_vec(f.asm.p_ref_free()).norm();
    assert!(projected.norm() <= 1e-9 * lambda * p, "{}", projected.norm());
    // the unprojected residual is not small: the space is truncated
    assert!(DVector::from_vec(g).norm() > projected.norm());
}

#[test]
fn more_modes_track_the_full_order_curve_better() {
    let f = fom();
    let cfg = replay_config(&f.store, &f.record);
    let eps: Vec<f64> = [(2, 2), (12, 6)]
        .iter()
        .map(|&(mu, md)| {
            let basis = Arc::new(build_decomposed_basis(&f.store, mu, md).unwrap());
            let mut sys = ProjectedSystem::galerkin(f.asm.clone(), basis, "top").unwrap();
            let rec = arc_length_run(&mut sys, &cfg, f.record.load_resultant).unwrap();
            curve_error(&f.record.curve(), &rec.curve(), 1000).unwrap().epsilon
        })
        .collect();
    assert!(eps[1] < eps[0] / 10.0, "{eps:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_sums_back_bit_exactly(seed in any::<u64>(), nodes in 1usize..8, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&mut rng, nodes, cols);
        let (u, d) = decompose_snapshots(&store).unwrap();
        prop_assert_eq!(&u + &d, store.solutions.clone());
    }

    #[test]
    fn projection_error_is_non_increasing_in_modes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&mut rng, 6, 5);
        let mut last = f64::INFINITY;
        for m in 1..=5 {
            let b = build_decomposed_basis(&store, m, m.min(5)).unwrap();
            let err = (&store.solutions - &b.phi * (b.phi.transpose() * &store.solutions)).norm();
            prop_assert!(err <= last + 1e-12);
            last = err;
        }
        prop_assert!(last < 1e-10);
    }
}
