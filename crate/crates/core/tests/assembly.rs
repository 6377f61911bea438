use std::collections::BTreeMap;
use std::sync::Arc;

use hyperred_core::assembly::{element_kernel, virgin_states, Assembler};
use hyperred_core::dofs::{number_dofs, BcSpec, Constraint, Component, DofLayout};
use hyperred_core::material::{GaussPointState, MaterialParams};
use hyperred_core::mesh::{unit_square, Mesh};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn distorted_patch() -> Mesh {
    // 2×2 patch with a displaced interior node
    let nodes = vec![
        [0.0, 0.0], [1.0, 0.0], [2.0, 0.0],
        [0.0, 1.0], [1.15, 0.9], [2.0, 1.0],
        [0.0, 2.0], [1.0, 2.0], [2.0, 2.0],
    ];
    let elements = vec![[0, 1, 4, 3], [1, 2, 5, 4], [3, 4, 7, 6], [4, 5, 8, 7]];
    let mut node_sets = BTreeMap::new();
    node_sets.insert("bottom".to_string(), vec![0, 1, 2]);
    node_sets.insert("left".to_string(), vec![0, 3, 6]);
    Mesh { nodes, elements, node_sets, thickness: 1.0 }
}

fn assembler(mesh: Mesh, bc: &BcSpec) -> Assembler {
    let layout = number_dofs(&mesh, bc).unwrap();
    Assembler::new(Arc::new(mesh), Arc::new(layout), MaterialParams::reference(10.0)).unwrap()
}

fn random_v(rng: &mut ChaCha8Rng, asm: &Assembler, scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..asm.layout.n_dofs)
        .map(|d| if d % 3 == 2 { rng.gen_range(0.0..0.05) } else { scale * rng.gen_range(-1.0..1.0) })
        .collect();
    for &d in &asm.layout.fixed_dofs {
        v[d] = 0.0;
    }
    v
}

#[test]
fn element_tangent_matches_finite_differences() {
    let p = MaterialParams::reference(10.0);
    let coords = [[0.0, 0.0], [1.1, 0.1], [1.0, 0.9], [-0.1, 1.2]];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let v: [f64; 12] = std::array::from_fn(|d| if d % 3 == 2 { rng.gen_range(0.0..0.05) } else { rng.gen_range(-0.04..0.04) });
        // history from a previous partial step
        let half: [f64; 12] = std::array::from_fn(|d| 0.5 * v[d]);
        let states = element_kernel(&coords, 1.0, &half, &[GaussPointState::virgin(); 4], &p, 1.0).unwrap().states;
        let out = element_kernel(&coords, 1.0, &v, &states, &p, 1.0).unwrap();
        let scale = out.k.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        for c in 0..12 {
            let h = 1e-7;
            let mut vp = v;
            let mut vm = v;
            vp[c] += h;
            vm[c] -= h;
            let rp = element_kernel(&coords, 1.0, &vp, &states, &p, 1.0).unwrap().r;
            let rm = element_kernel(&coords, 1.0, &vm, &states, &p, 1.0).unwrap().r;
            for r in 0..12 {
                let fd = (rp[r] - rm[r]) / (2.0 * h);
                assert!((fd - out.k[r][c]).abs() <= 1e-5 * scale, "K[{r}][{c}] = {} vs FD {fd}", out.k[r][c]);
            }
        }
    }
}

#[test]
fn global_tangent_matches_finite_differences() {
    let bc = BcSpec {
        fixed: vec![
            Constraint { node_set: "bottom".into(), component: Component::Uy },
            Constraint { node_set: "left".into(), component: Component::Ux },
        ],
        tractions: vec![],
    };
    let asm = assembler(unit_square(2, 1.0), &bc);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let states = virgin_states(asm.n_elements());
    for _ in 0..3 {
        let v = random_v(&mut rng, &asm, 0.03);
        let sys = asm.assemble_full(&v, &states, 0.3).unwrap();
        let k = asm.pattern.to_dense(&sys.k_values);
        let scale = k.abs().max();
        let free = asm.layout.free_dofs().to_vec();
        let mut worst = 0.0f64;
        for (c, &d) in free.iter().enumerate() {
            let h = 1e-7;
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[d] += h;
            vm[d] -= h;
            let gp = asm.assemble_full(&vp, &states, 0.3).unwrap().g;
            let gm = asm.assemble_full(&vm, &states, 0.3).unwrap().g;
            for r in 0..free.len() {
                let fd = (gp[r] - gm[r]) / (2.0 * h);
                worst = worst.max((fd - k[(r, c)]).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "max relative entry error {worst}");
    }
}

#[test]
fn patch_test_reproduces_constant_stress() {
    let asm = assembler(distorted_patch(), &BcSpec::default());
    let (a, b, c, d) = (2e-4, -0.5e-4, 0.3e-4, 1e-4);
    let mut v = vec![0.0; asm.layout.n_dofs];
    for (n, x) in asm.mesh.nodes.iter().enumerate() {
        v[3 * n] = a * x[0] + b * x[1];
        v[3 * n + 1] = c * x[0] + d * x[1];
    }
    let sys = asm.assemble_full(&v, &virgin_states(4), 0.0).unwrap();
    let scale = sys.r_full.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // interior node 4 is in equilibrium
    for comp in 0..3 {
        assert!(sys.r_full[12 + comp].abs() <= 1e-8 * scale, "{}", sys.r_full[12 + comp]);
    }
    // every element sees the same Gauss-point state (uniform deformation)
    let reference = sys.states[0][0];
    for e in &sys.states {
        for s in e {
            for k in 0..6 {
                assert!((s.cp[k] - reference.cp[k]).abs() < 1e-14);
            }
        }
    }
    // constant stress: element residuals equal those of the same
    // element under an exactly uniform field
    let total: Vec<f64> = (0..2).map(|c| (0..9).map(|n| sys.r_full[3 * n + c]).sum()).collect();
    assert!(total.iter().all(|t| t.abs() <= 1e-8 * scale));
}

#[test]
fn subset_all_unit_weights_is_bit_identical() {
    let asm = assembler(unit_square(3, 2.0), &BcSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random_v(&mut rng, &asm, 0.02);
    let states = virgin_states(asm.n_elements());
    let full = asm.assemble_full(&v, &states, 0.0).unwrap();
    let all: Vec<usize> = (0..asm.n_elements()).collect();
    let sub = asm.assemble_subset(&v, &states, &all, &vec![1.0; all.len()]).unwrap();
    assert_eq!(full.r_full, sub.r_full);
    assert_eq!(full.k_values, sub.k_values);
}

#[test]
fn weighted_subset_matches_per_element_scatter() {
    let asm = assembler(unit_square(3, 2.0), &BcSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let v = random_v(&mut rng, &asm, 0.02);
    let states = virgin_states(asm.n_elements());
    let sub = asm.assemble_subset(&v, &states, &[2, 7], &[2.0, 0.5]).unwrap();
    let mut oracle = vec![0.0; asm.layout.n_dofs];
    for (e, w) in [(2usize, 2.0), (7, 0.5)] {
        let out = element_kernel(&asm.mesh.element_coords(e), 1.0, &asm.element_values(&v, e), &states[e], &asm.params, 1.0).unwrap();
        for (k, &d) in DofLayout::element_dofs(&asm.mesh, e).iter().enumerate() {
            oracle[d] += w * out.r[k];
        }
    }
    for (a, b) in sub.r_full.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    let empty = asm.assemble_subset(&v, &states, &[], &[]).unwrap();
    assert!(empty.r_full.iter().all(|&x| x == 0.0));
    assert!(empty.k_values.iter().all(|&x| x == 0.0));
    assert!(asm.assemble_subset(&v, &states, &[99], &[1.0]).is_err());
}

#[test]
fn load_enters_displacement_rows_only() {
    let mut mesh = unit_square(2, 1.0);
    mesh.node_sets.insert("all_top".into(), mesh.node_sets["top"].clone());
    let bc = BcSpec {
        fixed: vec![Constraint { node_set: "bottom".into(), component: Component::Uy }, Constraint { node_set: "left".into(), component: Component::Ux }],
        tractions: vec![hyperred_core::dofs::Traction { node_set: "all_top".into(), component: Component::Uy, magnitude: 1.0 }],
    };
    let asm = assembler(mesh, &bc);
    let v = vec![0.0; asm.layout.n_dofs];
    let s = virgin_states(asm.n_elements());
    let g0 = asm.assemble_full(&v, &s, 0.0).unwrap().g;
    let g1 = asm.assemble_full(&v, &s, 7.0).unwrap().g;
    for (k, &d) in asm.layout.free_dofs().iter().enumerate() {
        if d % 3 == 2 {
            assert_eq!(g0[k], g1[k]);
        }
    }
    assert!(g0.iter().zip(&g1).any(|(a, b)| a != b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn subset_partition_sums_to_full(seed in any::<u64>(), split in 0usize..9) {
        let asm = assembler(unit_square(3, 1.0), &BcSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_v(&mut rng, &asm, 0.01);
        let s = virgin_states(9);
        let full = asm.assemble_full(&v, &s, 0.0).unwrap();
        let (a, b): (Vec<usize>, Vec<usize>) = (0..9).partition(|&e| (e * 7 + split) % 3 == 0);
        let ra = asm.assemble_subset(&v, &s, &a, &vec![1.0; a.len()]).unwrap();
        let rb = asm.assemble_subset(&v, &s, &b, &vec![1.0; b.len()]).unwrap();
        let scale = full.r_full.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        for i in 0..full.r_full.len() {
            prop_assert!((ra.r_full[i] + rb.r_full[i] - full.r_full[i]).abs() <= 1e-12 * scale);
        }
    }
}
