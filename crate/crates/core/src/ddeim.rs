//! Decomposed DEIM: per-field nonlinear-force bases, greedy interpolation
//! DOFs, the constant interpolation operator `M = Φᵀ Ω (Zᵀ Ω)⁻¹` and the
//! hyper-reduced system that evaluates only elements touching a selected DOF.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::assembly::{spmv, virgin_states, Assembler, ElementStates};
use crate::dofs::{DofLayout, Field, DOFS_PER_ELEMENT, DOFS_PER_NODE};
use crate::dpod::{check_layout, control_rows, control_value, element_basis, split_rows, IterateTrace, ReducedBasis};
use crate::error::{Error, Result};
use crate::format;
use crate::linalg::{svd_thin, truncate_basis};
use crate::solver::{record_nonlinear_snapshots, ContinuationSystem, DenseLu, Linearization, SnapshotStore};

const NE: usize = DOFS_PER_ELEMENT;

/// Nonlinear-force singular values below this fraction of the leading
/// internal-force singular value of the same field count as zero: with
/// finite-strain kinematics a nominally linear response still leaves a
/// relative nonlinear part of order the strain.
pub const NONLINEAR_RANK_FLOOR: f64 = 1e-6;

/// Greedy interpolation indices for the columns of `omega`: the first index
/// maximises `|ω₁|`; each further one maximises the residual of interpolating
/// the next column at the indices chosen so far. Ties go to the lowest index.
pub fn deim_greedy(omega: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, k) = omega.shape();
    if k == 0 || n < k {
        return Err(Error::Dimension(format!("DEIM needs 1 ≤ k ≤ n (got a {n}×{k} basis)")));
    }
    let argmax = |v: &DVector<f64>| {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        best
    };
    let first = omega.column(0).into_owned();
    let p0 = argmax(&first);
    if first[p0] == 0.0 {
        return Err(Error::Singular("DEIM iteration 1: zero basis vector".into()));
    }
    let mut p = vec![p0];
    for i in 1..k {
        let phi = omega.column(i).into_owned();
        let a = DMatrix::from_fn(i, i, |r, c| omega[(p[r], c)]);
        let rhs = DVector::from_fn(i, |r, _| phi[p[r]]);
        let c = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("DEIM iteration {}: singular interpolation matrix", i + 1)))?;
        let r = &phi - omega.columns(0, i) * c;
        let next = argmax(&r);
        if !(r[next].abs() > 1e-14 * phi.norm()) {
            return Err(Error::Singular(format!("DEIM iteration {}: basis vector lies in the span of the previous ones", i + 1)));
        }
        p.push(next);
    }
    Ok(p)
}

/// Elements with at least one node carrying a selected (free) DOF.
pub fn evaluation_elements(asm: &Assembler, selected: &[usize]) -> Vec<usize> {
    let nodes: BTreeSet<usize> = selected.iter().map(|&f| asm.layout.free_dofs()[f] / DOFS_PER_NODE).collect();
    let node_elements = asm.mesh.node_elements();
    let mut set = BTreeSet::new();
    for n in nodes {
        set.extend(node_elements[n].iter().copied());
    }
    set.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct DeimOperator {
    /// `n_free × (k_U + k_D)`, displacement block first.
    pub omega: DMatrix<f64>,
    /// Interpolation DOFs (free indices), displacement block first.
    pub selected: Vec<usize>,
    pub k_u: usize,
    pub k_d: usize,
    /// `Φᵀ Ω (Zᵀ Ω)⁻¹`.
    pub m: DMatrix<f64>,
    /// `Φᵀ K_lin Φ`.
    pub k_lin_reduced: DMatrix<f64>,
    /// `Zᵀ K_lin Φ`.
    pub zt_k_lin_phi: DMatrix<f64>,
    pub evaluation_elements: Vec<usize>,
    /// 2-norm condition number of `Zᵀ Ω`.
    pub condition_number: f64,
    /// `‖(Zᵀ Ω)⁻¹‖₂`.
    pub inverse_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct DeimSidecar {
    k_u: usize,
    k_d: usize,
    selected: Vec<usize>,
    evaluation_elements: Vec<usize>,
    n_evaluation_elements: usize,
    condition_number: f64,
}

impl DeimOperator {
    /// Builds the operator from given per-field nonlinear-force bases.
    pub fn from_bases(omega_u: &DMatrix<f64>, omega_d: &DMatrix<f64>, basis: &ReducedBasis, asm: &Assembler) -> Result<Self> {
        check_layout(asm, basis)?;
        let n = basis.fields.len();
        if omega_u.nrows() != n || omega_d.nrows() != n {
            return Err(Error::Dimension("Ω blocks do not match the basis rows".into()));
        }
        let mut selected = deim_greedy(omega_u)?;
        selected.extend(deim_greedy(omega_d)?);
        let (k_u, k_d) = (omega_u.ncols(), omega_d.ncols());
        let mut omega = DMatrix::zeros(n, k_u + k_d);
        omega.columns_mut(0, k_u).copy_from(omega_u);
        omega.columns_mut(k_u, k_d).copy_from(omega_d);
        let mut seen = BTreeSet::new();
        if let Some(&dup) = selected.iter().find(|&&p| !seen.insert(p)) {
            return Err(Error::Singular(format!("interpolation DOF {dup} selected twice")));
        }
        let zt_omega = omega.select_rows(&selected);
        let svd = zt_omega.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 0.0) {
            return Err(Error::Singular("Zᵀ Ω is singular".into()));
        }
        let b = basis.phi.transpose() * &omega;
        let mt = zt_omega
            .transpose()
            .lu()
            .solve(&b.transpose())
            .ok_or_else(|| Error::Singular("Zᵀ Ω is singular".into()))?;
        let mut op = DeimOperator {
            omega,
            evaluation_elements: evaluation_elements(asm, &selected),
            selected,
            k_u,
            k_d,
            m: mt.transpose(),
            k_lin_reduced: DMatrix::zeros(0, 0),
            zt_k_lin_phi: DMatrix::zeros(0, 0),
            condition_number: smax / smin,
            inverse_norm: 1.0 / smin,
        };
        op.bind(asm, basis)?;
        Ok(op)
    }

    /// Recomputes the zero-state stiffness parts for `asm` (e.g. another
    /// geometry with the same topology).
    pub fn bind(&mut self, asm: &Assembler, basis: &ReducedBasis) -> Result<()> {
        check_layout(asm, basis)?;
        let k_lin = asm.k_lin()?;
        let mut k_phi = DMatrix::zeros(basis.phi.nrows(), basis.dim());
        for j in 0..basis.dim() {
            let col: Vec<f64> = basis.phi.column(j).iter().copied().collect();
            k_phi.column_mut(j).copy_from_slice(&spmv(&asm.pattern, &k_lin, &col));
        }
        self.k_lin_reduced = basis.phi.transpose() * &k_phi;
        self.zt_k_lin_phi = k_phi.select_rows(&self.selected);
        self.evaluation_elements = evaluation_elements(asm, &self.selected);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// `Ω (Zᵀ Ω)⁻¹ Zᵀ v`.
    pub fn interpolate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let zt_omega = self.omega.select_rows(&self.selected);
        let zv = DVector::from_fn(self.k(), |i, _| v[self.selected[i]]);
        let c = zt_omega.lu().solve(&zv).ok_or_else(|| Error::Singular("Zᵀ Ω is singular".into()))?;
        Ok(&self.omega * c)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let side = DeimSidecar {
            k_u: self.k_u,
            k_d: self.k_d,
            selected: self.selected.clone(),
            n_evaluation_elements: self.evaluation_elements.len(),
            evaluation_elements: self.evaluation_elements.clone(),
            condition_number: self.condition_number,
        };
        let side = serde_json::to_value(side)?;
        format::save_matrix(&dir.join("deim_omega.hrsnap"), &self.omega, &side)?;
        format::save_matrix(&dir.join("deim_m.hrsnap"), &self.m, &side)?;
        std::fs::write(dir.join("deim.json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Loads a saved operator and binds it to `asm`.
    pub fn load(dir: &Path, basis: &ReducedBasis, asm: &Assembler) -> Result<Self> {
        let (omega, side) = format::load_matrix(&dir.join("deim_omega.hrsnap"))?;
        let (m, _) = format::load_matrix(&dir.join("deim_m.hrsnap"))?;
        let side: DeimSidecar = serde_json::from_value(side)?;
        if omega.ncols() != side.k_u + side.k_d || side.selected.len() != omega.ncols() || m.shape() != (basis.dim(), omega.ncols()) {
            return Err(Error::Format("DEIM operator files are inconsistent".into()));
        }
        let mut op = DeimOperator {
            omega,
            selected: side.selected,
            k_u: side.k_u,
            k_d: side.k_d,
            m,
            k_lin_reduced: DMatrix::zeros(0, 0),
            zt_k_lin_phi: DMatrix::zeros(0, 0),
            evaluation_elements: side.evaluation_elements,
            condition_number: side.condition_number,
            inverse_norm: f64::NAN,
        };
        op.bind(asm, basis)?;
        Ok(op)
    }
}

/// Per-field SVD of the nonlinear-force snapshots, truncated to `k_u` and
/// `k_d`, greedy selection and operator assembly. Nonlinear snapshots are
/// recorded with `asm`'s zero-state stiffness if the store lacks them.
pub fn build_deim_operator(store: &SnapshotStore, basis: &ReducedBasis, k_u: usize, k_d: usize, asm: &Assembler) -> Result<DeimOperator> {
    let mut owned;
    let store = if store.nonlinear_forces.is_some() {
        store
    } else {
        owned = store.clone();
        record_nonlinear_snapshots(&mut owned, asm, &asm.k_lin()?)?;
        &owned
    };
    let nl = store.nonlinear_forces.as_ref().expect("recorded above");
    let (nu, nd) = split_rows(nl, &store.fields)?;
    let (ru, rd) = split_rows(&store.internal_forces, &store.fields)?;
    let omega_u = nonlinear_modes(&nu, &ru, k_u, "displacement")?;
    let omega_d = nonlinear_modes(&nd, &rd, k_d, "damage")?;
    DeimOperator::from_bases(&omega_u, &omega_d, basis, asm)
}

fn nonlinear_modes(nl: &DMatrix<f64>, full: &DMatrix<f64>, k: usize, field: &'static str) -> Result<DMatrix<f64>> {
    let svd = svd_thin(nl)?;
    let scale = full.clone().svd(false, false).singular_values.max();
    let floor = NONLINEAR_RANK_FLOOR * scale;
    let rank = svd.singular_values.iter().take(svd.rank()).filter(|&&s| s > floor).count();
    if k == 0 || k > rank {
        return Err(Error::Rank { field, requested: k, attainable: rank });
    }
    truncate_basis(&svd, k)
}

/// `Ĝ = K̂_lin V̂ + M Zᵀ R_nl(Φ V̂) − λ Φᵀ P` with tangent
/// `K̂_lin + M Zᵀ K_nl Φ`, evaluated from the selected rows only.
pub struct DeimSystem {
    pub asm: Arc<Assembler>,
    pub basis: Arc<ReducedBasis>,
    pub op: Arc<DeimOperator>,
    /// For each evaluation element: `(local row, selection index)` pairs.
    rows: Vec<Vec<(usize, usize)>>,
    element_phi: Vec<DMatrix<f64>>,
    committed: Vec<ElementStates>,
    trial: Vec<ElementStates>,
    p_hat: Vec<f64>,
    mask: Vec<bool>,
    control_rows: DMatrix<f64>,
    pub trace: Option<IterateTrace>,
}

impl DeimSystem {
    pub fn new(asm: Arc<Assembler>, basis: Arc<ReducedBasis>, op: Arc<DeimOperator>, control_set: &str) -> Result<Self> {
        check_layout(&asm, &basis)?;
        if op.m.nrows() != basis.dim() || op.k_lin_reduced.shape() != (basis.dim(), basis.dim()) {
            return Err(Error::Dimension("DEIM operator does not match the basis".into()));
        }
        let mut selection = vec![None; asm.layout.n_dofs];
        for (s, &f) in op.selected.iter().enumerate() {
            selection[asm.layout.free_dofs()[f]] = Some(s);
        }
        let rows = op
            .evaluation_elements
            .iter()
            .map(|&e| {
                DofLayout::element_dofs(&asm.mesh, e)
                    .iter()
                    .enumerate()
                    .filter_map(|(l, &d)| selection[d].map(|s| (l, s)))
                    .collect()
            })
            .collect();
        let element_phi = op.evaluation_elements.iter().map(|&e| element_basis(&asm, &basis.phi, e)).collect();
        let p_hat = (basis.phi.transpose() * DVector::from_vec(asm.p_ref_free())).as_slice().to_vec();
        let n_el = op.evaluation_elements.len();
        Ok(DeimSystem {
            control_rows: control_rows(&asm, &basis.phi, control_set)?,
            mask: basis.displacement_mask(),
            asm,
            basis,
            op,
            rows,
            element_phi,
            committed: virgin_states(n_el),
            trial: virgin_states(n_el),
            p_hat,
            trace: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        (&self.basis.phi * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

impl ContinuationSystem for DeimSystem {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn linearize(&mut self, x: &[f64], lambda: f64) -> Result<Linearization> {
        if let Some(t) = self.trace.as_mut() {
            t.push((x.to_vec(), lambda));
        }
        let m = self.basis.dim();
        if x.len() != m {
            return Err(Error::Dimension(format!("reduced state has length {} but the basis has {m} modes", x.len())));
        }
        let t0 = Instant::now();
        let k = self.op.k();
        let v = self.asm.layout.expand(&self.reconstruct(x));
        let mut zr = DVector::zeros(k);
        let mut zk_phi = DMatrix::zeros(k, m);
        let mut states = self.committed.clone();
        let committed = &self.committed;
        let rows = &self.rows;
        let element_phi = &self.element_phi;
        self.asm.evaluate(&v, &self.op.evaluation_elements, |i| &committed[i], |i, _, out| {
            if !rows[i].is_empty() {
                let ke = SMatrix::<f64, NE, NE>::from_fn(|a, b| out.k[a][b]);
                let t = ke * &element_phi[i];
                for &(l, s) in &rows[i] {
                    zr[s] += out.r[l];
                    let mut row = zk_phi.row_mut(s);
                    row += t.row(l);
                }
            }
            states[i] = out.states;
        })?;
        let t_assembly = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let xv = DVector::from_column_slice(x);
        let zr_nl = zr - &self.op.zt_k_lin_phi * &xv;
        let g_hat = &self.op.k_lin_reduced * &xv + &self.op.m * zr_nl;
        let g: Vec<f64> = g_hat.iter().zip(&self.p_hat).map(|(r, p)| r - lambda * p).collect();
        let tangent = &self.op.k_lin_reduced + &self.op.m * (zk_phi - &self.op.zt_k_lin_phi);
        let lu = DenseLu::new(tangent)?;
        let t_factor = t1.elapsed().as_secs_f64();
        self.trial = states;
        Ok(Linearization { g, tangent: Box::new(lu), t_assembly, t_factor })
    }

    fn commit(&mut self) {
        self.committed.clone_from(&self.trial);
    }

    fn reference_load(&self) -> &[f64] {
        &self.p_hat
    }

    fn displacement_mask(&self) -> &[bool] {
        &self.mask
    }

    fn control_displacement(&self, x: &[f64]) -> f64 {
        control_value(&self.control_rows, x)
    }

    fn element_evaluations(&self) -> u64 {
        self.asm.evaluations()
    }
}

/// Identity-column bases `[e_i]` over the free DOFs of each field (the
/// "all DOFs selected" operator).
pub fn identity_bases(fields: &[Field]) -> (DMatrix<f64>, DMatrix<f64>) {
    let pick = |f: Field| {
        let rows: Vec<usize> = (0..fields.len()).filter(|&i| fields[i] == f).collect();
        let mut m = DMatrix::zeros(fields.len(), rows.len());
        for (c, &r) in rows.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        m
    };
    (pick(Field::Displacement), pick(Field::Damage))
}
