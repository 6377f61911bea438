//! Decomposed POD: per-field snapshot split, per-field truncated SVD and the
//! Galerkin-projected system. The projected system also serves the ECSW
//! method, which only changes the element list and weights.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::assembly::{virgin_states, Assembler, ElementStates};
use crate::dofs::{DofLayout, Field, DOFS_PER_ELEMENT};
use crate::error::{Error, Result};
use crate::format;
use crate::linalg::{svd_thin, truncate_basis};
use crate::solver::{control_dofs, ContinuationSystem, DenseLu, Linearization, SnapshotStore};

const NE: usize = DOFS_PER_ELEMENT;

/// Splits `D` into `(D_U, D_D̄)`: copies of `D` with the rows of the other
/// field zeroed, so that `D_U + D_D̄ = D` exactly.
pub fn decompose_snapshots(store: &SnapshotStore) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    split_rows(&store.solutions, &store.fields)
}

pub(crate) fn split_rows(m: &DMatrix<f64>, fields: &[Field]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if m.ncols() == 0 {
        return Err(Error::Invalid("empty snapshot matrix".into()));
    }
    if m.nrows() != fields.len() {
        return Err(Error::Dimension(format!("{} snapshot rows but {} field tags", m.nrows(), fields.len())));
    }
    let mut u = m.clone();
    let mut d = m.clone();
    for (i, f) in fields.iter().enumerate() {
        match f {
            Field::Displacement => d.row_mut(i).fill(0.0),
            Field::Damage => u.row_mut(i).fill(0.0),
        }
    }
    Ok((u, d))
}

/// Projection basis on the free DOFs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedBasis {
    /// `n_free × (m_U + m_D)`; displacement modes first.
    pub phi: DMatrix<f64>,
    pub m_u: usize,
    pub m_d: usize,
    /// Field of each column; `None` for columns spanning both fields
    /// (monolithic bases used as a baseline only).
    pub column_fields: Vec<Option<Field>>,
    pub fields: Vec<Field>,
}

#[derive(Serialize, Deserialize)]
struct BasisSidecar {
    m_u: usize,
    m_d: usize,
    column_fields: Vec<Option<Field>>,
    fields: String,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// A basis from explicit columns; each column is tagged with the field
    /// it is supported on, or `None` if it mixes both.
    pub fn from_columns(phi: DMatrix<f64>, fields: Vec<Field>) -> Result<Self> {
        if phi.nrows() != fields.len() {
            return Err(Error::Dimension("basis rows do not match the field tags".into()));
        }
        let column_fields: Vec<Option<Field>> = phi
            .column_iter()
            .map(|c| {
                let on = |f: Field| c.iter().zip(&fields).any(|(v, g)| *g == f && *v != 0.0);
                match (on(Field::Displacement), on(Field::Damage)) {
                    (true, false) => Some(Field::Displacement),
                    (false, true) => Some(Field::Damage),
                    _ => None,
                }
            })
            .collect();
        let m_u = column_fields.iter().filter(|f| **f == Some(Field::Displacement)).count();
        let m_d = column_fields.iter().filter(|f| **f == Some(Field::Damage)).count();
        Ok(ReducedBasis { phi, m_u, m_d, column_fields, fields })
    }

    /// Reduced coordinates entering the arc-length constraint: displacement
    /// columns, or every column of a monolithic basis.
    pub fn displacement_mask(&self) -> Vec<bool> {
        let decomposed = self.column_fields.iter().all(Option::is_some);
        self.column_fields.iter().map(|f| !decomposed || *f == Some(Field::Displacement)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let fields: String = self.fields.iter().map(|f| if *f == Field::Displacement { 'u' } else { 'd' }).collect();
        let side = BasisSidecar { m_u: self.m_u, m_d: self.m_d, column_fields: self.column_fields.clone(), fields };
        format::save_matrix(path, &self.phi, &serde_json::to_value(side)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (phi, trailer) = format::load_matrix(path)?;
        let side: BasisSidecar = serde_json::from_value(trailer)?;
        let fields = side.fields.chars().map(|c| if c == 'u' { Field::Displacement } else { Field::Damage }).collect::<Vec<_>>();
        if fields.len() != phi.nrows() || side.column_fields.len() != phi.ncols() {
            return Err(Error::Format("basis sidecar does not match the matrix".into()));
        }
        Ok(ReducedBasis { phi, m_u: side.m_u, m_d: side.m_d, column_fields: side.column_fields, fields })
    }
}

/// Per-field SVD of the split snapshot matrices, truncated to `m_u` and
/// `m_d` modes and concatenated.
pub fn build_decomposed_basis(store: &SnapshotStore, m_u: usize, m_d: usize) -> Result<ReducedBasis> {
    let (du, dd) = decompose_snapshots(store)?;
    let phi_u = field_modes(&du, m_u, "displacement")?;
    let phi_d = field_modes(&dd, m_d, "damage")?;
    let n = store.fields.len();
    let mut phi = DMatrix::zeros(n, m_u + m_d);
    phi.columns_mut(0, m_u).copy_from(&phi_u);
    phi.columns_mut(m_u, m_d).copy_from(&phi_d);
    // the SVD leaves round-off on the other field's (zero) rows; make the
    // supports exactly disjoint
    for (i, f) in store.fields.iter().enumerate() {
        match f {
            Field::Displacement => phi.view_mut((i, m_u), (1, m_d)).fill(0.0),
            Field::Damage => phi.view_mut((i, 0), (1, m_u)).fill(0.0),
        }
    }
    let mut column_fields = vec![Some(Field::Displacement); m_u];
    column_fields.extend(vec![Some(Field::Damage); m_d]);
    Ok(ReducedBasis { phi, m_u, m_d, column_fields, fields: store.fields.clone() })
}

/// Leading `m` left singular vectors of `d`, checked against its numerical
/// rank.
pub(crate) fn field_modes(d: &DMatrix<f64>, m: usize, field: &'static str) -> Result<DMatrix<f64>> {
    let svd = svd_thin(d)?;
    let rank = svd.rank();
    if m == 0 || m > rank {
        return Err(Error::Rank { field, requested: m, attainable: rank });
    }
    truncate_basis(&svd, m)
}

/// `Φ_e`: the rows of `Φ` at the DOFs of element `e` (zero rows at fixed DOFs).
pub(crate) fn element_basis(asm: &Assembler, phi: &DMatrix<f64>, e: usize) -> DMatrix<f64> {
    let dofs = DofLayout::element_dofs(&asm.mesh, e);
    let mut pe = DMatrix::zeros(NE, phi.ncols());
    for (k, &d) in dofs.iter().enumerate() {
        if let Some(f) = asm.layout.free_index(d) {
            pe.row_mut(k).copy_from(&phi.row(f));
        }
    }
    pe
}

pub(crate) fn check_layout(asm: &Assembler, basis: &ReducedBasis) -> Result<()> {
    if basis.fields != asm.layout.free_fields() {
        return Err(Error::Dimension(format!(
            "basis has {} rows but the layout has {} free DOFs (or the field pattern differs)",
            basis.fields.len(),
            asm.layout.n_free()
        )));
    }
    Ok(())
}

/// Iterates visited by a reduced system (for iterate-level comparisons).
pub type IterateTrace = Vec<(Vec<f64>, f64)>;

/// `K̂ = Σ w_e Φ_eᵀ K_e Φ_e`, `R̂ = Σ w_e Φ_eᵀ R_e` over an element list.
/// With every element at unit weight this is the decomposed-POD Galerkin
/// system; with an ECSW element set and weights it is the hyper-reduced one.
pub struct ProjectedSystem {
    pub asm: Arc<Assembler>,
    pub basis: Arc<ReducedBasis>,
    pub elements: Vec<usize>,
    pub weights: Vec<f64>,
    element_phi: Vec<DMatrix<f64>>,
    /// Gauss-point histories of the listed elements, aligned with `elements`.
    committed: Vec<ElementStates>,
    trial: Vec<ElementStates>,
    p_hat: Vec<f64>,
    mask: Vec<bool>,
    control_rows: DMatrix<f64>,
    pub trace: Option<IterateTrace>,
}

impl ProjectedSystem {
    /// Galerkin projection with every element at unit weight.
    pub fn galerkin(asm: Arc<Assembler>, basis: Arc<ReducedBasis>, control_set: &str) -> Result<Self> {
        let all: Vec<usize> = (0..asm.n_elements()).collect();
        let ones = vec![1.0; all.len()];
        Self::weighted(asm, basis, all, ones, control_set)
    }

    pub fn weighted(asm: Arc<Assembler>, basis: Arc<ReducedBasis>, elements: Vec<usize>, weights: Vec<f64>, control_set: &str) -> Result<Self> {
        check_layout(&asm, &basis)?;
        if elements.len() != weights.len() {
            return Err(Error::Dimension("one weight per element required".into()));
        }
        if let Some(&bad) = elements.iter().find(|&&e| e >= asm.n_elements()) {
            return Err(Error::UnknownElement(bad));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Invalid(format!("element weight {w} must be positive")));
        }
        let element_phi = elements.iter().map(|&e| element_basis(&asm, &basis.phi, e)).collect();
        let p_hat = (basis.phi.transpose() * nalgebra::DVector::from_vec(asm.p_ref_free())).as_slice().to_vec();
        let control_rows = control_rows(&asm, &basis.phi, control_set)?;
        let n = elements.len();
        Ok(ProjectedSystem {
            mask: basis.displacement_mask(),
            asm,
            basis,
            elements,
            weights,
            element_phi,
            committed: virgin_states(n),
            trial: virgin_states(n),
            p_hat,
            control_rows,
            trace: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Full free-DOF state `V = Φ V̂`.
    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        (&self.basis.phi * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// Reduced internal force and tangent at `x` from the committed history
    /// (no external load, no state update).
    pub fn reduced_forces(&mut self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (r, k, _) = self.project(x)?;
        Ok((r, k))
    }

    fn project(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, Vec<ElementStates>)> {
        let m = self.basis.dim();
        if x.len() != m {
            return Err(Error::Dimension(format!("reduced state has length {} but the basis has {m} modes", x.len())));
        }
        let v = self.asm.layout.expand(&self.reconstruct(x));
        let mut r_hat = nalgebra::DVector::zeros(m);
        let mut k_hat = DMatrix::zeros(m, m);
        let mut states = self.committed.clone();
        let committed = &self.committed;
        self.asm.evaluate(&v, &self.elements, |k| &committed[k], |k, _, out| {
            let w = self.weights[k];
            let pe = &self.element_phi[k];
            let ke = SMatrix::<f64, NE, NE>::from_fn(|i, j| out.k[i][j]);
            let re = nalgebra::DVector::from_column_slice(&out.r);
            let t = ke * pe;
            k_hat.gemm_tr(w, pe, &t, 1.0);
            r_hat.gemv_tr(w, pe, &re, 1.0);
            states[k] = out.states;
        })?;
        Ok((r_hat.as_slice().to_vec(), k_hat, states))
    }
}

pub(crate) fn control_rows(asm: &Assembler, phi: &DMatrix<f64>, set: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<usize> = control_dofs(asm, set)?.into_iter().filter_map(|d| asm.layout.free_index(d)).collect();
    if rows.is_empty() {
        return Err(Error::Invalid(format!("node set `{set}` has no free control DOFs")));
    }
    Ok(phi.select_rows(&rows))
}

pub(crate) fn control_value(rows: &DMatrix<f64>, x: &[f64]) -> f64 {
    (rows * nalgebra::DVector::from_column_slice(x)).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl ContinuationSystem for ProjectedSystem {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn linearize(&mut self, x: &[f64], lambda: f64) -> Result<Linearization> {
        if let Some(t) = self.trace.as_mut() {
            t.push((x.to_vec(), lambda));
        }
        let t0 = Instant::now();
        let (r_hat, k_hat, states) = self.project(x)?;
        let t_assembly = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let g: Vec<f64> = r_hat.iter().zip(&self.p_hat).map(|(r, p)| r - lambda * p).collect();
        let lu = DenseLu::new(k_hat)?;
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

#[cfg(test)]
mod tests {
    use super::*;

    fn store(n_nodes: usize, cols: usize) -> SnapshotStore {
        let fields: Vec<Field> = (0..3 * n_nodes).map(DofLayout::field_of).collect();
        let solutions = DMatrix::from_fn(3 * n_nodes, cols, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + (i as f64 * 0.37 + j as f64).sin());
        SnapshotStore { internal_forces: solutions.clone(), solutions, nonlinear_forces: None, element_forces: None, fields, provenance: serde_json::Value::Null }
    }

    #[test]
    fn split_is_exact_and_field_pure() {
        let s = store(4, 3);
        let (u, d) = decompose_snapshots(&s).unwrap();
        assert_eq!(&u + &d, s.solutions);
        for i in [2, 5, 8, 11] {
            assert!(u.row(i).iter().all(|&v| v == 0.0));
        }
        for i in [0, 1, 3, 4, 6, 7, 9, 10] {
            assert!(d.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_snapshot_gives_normalised_masked_columns() {
        let s = store(4, 1);
        let b = build_decomposed_basis(&s, 1, 1).unwrap();
        let (u, d) = decompose_snapshots(&s).unwrap();
        let cu = u.column(0) / u.column(0).norm();
        let cd = d.column(0) / d.column(0).norm();
        let sign = |a: f64| a.signum();
        assert!((b.phi.column(0) - &cu * sign(b.phi.column(0).dot(&cu))).norm() < 1e-14);
        assert!((b.phi.column(1) - &cd * sign(b.phi.column(1).dot(&cd))).norm() < 1e-14);
        assert!(matches!(build_decomposed_basis(&s, 2, 1), Err(Error::Rank { field: "displacement", attainable: 1, .. })));
    }

    #[test]
    fn basis_round_trips_through_container() {
        let s = store(5, 4);
        let b = build_decomposed_basis(&s, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.hrsnap");
        b.save(&path).unwrap();
        assert_eq!(ReducedBasis::load(&path).unwrap(), b);
    }
}
