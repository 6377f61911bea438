//! Element kernels for the coupled displacement / micromorphic-damage weak
//! forms and their (weighted, possibly restricted) global assembly.
//!
//! Element DOFs follow the layout order `(u_x, u_y, D̄)` per node. Plane
//! strain: `F₃₃ = 1`. Dirichlet DOFs are eliminated; the global tangent lives
//! on the free DOFs only, while internal forces are kept on all DOFs so that
//! reactions can be recovered.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use rayon::prelude::*;

use crate::dofs::{DofLayout, DOFS_PER_ELEMENT, DOFS_PER_NODE};
use crate::error::{Error, MaterialError, Result};
use crate::material::{stress_update, GaussPointState, MaterialParams};
use crate::mesh::{shape, Mesh, GAUSS_2X2};
use crate::tensor::SYM_INDEX;

const NE: usize = DOFS_PER_ELEMENT;

pub type ElementStates = [GaussPointState; 4];

pub fn virgin_states(n_elements: usize) -> Vec<ElementStates> {
    vec![[GaussPointState::virgin(); 4]; n_elements]
}

#[derive(Clone, Debug)]
pub struct ElementKernelOutput {
    pub r: [f64; NE],
    /// Row-major `∂r/∂V`.
    pub k: [[f64; NE]; NE],
    /// Uncommitted Gauss-point states.
    pub states: ElementStates,
    pub damage_capped: bool,
}

/// Spatial derivatives of the shape functions and the volume weight.
fn gauss_geometry(coords: &[[f64; 2]; 4], gp: usize, thickness: f64) -> ([f64; 4], [[f64; 2]; 4], f64) {
    let (n, dn) = shape(GAUSS_2X2[gp][0], GAUSS_2X2[gp][1]);
    let mut j = [[0.0; 2]; 2];
    for a in 0..4 {
        for r in 0..2 {
            for c in 0..2 {
                j[r][c] += coords[a][r] * dn[a][c];
            }
        }
    }
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
    let mut dx = [[0.0; 2]; 4];
    for a in 0..4 {
        for r in 0..2 {
            dx[a][r] = dn[a][0] * inv[0][r] + dn[a][1] * inv[1][r];
        }
    }
    (n, dx, det * thickness)
}

/// Residual and tangent of one element at nodal values `v`.
///
/// Displacement rows: `∫ S : ½ δC dV`. Damage rows:
/// `∫ (H (D − D̄) N_a − A ∇D̄ · ∇N_a) dV = ∫ (−a₀ N_a − b₀ · ∇N_a) dV`.
pub fn element_kernel(
    coords: &[[f64; 2]; 4],
    thickness: f64,
    v: &[f64; NE],
    states_old: &ElementStates,
    params: &MaterialParams,
    dt: f64,
) -> std::result::Result<ElementKernelOutput, MaterialError> {
    let mut r = [0.0; NE];
    let mut k = [[0.0; NE]; NE];
    let mut states = *states_old;
    let mut damage_capped = false;

    for gp in 0..4 {
        let (n, dx, dv) = gauss_geometry(coords, gp, thickness);
        if !(dv > 0.0) {
            return Err(MaterialError::Domain(format!("non-positive Jacobian at Gauss point {gp}")));
        }
        let mut f = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut dbar = 0.0;
        let mut grad = [0.0; 3];
        for a in 0..4 {
            let (ux, uy, d) = (v[3 * a], v[3 * a + 1], v[3 * a + 2]);
            for c in 0..2 {
                f[0][c] += ux * dx[a][c];
                f[1][c] += uy * dx[a][c];
                grad[c] += d * dx[a][c];
            }
            dbar += d * n[a];
        }
        let mut c6 = [0.0; 6];
        for (s, &(i, j)) in SYM_INDEX.iter().enumerate() {
            c6[s] = (0..3).map(|m| f[m][i] * f[m][j]).sum();
        }
        let ret = stress_update(&c6, dbar, &grad, &states_old[gp], params, dt).map_err(|e| e.at_gauss_point(gp))?;
        states[gp] = ret.new_state;
        damage_capped |= ret.damage_capped;

        // δC (symmetric components) per displacement DOF; reference
        // gradients live in the 1-2 plane only.
        let mut bc = [[0.0; 6]; 8];
        for a in 0..4 {
            let g3 = [dx[a][0], dx[a][1], 0.0];
            for i in 0..2 {
                for (s, &(p, q)) in SYM_INDEX.iter().enumerate() {
                    bc[2 * a + i][s] = f[i][p] * g3[q] + f[i][q] * g3[p];
                }
            }
        }
        // multiplicity of symmetric components in S : δC
        const MULT: [f64; 6] = [0.5, 0.5, 0.5, 1.0, 1.0, 1.0];
        let row = |a: usize, i: usize| 3 * a + i;

        for a in 0..4 {
            for i in 0..2 {
                let b = &bc[2 * a + i];
                let mut acc = 0.0;
                for s in 0..6 {
                    acc += MULT[s] * ret.stress[s] * b[s];
                }
                r[row(a, i)] += acc * dv;
            }
            r[row(a, 2)] += (-ret.a0 * n[a] - ret.b0[0] * dx[a][0] - ret.b0[1] * dx[a][1]) * dv;
        }

        // dS · δC_b for each column
        let mut ds_b = [[0.0; 6]; 8];
        for col in 0..8 {
            for s in 0..6 {
                ds_b[col][s] = (0..6).map(|t| ret.dstress_dc[s][t] * bc[col][t]).sum();
            }
        }
        let da0_b: [f64; 8] = std::array::from_fn(|col| (0..6).map(|t| ret.da0_dc[t] * bc[col][t]).sum());
        let s3 = crate::tensor::Mat3::from_sym(&ret.stress).0;

        for a in 0..4 {
            for i in 0..2 {
                let ra = row(a, i);
                let ba = &bc[2 * a + i];
                for b in 0..4 {
                    // geometric term δ_ik S_IJ N_a,I N_b,J
                    let mut geo = 0.0;
                    for p in 0..2 {
                        for q in 0..2 {
                            geo += s3[p][q] * dx[a][p] * dx[b][q];
                        }
                    }
                    for kk in 0..2 {
                        let col = &ds_b[2 * b + kk];
                        let mut mat = 0.0;
                        for s in 0..6 {
                            mat += MULT[s] * col[s] * ba[s];
                        }
                        let g = if i == kk { geo } else { 0.0 };
                        k[ra][row(b, kk)] += (mat + g) * dv;
                    }
                    let mut coup = 0.0;
                    for s in 0..6 {
                        coup += MULT[s] * ret.dstress_ddbar[s] * ba[s];
                    }
                    k[ra][row(b, 2)] += coup * n[b] * dv;
                }
            }
            let rd = row(a, 2);
            for b in 0..4 {
                for kk in 0..2 {
                    k[rd][row(b, kk)] += -n[a] * da0_b[2 * b + kk] * dv;
                }
                let grad_dot = dx[a][0] * dx[b][0] + dx[a][1] * dx[b][1];
                k[rd][row(b, 2)] += (-ret.da0_ddbar * n[a] * n[b] - params.a_grad * grad_dot) * dv;
            }
        }
    }
    Ok(ElementKernelOutput { r, k, states, damage_capped })
}

/// Compressed-column pattern over the free DOFs with a per-element scatter
/// map, built once per mesh.
#[derive(Debug)]
pub struct SparsePattern {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    /// For element `e`, local entry `(r, c)` at `12·r + c`: position in the
    /// value array, or `u32::MAX` if either DOF is fixed.
    scatter: Vec<[u32; NE * NE]>,
}

impl SparsePattern {
    pub fn new(mesh: &Mesh, layout: &DofLayout) -> Self {
        let n = layout.n_free();
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in 0..mesh.elements.len() {
            let dofs = DofLayout::element_dofs(mesh, e);
            for &c in &dofs {
                let Some(fc) = layout.free_index(c) else { continue };
                for &r in &dofs {
                    if let Some(fr) = layout.free_index(r) {
                        cols[fc].push(fr);
                    }
                }
            }
        }
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        for c in cols.iter_mut() {
            c.sort_unstable();
            c.dedup();
            row_idx.extend_from_slice(c);
            col_ptr.push(row_idx.len());
        }
        let mut scatter = Vec::with_capacity(mesh.elements.len());
        for e in 0..mesh.elements.len() {
            let dofs = DofLayout::element_dofs(mesh, e);
            let mut map = [u32::MAX; NE * NE];
            for (lc, &c) in dofs.iter().enumerate() {
                let Some(fc) = layout.free_index(c) else { continue };
                for (lr, &r) in dofs.iter().enumerate() {
                    if let Some(fr) = layout.free_index(r) {
                        let range = col_ptr[fc]..col_ptr[fc + 1];
                        let pos = row_idx[range.clone()].binary_search(&fr).expect("pattern entry");
                        map[NE * lr + lc] = (range.start + pos) as u32;
                    }
                }
            }
            scatter.push(map);
        }
        SparsePattern { n, col_ptr, row_idx, scatter }
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn symbolic(&self) -> SymbolicSparseColMat<usize> {
        SymbolicSparseColMat::new_checked(self.n, self.n, self.col_ptr.clone(), None, self.row_idx.clone())
    }

    pub fn to_matrix(&self, values: Vec<f64>) -> SparseColMat<usize, f64> {
        SparseColMat::new(self.symbolic(), values)
    }

    /// Dense copy (tests and small problems).
    pub fn to_dense(&self, values: &[f64]) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                m[(self.row_idx[p], c)] = values[p];
            }
        }
        m
    }
}

/// Free-DOF tangent, free-DOF residual `G = R − λ P_ref` and full internal
/// forces at a trial state.
#[derive(Clone, Debug)]
pub struct GlobalSystem {
    /// Values on the shared [`SparsePattern`].
    pub k_values: Vec<f64>,
    pub g: Vec<f64>,
    /// Internal forces on all DOFs (fixed rows hold reactions).
    pub r_full: Vec<f64>,
    /// Unweighted element internal forces, by element id.
    pub element_r: Vec<[f64; NE]>,
    pub states: Vec<ElementStates>,
    pub damage_capped: bool,
}

/// Weighted element contributions: internal forces on all DOFs and tangent
/// values on the free-DOF pattern.
#[derive(Clone, Debug)]
pub struct SubsetContribution {
    pub r_full: Vec<f64>,
    pub k_values: Vec<f64>,
    /// Unweighted element internal forces, by element id (zero if not listed).
    pub element_r: Vec<[f64; NE]>,
    pub states: Vec<ElementStates>,
    pub damage_capped: bool,
}

/// Everything needed to evaluate the discretised problem.
#[derive(Debug)]
pub struct Assembler {
    pub mesh: Arc<Mesh>,
    pub layout: Arc<DofLayout>,
    pub params: MaterialParams,
    pub pattern: Arc<SparsePattern>,
    /// Element evaluations performed so far (cost counter).
    evaluations: AtomicU64,
}

impl Clone for Assembler {
    fn clone(&self) -> Self {
        Assembler {
            mesh: self.mesh.clone(),
            layout: self.layout.clone(),
            params: self.params,
            pattern: self.pattern.clone(),
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl Assembler {
    pub fn new(mesh: Arc<Mesh>, layout: Arc<DofLayout>, params: MaterialParams) -> Result<Self> {
        mesh.validate()?;
        params.validate()?;
        if layout.n_dofs != DOFS_PER_NODE * mesh.nodes.len() {
            return Err(Error::Dimension("layout does not belong to mesh".into()));
        }
        let pattern = Arc::new(SparsePattern::new(&mesh, &layout));
        Ok(Assembler { mesh, layout, params, pattern, evaluations: AtomicU64::new(0) })
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.elements.len()
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    pub fn element_values(&self, v_full: &[f64], e: usize) -> [f64; NE] {
        let dofs = DofLayout::element_dofs(&self.mesh, e);
        std::array::from_fn(|k| v_full[dofs[k]])
    }

    /// Evaluates the listed elements (in parallel) and hands the outputs to
    /// `sink` sequentially in list order, so accumulation is deterministic
    /// regardless of the thread count. `states` is indexed by element id.
    pub fn for_each_element<F>(&self, v_full: &[f64], states: &[ElementStates], elements: &[usize], sink: F) -> Result<()>
    where
        F: FnMut(usize, &ElementKernelOutput),
    {
        if states.len() != self.n_elements() {
            return Err(Error::Dimension(format!("{} element states for {} elements", states.len(), self.n_elements())));
        }
        let mut sink = sink;
        self.evaluate(v_full, elements, |k| &states[elements[k]], |_, e, out| sink(e, out))
    }

    /// Like [`Assembler::for_each_element`] but with the state history of
    /// `elements[k]` supplied by `state(k)`; the sink receives `(k, e, out)`.
    pub fn evaluate<'s, S, F>(&self, v_full: &[f64], elements: &[usize], state: S, mut sink: F) -> Result<()>
    where
        S: Fn(usize) -> &'s ElementStates + Sync,
        F: FnMut(usize, usize, &ElementKernelOutput),
    {
        if v_full.len() != self.layout.n_dofs {
            return Err(Error::Dimension(format!("V has length {} but the layout has {} DOFs", v_full.len(), self.layout.n_dofs)));
        }
        if let Some(i) = v_full.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: i, column: 0 });
        }
        let n_el = self.n_elements();
        if let Some(&bad) = elements.iter().find(|&&e| e >= n_el) {
            return Err(Error::UnknownElement(bad));
        }
        const CHUNK: usize = 64;
        for (c, chunk) in elements.chunks(CHUNK).enumerate() {
            let base = c * CHUNK;
            let outputs: Vec<std::result::Result<ElementKernelOutput, MaterialError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &e)| {
                    let v = self.element_values(v_full, e);
                    element_kernel(&self.mesh.element_coords(e), self.mesh.thickness, &v, state(base + i), &self.params, 1.0)
                })
                .collect();
            self.evaluations.fetch_add(chunk.len() as u64, Ordering::Relaxed);
            for (i, (&e, out)) in chunk.iter().zip(outputs).enumerate() {
                let out = out.map_err(|source| Error::Element { element: e, source })?;
                sink(base + i, e, &out);
            }
        }
        Ok(())
    }

    /// Weighted contributions of an element subset.
    pub fn assemble_subset(&self, v_full: &[f64], states: &[ElementStates], elements: &[usize], weights: &[f64]) -> Result<SubsetContribution> {
        if elements.len() != weights.len() {
            return Err(Error::Dimension("one weight per element required".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("element weight {w} must be positive")));
        }
        let mut r_full = vec![0.0; self.layout.n_dofs];
        let mut k_values = vec![0.0; self.pattern.nnz()];
        let mut element_r = vec![[0.0; NE]; self.n_elements()];
        let mut new_states = states.to_vec();
        let mut capped = false;
        let mut cursor = 0;
        self.for_each_element(v_full, states, elements, |e, out| {
            let w = weights[cursor];
            cursor += 1;
            let dofs = DofLayout::element_dofs(&self.mesh, e);
            let map = &self.pattern.scatter[e];
            for lr in 0..NE {
                r_full[dofs[lr]] += w * out.r[lr];
                for lc in 0..NE {
                    let p = map[NE * lr + lc];
                    if p != u32::MAX {
                        k_values[p as usize] += w * out.k[lr][lc];
                    }
                }
            }
            element_r[e] = out.r;
            new_states[e] = out.states;
            capped |= out.damage_capped;
        })?;
        Ok(SubsetContribution { r_full, k_values, element_r, states: new_states, damage_capped: capped })
    }

    /// Full assembly: the subset assembly over all elements with unit weights
    /// plus the external load.
    pub fn assemble_full(&self, v_full: &[f64], states: &[ElementStates], load_scale: f64) -> Result<GlobalSystem> {
        if !load_scale.is_finite() {
            return Err(Error::Invalid("non-finite load factor".into()));
        }
        let all: Vec<usize> = (0..self.n_elements()).collect();
        let ones = vec![1.0; all.len()];
        let sub = self.assemble_subset(v_full, states, &all, &ones)?;
        let p = self.layout.p_ref();
        let g = self.layout.free_dofs().iter().map(|&d| sub.r_full[d] - load_scale * p[d]).collect();
        Ok(GlobalSystem { k_values: sub.k_values, g, r_full: sub.r_full, element_r: sub.element_r, states: sub.states, damage_capped: sub.damage_capped })
    }

    /// Free-DOF external load pattern.
    pub fn p_ref_free(&self) -> Vec<f64> {
        self.layout.restrict(&self.layout.p_ref())
    }

    /// Tangent at the undeformed, virgin state.
    pub fn k_lin(&self) -> Result<Vec<f64>> {
        let v = vec![0.0; self.layout.n_dofs];
        Ok(self.assemble_full(&v, &virgin_states(self.n_elements()), 0.0)?.k_values)
    }
}

/// `y = K x` for pattern values `k`.
pub fn spmv(pattern: &SparsePattern, k: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; pattern.n];
    for c in 0..pattern.n {
        let xc = x[c];
        if xc == 0.0 {
            continue;
        }
        for p in pattern.col_ptr[c]..pattern.col_ptr[c + 1] {
            y[pattern.row_idx[p]] += k[p] * xc;
        }
    }
    y
}
