//! Degree-of-freedom numbering, field partition and boundary conditions.
//!
//! Every node carries `(u_x, u_y, D̄)` in that order, numbered node-major, so
//! DOF `3·node + c`. The displacement field owns components 0 and 1, the
//! micromorphic damage field owns component 2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

pub const DOFS_PER_NODE: usize = 3;
pub const DOFS_PER_ELEMENT: usize = 4 * DOFS_PER_NODE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Ux,
    Uy,
    Dbar,
}

impl Component {
    pub fn offset(self) -> usize {
        match self {
            Component::Ux => 0,
            Component::Uy => 1,
            Component::Dbar => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Displacement,
    Damage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub node_set: String,
    pub component: Component,
}

/// Uniform traction on the boundary edges of a node set, acting in the
/// given displacement direction [MPa].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Traction {
    pub node_set: String,
    pub component: Component,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BcSpec {
    /// Homogeneous Dirichlet constraints.
    #[serde(default)]
    pub fixed: Vec<Constraint>,
    #[serde(default)]
    pub tractions: Vec<Traction>,
}

impl BcSpec {
    /// Symmetry conditions of the quarter plate and a unit traction on `top`.
    pub fn quarter_plate() -> Self {
        BcSpec {
            fixed: vec![
                Constraint { node_set: "sym_x".into(), component: Component::Ux },
                Constraint { node_set: "sym_y".into(), component: Component::Uy },
            ],
            tractions: vec![Traction { node_set: "top".into(), component: Component::Uy, magnitude: 1.0 }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Hash, Eq)]
pub struct DofLayout {
    pub n_dofs: usize,
    pub field_mask_u: Vec<usize>,
    pub field_mask_d: Vec<usize>,
    /// Sorted, unique.
    pub fixed_dofs: Vec<usize>,
    /// Sorted, unique; entries of `p_ref` that are non-zero.
    pub loaded_dofs: Vec<usize>,
    /// Reference load pattern bit-patterns (kept as raw bits so the layout
    /// stays hashable); use [`DofLayout::p_ref`].
    p_ref_bits: Vec<u64>,
    /// Full DOF → free DOF index.
    free_index: Vec<Option<usize>>,
    /// Free DOF → full DOF index.
    free_dofs: Vec<usize>,
}

impl DofLayout {
    #[inline]
    pub fn dof(node: usize, c: Component) -> usize {
        DOFS_PER_NODE * node + c.offset()
    }

    pub fn field_of(dof: usize) -> Field {
        if dof % DOFS_PER_NODE == 2 {
            Field::Damage
        } else {
            Field::Displacement
        }
    }

    pub fn element_dofs(mesh: &Mesh, e: usize) -> [usize; DOFS_PER_ELEMENT] {
        let conn = mesh.elements[e];
        std::array::from_fn(|k| DOFS_PER_NODE * conn[k / DOFS_PER_NODE] + k % DOFS_PER_NODE)
    }

    pub fn p_ref(&self) -> Vec<f64> {
        self.p_ref_bits.iter().map(|&b| f64::from_bits(b)).collect()
    }

    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index[dof]
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.free_index[dof].is_none()
    }

    /// Free-DOF vector → full vector with zeros on fixed DOFs.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_dofs];
        for (k, &d) in self.free_dofs.iter().enumerate() {
            full[d] = free[k];
        }
        full
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| full[d]).collect()
    }

    /// Field of each free DOF.
    pub fn free_fields(&self) -> Vec<Field> {
        self.free_dofs.iter().map(|&d| Self::field_of(d)).collect()
    }
}

/// Numbers the DOFs of `mesh` and applies `bc`.
pub fn number_dofs(mesh: &Mesh, bc: &BcSpec) -> Result<DofLayout> {
    let n_nodes = mesh.nodes.len();
    let n_dofs = DOFS_PER_NODE * n_nodes;
    let field_mask_u = (0..n_dofs).filter(|d| d % DOFS_PER_NODE != 2).collect();
    let field_mask_d = (0..n_dofs).filter(|d| d % DOFS_PER_NODE == 2).collect();

    let mut fixed = vec![false; n_dofs];
    for c in &bc.fixed {
        for &n in mesh.node_set(&c.node_set)? {
            fixed[DofLayout::dof(n, c.component)] = true;
        }
    }
    let mut p_ref = vec![0.0; n_dofs];
    for t in &bc.tractions {
        if t.component == Component::Dbar {
            return Err(Error::Invalid("tractions act on displacement components only".into()));
        }
        let set = mesh.node_set(&t.node_set)?;
        for [a, b] in mesh.boundary_edges_in(set) {
            let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
            let len = (pa[0] - pb[0]).hypot(pa[1] - pb[1]);
            let nodal = 0.5 * t.magnitude * len * mesh.thickness;
            p_ref[DofLayout::dof(a, t.component)] += nodal;
            p_ref[DofLayout::dof(b, t.component)] += nodal;
        }
    }
    let loaded_dofs: Vec<usize> = (0..n_dofs).filter(|&d| p_ref[d] != 0.0).collect();
    if let Some(&d) = loaded_dofs.iter().find(|&&d| fixed[d]) {
        return Err(Error::Invalid(format!("DOF {d} is both fixed and loaded")));
    }
    let fixed_dofs: Vec<usize> = (0..n_dofs).filter(|&d| fixed[d]).collect();
    let mut free_index = vec![None; n_dofs];
    let mut free_dofs = Vec::with_capacity(n_dofs - fixed_dofs.len());
    for d in 0..n_dofs {
        if !fixed[d] {
            free_index[d] = Some(free_dofs.len());
            free_dofs.push(d);
        }
    }
    Ok(DofLayout {
        n_dofs,
        field_mask_u,
        field_mask_d,
        fixed_dofs,
        loaded_dofs,
        p_ref_bits: p_ref.iter().map(|v| v.to_bits()).collect(),
        free_index,
        free_dofs,
    })
}
