//! Decomposed ECSW: training system `Y w = b` from replayed snapshots,
//! sparse non-negative weights, and the weighted reduced system (a
//! [`ProjectedSystem`] over the selected elements).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assembly::{virgin_states, Assembler};
use crate::dofs::DOFS_PER_ELEMENT as NE;
use crate::dpod::{check_layout, element_basis, ProjectedSystem, ReducedBasis};
use crate::error::{Error, Result};
use crate::linalg::{snnls, NnlsTermination};
use crate::solver::SnapshotStore;

#[derive(Clone, Debug)]
pub struct EcswTraining {
    /// `(ℓ·m) × n_E`; block row `j`, column `e` holds `Φ_eᵀ R_e(V_j)`.
    pub y: DMatrix<f64>,
    /// `Y · 1`.
    pub b: Vec<f64>,
    pub tau: f64,
    pub snapshots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcswWeights {
    pub tau: f64,
    pub elements: Vec<usize>,
    pub weights: Vec<f64>,
    pub residual_ratio: f64,
    #[serde(default)]
    pub tolerance_not_met: bool,
}

impl EcswWeights {
    /// Every element at unit weight.
    pub fn unit(n_elements: usize) -> Self {
        EcswWeights { tau: 0.0, elements: (0..n_elements).collect(), weights: vec![1.0; n_elements], residual_ratio: 0.0, tolerance_not_met: false }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Stacks the projected element forces of every snapshot (one sequence per
/// FOM run, each on its own assembler). Element forces recorded during the
/// run are used directly; otherwise the sequence is replayed with the
/// committed Gauss-point history. All assemblers must share the mesh
/// topology and layout.
pub fn build_ecsw_training(runs: &[(&SnapshotStore, &Assembler)], basis: &ReducedBasis, tau: f64) -> Result<EcswTraining> {
    let first = runs.first().ok_or_else(|| Error::Invalid("no training runs".into()))?;
    let n_el = first.1.n_elements();
    let m = basis.dim();
    let total: usize = runs.iter().map(|(s, _)| s.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("no training snapshots".into()));
    }
    let mut y = DMatrix::zeros(total * m, n_el);
    let mut block = 0;
    for (store, asm) in runs {
        check_layout(asm, basis)?;
        if asm.n_elements() != n_el || asm.mesh.elements != first.1.mesh.elements {
            return Err(Error::Dimension("training meshes differ in topology".into()));
        }
        if store.fields != basis.fields {
            return Err(Error::Dimension("snapshots and basis have different layouts".into()));
        }
        let element_phi: Vec<DMatrix<f64>> = (0..n_el).map(|e| element_basis(asm, &basis.phi, e)).collect();
        if let Some(ef) = &store.element_forces {
            if ef.nrows() != NE * n_el {
                return Err(Error::Dimension("recorded element forces do not match the mesh".into()));
            }
            for j in 0..store.len() {
                for e in 0..n_el {
                    let r = ef.view((NE * e, j), (NE, 1));
                    let col = element_phi[e].transpose() * r;
                    y.view_mut((block * m, e), (m, 1)).copy_from(&col);
                }
                block += 1;
            }
            continue;
        }
        let all: Vec<usize> = (0..n_el).collect();
        let mut states = virgin_states(n_el);
        for j in 0..store.len() {
            let free: Vec<f64> = store.solutions.column(j).iter().copied().collect();
            let v = asm.layout.expand(&free);
            let mut next = states.clone();
            let history = &states;
            asm.evaluate(&v, &all, |e| &history[e], |_, e, out| {
                let col = element_phi[e].transpose() * DVector::from_column_slice(&out.r);
                y.view_mut((block * m, e), (m, 1)).copy_from(&col);
                next[e] = out.states;
            })
            .map_err(|err| Error::Solver(format!("training replay of snapshot {j}: {err}")))?;
            states = next;
            block += 1;
        }
    }
    let b = y.column_sum().as_slice().to_vec();
    Ok(EcswTraining { y, b, tau, snapshots: total })
}

/// Solves the training system with the sparse NNLS and keeps the strictly
/// positive weights.
pub fn compute_ecsw_weights(training: &EcswTraining) -> Result<EcswWeights> {
    if !(training.tau > 0.0) {
        return Err(Error::Invalid(format!("ECSW tolerance τ = {} must be positive", training.tau)));
    }
    let sol = snnls(&training.y, &training.b, training.tau)?;
    let b_norm = DVector::from_column_slice(&training.b).norm();
    let (elements, weights): (Vec<usize>, Vec<f64>) = sol.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(e, &w)| (e, w)).unzip();
    Ok(EcswWeights {
        tau: training.tau,
        elements,
        weights,
        residual_ratio: if b_norm > 0.0 { sol.residual_norm / b_norm } else { 0.0 },
        tolerance_not_met: sol.termination == NnlsTermination::ToleranceNotMet,
    })
}

/// The hyper-reduced system for a set of weights.
pub fn ecsw_system(asm: Arc<Assembler>, basis: Arc<ReducedBasis>, weights: &EcswWeights, control_set: &str) -> Result<ProjectedSystem> {
    ProjectedSystem::weighted(asm, basis, weights.elements.clone(), weights.weights.clone(), control_set)
}
