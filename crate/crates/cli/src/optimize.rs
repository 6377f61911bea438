//! Width optimisation for a target limit load: Brent iterations on
//! `g(b) = F_lim(b) − F_target`. In reduced mode the first three evaluations
//! (both bracket ends and the first iterate) are full-order runs whose
//! snapshots, and only those, train the reduced model used for every later
//! evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use hyperred_core::assembly::Assembler;
use hyperred_core::ddeim::{build_deim_operator, DeimSystem};
use hyperred_core::decsw::{build_ecsw_training, compute_ecsw_weights, ecsw_system};
use hyperred_core::dpod::{build_decomposed_basis, ProjectedSystem, ReducedBasis};
use hyperred_core::mesh::PlateGeometry;
use hyperred_core::solver::{arc_length_run, record_nonlinear_snapshots, ContinuationRecord, ContinuationSystem, FomSystem, SnapshotStore, Termination};
use hyperred_core::Error;
use serde::{Deserialize, Serialize};

use crate::brent::{brent, BrentError};
use crate::commands::{build_assembler, load_resultant, write_json};
use crate::config::{Method, OptimizeMode, OptimizeSpec, RunConfig};
use crate::CliError;

/// Number of full-order evaluations that seed the reduced model.
pub const SEED_RUNS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub model: Method,
    pub width: f64,
    pub limit_load: f64,
    /// `(F_lim − F_target)²` in N².
    pub epsilon: f64,
    pub element_evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub mode: OptimizeMode,
    pub target_limit_load: f64,
    pub width: f64,
    pub converged: bool,
    pub rows: Vec<IterationRow>,
    pub fom_evaluations: u64,
    pub rom_evaluations: u64,
    pub total_evaluations: u64,
}

impl OptimizationResult {
    /// The iteration table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,model,width_mm,F_lim_N,epsilon_N2,element_evaluations\n");
        for r in &self.rows {
            let model = serde_json::to_value(r.model).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            out.push_str(&format!("{},{},{:.17e},{:.17e},{:.17e},{}\n", r.iteration, model, r.width, r.limit_load, r.epsilon, r.element_evaluations));
        }
        out
    }
}

/// A full-order run at one width.
#[derive(Clone)]
pub struct SeedRun {
    pub limit_load: f64,
    pub evaluations: u64,
    pub store: SnapshotStore,
    pub asm: Arc<Assembler>,
}

/// Full-order runs keyed by width, shared between optimisations of the same
/// configuration (each reuse still counts its element evaluations).
#[derive(Default)]
pub struct FomCache {
    runs: BTreeMap<u64, SeedRun>,
}

impl FomCache {
    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// The template geometry at width `b`, with the outer-node split frozen so
/// that every width shares one mesh topology.
pub fn geometry_at(template: &PlateGeometry, b: f64) -> PlateGeometry {
    PlateGeometry { width_b: b, n_right: Some(template.resolved_n_right()), ..*template }
}

fn limit_load(record: &ContinuationRecord, b: f64) -> Result<f64, CliError> {
    if record.termination != Termination::PastPeak {
        return Err(CliError::Core(Error::Solver(format!("limit load not reached at width {b} ({:?} after {} steps)", record.termination, record.steps.len()))));
    }
    Ok(record.max_force())
}

fn fom_at(cfg: &RunConfig, b: f64, cache: &mut FomCache) -> Result<SeedRun, CliError> {
    if let Some(run) = cache.runs.get(&b.to_bits()) {
        return Ok(run.clone());
    }
    let asm = build_assembler(&geometry_at(&cfg.geometry, b), &cfg.material)?;
    let mut sys = FomSystem::new(asm.clone(), &cfg.control_set)?;
    let record = arc_length_run(&mut sys, &cfg.solver, load_resultant(&asm))?;
    let run = SeedRun {
        limit_load: limit_load(&record, b)?,
        evaluations: record.element_evaluations,
        store: sys.snapshot_store(serde_json::json!({ "width_b": b })),
        asm,
    };
    cache.runs.insert(b.to_bits(), run.clone());
    Ok(run)
}

/// Reduced model trained on the seed runs; bound to a new geometry per call.
struct SeedRom {
    method: Method,
    basis: Arc<ReducedBasis>,
    ecsw: Option<hyperred_core::decsw::EcswWeights>,
    deim: Option<hyperred_core::ddeim::DeimOperator>,
}

impl SeedRom {
    fn train(cfg: &RunConfig, seeds: &[SeedRun]) -> Result<Self, CliError> {
        let method = cfg.reduction.method;
        let (m_u, m_d) = cfg.reduction.modes()?;
        let mut stores: Vec<SnapshotStore> = seeds.iter().map(|s| s.store.clone()).collect();
        if method == Method::Ddeim {
            for (store, seed) in stores.iter_mut().zip(seeds) {
                record_nonlinear_snapshots(store, &seed.asm, &seed.asm.k_lin()?)?;
            }
        }
        let refs: Vec<&SnapshotStore> = stores.iter().collect();
        let all = SnapshotStore::concat(&refs)?;
        let basis = Arc::new(build_decomposed_basis(&all, m_u, m_d)?);
        let mut rom = SeedRom { method, basis, ecsw: None, deim: None };
        match method {
            Method::Decsw => {
                let runs: Vec<(&SnapshotStore, &Assembler)> = stores.iter().zip(seeds).map(|(s, r)| (s, r.asm.as_ref())).collect();
                let training = build_ecsw_training(&runs, &rom.basis, cfg.reduction.tau()?)?;
                rom.ecsw = Some(compute_ecsw_weights(&training)?);
            }
            Method::Ddeim => {
                let (k_u, k_d) = cfg.reduction.deim_size()?;
                rom.deim = Some(build_deim_operator(&all, &rom.basis, k_u, k_d, &seeds[0].asm)?);
            }
            Method::Dpod => {}
            Method::Fom => return Err(CliError::Usage("reduced optimisation needs reduction.method ∈ {dpod, ddeim, decsw}".into())),
        }
        Ok(rom)
    }

    fn run(&self, cfg: &RunConfig, b: f64) -> Result<(f64, u64), CliError> {
        let asm = build_assembler(&geometry_at(&cfg.geometry, b), &cfg.material)?;
        let mut sys: Box<dyn ContinuationSystem> = match self.method {
            Method::Decsw => Box::new(ecsw_system(asm.clone(), self.basis.clone(), self.ecsw.as_ref().expect("trained"), &cfg.control_set)?),
            Method::Ddeim => {
                let mut op = self.deim.clone().expect("trained");
                op.bind(&asm, &self.basis)?;
                Box::new(DeimSystem::new(asm.clone(), self.basis.clone(), Arc::new(op), &cfg.control_set)?)
            }
            _ => Box::new(ProjectedSystem::galerkin(asm.clone(), self.basis.clone(), &cfg.control_set)?),
        };
        let record = arc_length_run(sys.as_mut(), &cfg.solver, load_resultant(&asm))?;
        // includes the zero-state stiffness evaluations of a DEIM binding
        Ok((limit_load(&record, b)?, asm.evaluations()))
    }
}

fn check_seeds(seeds: &[(f64, f64)]) -> Result<(), CliError> {
    let mut s = seeds.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let increasing = s.windows(2).all(|w| w[1].1 > w[0].1);
    let decreasing = s.windows(2).all(|w| w[1].1 < w[0].1);
    if increasing || decreasing {
        Ok(())
    } else {
        Err(CliError::Usage(format!("limit load is not monotone over the seed widths {s:?}")))
    }
}

/// Runs the optimisation of `spec` in `mode`, reusing full-order runs from
/// `cache`.
pub fn optimize_with(cfg: &RunConfig, spec: &OptimizeSpec, mode: OptimizeMode, cache: &mut FomCache) -> Result<OptimizationResult, CliError> {
    let target = spec.target_limit_load;
    let mut rows: Vec<IterationRow> = Vec::new();
    let mut seeds: Vec<SeedRun> = Vec::new();
    let mut rom: Option<SeedRom> = None;
    let eval = |b: f64| -> Result<f64, CliError> {
        let iteration = rows.len() + 1;
        let (f, evals, model) = if mode == OptimizeMode::Fom || iteration <= SEED_RUNS {
            let run = fom_at(cfg, b, cache)?;
            if iteration <= SEED_RUNS {
                seeds.push(run.clone());
                if seeds.len() == SEED_RUNS {
                    check_seeds(&rows.iter().map(|r| (r.width, r.limit_load)).chain([(b, run.limit_load)]).collect::<Vec<_>>())?;
                }
            }
            (run.limit_load, run.evaluations, Method::Fom)
        } else {
            if rom.is_none() {
                rom = Some(SeedRom::train(cfg, &seeds)?);
            }
            let (f, evals) = rom.as_ref().expect("trained").run(cfg, b)?;
            (f, evals, cfg.reduction.method)
        };
        rows.push(IterationRow { iteration, model, width: b, limit_load: f, epsilon: (f - target).powi(2), element_evaluations: evals });
        Ok(f - target)
    };
    let outcome = brent(eval, spec.b_lo, spec.b_hi, spec.tol_b, spec.max_iterations).map_err(|e| match e {
        BrentError::Eval(e) => e,
        BrentError::NotBracketing { a, b, fa, fb } => CliError::Usage(format!(
            "target {target} N is not bracketed: F_lim({a}) = {} N, F_lim({b}) = {} N",
            fa + target,
            fb + target
        )),
    })?;
    let fom_evaluations = rows.iter().filter(|r| r.model == Method::Fom).map(|r| r.element_evaluations).sum();
    let rom_evaluations = rows.iter().filter(|r| r.model != Method::Fom).map(|r| r.element_evaluations).sum();
    Ok(OptimizationResult {
        mode,
        target_limit_load: target,
        width: outcome.root,
        converged: outcome.converged,
        rows,
        fom_evaluations,
        rom_evaluations,
        total_evaluations: fom_evaluations + rom_evaluations,
    })
}

pub fn optimize(cfg: &RunConfig) -> Result<OptimizationResult, CliError> {
    let spec = cfg.optimize.as_ref().ok_or_else(|| CliError::Usage("configuration needs an `optimize` section".into()))?;
    if spec.mode == OptimizeMode::Rom && cfg.reduction.method == Method::Fom {
        return Err(CliError::Usage("reduced optimisation needs reduction.method ∈ {dpod, ddeim, decsw}".into()));
    }
    let result = optimize_with(cfg, spec, spec.mode, &mut FomCache::default())?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(cfg.output.join("optimization.csv"), result.to_csv())?;
    write_json(&cfg.output.join("optimization.json"), &result)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_monotonicity() {
        assert!(check_seeds(&[(1.0, 10.0), (3.0, 30.0), (2.0, 20.0)]).is_ok());
        assert!(check_seeds(&[(1.0, 30.0), (3.0, 10.0), (2.0, 20.0)]).is_ok());
        assert!(check_seeds(&[(1.0, 10.0), (3.0, 30.0), (2.0, 40.0)]).is_err());
    }

    #[test]
    fn geometry_keeps_topology() {
        let g = PlateGeometry::new(2.0, 0.5, 4.0, 16, 16);
        let a = geometry_at(&g, 1.6);
        let b = geometry_at(&g, 2.4);
        assert_eq!(a.n_right, b.n_right);
        assert_eq!(a.n_right, Some(g.resolved_n_right()));
        assert_eq!(a.build().unwrap().elements, b.build().unwrap().elements);
    }
}
