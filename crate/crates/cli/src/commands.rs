//! The batch commands and their file outputs.
//!
//! A run directory holds `record.csv` (one row per converged step),
//! `run.json` (a [`RunSummary`]) and, for full-order runs, `snapshots/`.
//! Reduction artifacts are `basis.hrsnap`, `ecsw_weights.json`, the DEIM
//! files and `build.json`.

use std::path::Path;
use std::sync::Arc;

use hyperred_core::assembly::Assembler;
use hyperred_core::ddeim::{build_deim_operator, DeimOperator, DeimSystem};
use hyperred_core::decsw::{build_ecsw_training, compute_ecsw_weights, ecsw_system, EcswWeights};
use hyperred_core::dofs::{number_dofs, BcSpec, Component, DofLayout};
use hyperred_core::dpod::{build_decomposed_basis, ProjectedSystem, ReducedBasis};
use hyperred_core::material::MaterialParams;
use hyperred_core::mesh::PlateGeometry;
use hyperred_core::metrics::{curve_error, CurveComparison};
use hyperred_core::solver::{arc_length_run, ContinuationRecord, ContinuationSystem, FomSystem, SnapshotStore, SolverConfig, Termination};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Method, RunConfig};
use crate::CliError;

pub fn build_assembler(geometry: &PlateGeometry, material: &MaterialParams) -> Result<Arc<Assembler>, CliError> {
    let mesh = geometry.build()?;
    let layout = number_dofs(&mesh, &BcSpec::quarter_plate())?;
    Ok(Arc::new(Assembler::new(Arc::new(mesh), Arc::new(layout), *material)?))
}

pub fn load_resultant(asm: &Assembler) -> f64 {
    asm.layout.p_ref().iter().sum()
}

/// Everything in a record except the steps, plus a few derived figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub termination: Termination,
    pub partial: bool,
    pub steps: usize,
    pub load_resultant: f64,
    pub max_force: f64,
    /// The force fell after its maximum (the limit load was passed).
    pub past_peak: bool,
    pub element_evaluations: u64,
    pub newton_iterations: usize,
    pub failed_attempts: usize,
    pub n_elements: usize,
    /// Element evaluations per Newton iteration.
    pub elements_per_iteration: f64,
    pub wall_time: f64,
}

impl RunSummary {
    pub fn new(method: Method, record: &ContinuationRecord, n_elements: usize) -> Self {
        let forces: Vec<f64> = record.steps.iter().map(|s| s.force).collect();
        let peak = forces.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc });
        RunSummary {
            method,
            termination: record.termination,
            partial: record.is_partial(),
            steps: record.steps.len(),
            load_resultant: record.load_resultant,
            max_force: record.max_force(),
            past_peak: forces.iter().skip(peak.0 + 1).any(|&f| f < peak.1),
            element_evaluations: record.element_evaluations,
            newton_iterations: record.newton_iterations,
            failed_attempts: record.failed_attempts,
            n_elements,
            elements_per_iteration: if record.newton_iterations > 0 { record.element_evaluations as f64 / record.newton_iterations as f64 } else { 0.0 },
            wall_time: record.wall_time,
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_run(dir: &Path, record: &ContinuationRecord, summary: &RunSummary) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("record.csv"), record.to_csv(true))?;
    write_json(&dir.join("run.json"), summary)
}

/// A finished run: partial runs are reported after their files are written.
pub struct RunOutcome {
    pub record: ContinuationRecord,
    pub summary: RunSummary,
}

fn finish(dir: &Path, method: Method, record: ContinuationRecord, n_elements: usize) -> Result<RunOutcome, CliError> {
    let summary = RunSummary::new(method, &record, n_elements);
    write_run(dir, &record, &summary)?;
    if record.is_partial() {
        return Err(CliError::Partial(format!("{:?} run stopped after {} steps; partial curve written to {}", method, record.steps.len(), dir.display())));
    }
    Ok(RunOutcome { record, summary })
}

pub fn fom_run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let asm = build_assembler(&cfg.geometry, &cfg.material)?;
    let mut sys = FomSystem::new(asm.clone(), &cfg.control_set)?;
    let record = arc_length_run(&mut sys, &cfg.solver, load_resultant(&asm))?;
    let provenance = json!({ "geometry": cfg.geometry, "material": cfg.material, "solver": cfg.solver, "control_set": cfg.control_set, "partial": record.is_partial() });
    sys.snapshot_store(provenance).save(&cfg.output.join("snapshots"))?;
    finish(&cfg.output, Method::Fom, record, asm.n_elements())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildSummary {
    pub method: Method,
    pub basis_columns: usize,
    pub snapshots: usize,
    /// ECSW element count or DEIM evaluation-element count.
    pub reduced_elements: Option<usize>,
    pub n_elements: usize,
    pub provenance: serde_json::Value,
}

pub fn rom_build(cfg: &RunConfig) -> Result<BuildSummary, CliError> {
    let method = cfg.reduction.method;
    if method == Method::Fom {
        return Err(CliError::Usage("rom-build needs reduction.method ∈ {dpod, ddeim, decsw}".into()));
    }
    let store = SnapshotStore::load(cfg.require(&cfg.snapshots, "snapshots")?)?;
    let asm = build_assembler(&cfg.geometry, &cfg.material)?;
    let (m_u, m_d) = cfg.reduction.modes()?;
    let basis = build_decomposed_basis(&store, m_u, m_d)?;
    let dir = cfg.artifacts_dir();
    std::fs::create_dir_all(dir)?;
    basis.save(&dir.join("basis.hrsnap"))?;
    let reduced_elements = match method {
        Method::Decsw => {
            let training = build_ecsw_training(&[(&store, &asm)], &basis, cfg.reduction.tau()?)?;
            let weights = compute_ecsw_weights(&training)?;
            write_json(&dir.join("ecsw_weights.json"), &weights)?;
            Some(weights.len())
        }
        Method::Ddeim => {
            let (k_u, k_d) = cfg.reduction.deim_size()?;
            let op = build_deim_operator(&store, &basis, k_u, k_d, &asm)?;
            op.save(dir)?;
            Some(op.evaluation_elements.len())
        }
        _ => None,
    };
    let summary = BuildSummary {
        method,
        basis_columns: basis.dim(),
        snapshots: store.len(),
        reduced_elements,
        n_elements: asm.n_elements(),
        provenance: json!({ "reduction": cfg.reduction, "snapshots": store.provenance }),
    };
    write_json(&dir.join("build.json"), &summary)?;
    Ok(summary)
}

/// Maximum `u_y` over the control set in the last snapshot.
fn final_control_displacement(store: &SnapshotStore, asm: &Assembler, set: &str) -> Result<f64, CliError> {
    let last = store.len().checked_sub(1).ok_or_else(|| CliError::Usage("snapshot store is empty".into()))?;
    let nodes = asm.mesh.node_set(set)?;
    Ok(nodes
        .iter()
        .filter_map(|&n| asm.layout.free_index(DofLayout::dof(n, Component::Uy)))
        .map(|k| store.solutions[(k, last)])
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Solver settings for a reduced run; with `replay_schedule` the training
/// run's step sizes are replayed up to its final control displacement.
fn rom_solver_config(cfg: &RunConfig, asm: &Assembler) -> Result<SolverConfig, CliError> {
    let mut solver = cfg.solver.clone();
    if cfg.replay_schedule {
        let store = SnapshotStore::load(cfg.require(&cfg.snapshots, "snapshots")?)?;
        solver.target_displacement = Some(final_control_displacement(&store, asm, &cfg.control_set)?);
        solver.stop_after_peak = None;
        solver.max_steps = solver.max_steps.max(3 * store.len());
        solver.arc_schedule = Some(store.arc_schedule());
    }
    Ok(solver)
}

/// Builds the reduced system of `method` from saved artifacts.
pub fn load_reduced_system(method: Method, dir: &Path, asm: Arc<Assembler>, control_set: &str) -> Result<Box<dyn ContinuationSystem>, CliError> {
    let basis = Arc::new(ReducedBasis::load(&dir.join("basis.hrsnap"))?);
    Ok(match method {
        Method::Dpod => Box::new(ProjectedSystem::galerkin(asm, basis, control_set)?),
        Method::Decsw => {
            let text = std::fs::read_to_string(dir.join("ecsw_weights.json"))?;
            let weights: EcswWeights = serde_json::from_str(&text)?;
            Box::new(ecsw_system(asm, basis, &weights, control_set)?)
        }
        Method::Ddeim => {
            let op = DeimOperator::load(dir, &basis, &asm)?;
            Box::new(DeimSystem::new(asm, basis, Arc::new(op), control_set)?)
        }
        Method::Fom => return Err(CliError::Usage("rom-run needs a reduced method".into())),
    })
}

pub struct RomRunOutcome {
    pub run: RunOutcome,
    pub comparison: Option<CurveComparison>,
}

pub fn rom_run(cfg: &RunConfig) -> Result<RomRunOutcome, CliError> {
    let asm = build_assembler(&cfg.geometry, &cfg.material)?;
    let solver = rom_solver_config(cfg, &asm)?;
    let mut sys = load_reduced_system(cfg.reduction.method, cfg.artifacts_dir(), asm.clone(), &cfg.control_set)?;
    let record = arc_length_run(sys.as_mut(), &solver, load_resultant(&asm))?;
    let n_el = asm.n_elements();
    let summary = RunSummary::new(cfg.reduction.method, &record, n_el);
    write_run(&cfg.output, &record, &summary)?;
    // a partial curve is still compared over the interval it covers
    let comparison = match &cfg.reference {
        Some(reference) => {
            let c = compare_runs(reference, &record, &summary, cfg.samples)?;
            write_json(&cfg.output.join("comparison.json"), &c)?;
            Some(c)
        }
        None => None,
    };
    if record.is_partial() {
        return Err(CliError::Partial(format!("{:?} run stopped after {} steps; partial curve written", cfg.reduction.method, record.steps.len())));
    }
    Ok(RomRunOutcome { run: RunOutcome { record, summary }, comparison })
}

/// Reads a run directory written by `fom-run` or `rom-run`.
pub fn read_run(dir: &Path) -> Result<(ContinuationRecord, RunSummary), CliError> {
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
    let text = std::fs::read_to_string(dir.join("record.csv"))?;
    let mut record = ContinuationRecord::from_csv(&text, summary.load_resultant)?;
    record.termination = summary.termination;
    record.wall_time = summary.wall_time;
    record.element_evaluations = summary.element_evaluations;
    record.newton_iterations = summary.newton_iterations;
    Ok((record, summary))
}

fn compare_runs(reference: &Path, record: &ContinuationRecord, summary: &RunSummary, samples: usize) -> Result<CurveComparison, CliError> {
    let (ref_record, ref_summary) = read_run(reference)?;
    let err = curve_error(&ref_record.curve(), &record.curve(), samples)?;
    let time_ratio = if ref_summary.wall_time > 0.0 { summary.wall_time / ref_summary.wall_time } else { f64::NAN };
    let fraction = summary.elements_per_iteration / summary.n_elements as f64;
    Ok(CurveComparison::new(&err, time_ratio, fraction))
}

pub fn compare(cfg: &RunConfig) -> Result<CurveComparison, CliError> {
    let reference = cfg.require(&cfg.reference, "reference")?;
    let (record, summary) = read_run(cfg.require(&cfg.candidate, "candidate")?)?;
    let c = compare_runs(reference, &record, &summary, cfg.samples)?;
    std::fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("comparison.json"), &c)?;
    Ok(c)
}

/// Runs `f` on a pool of `threads` workers (all available when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool").install(f),
        None => f(),
    }
}
