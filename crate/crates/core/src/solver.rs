//! Newton iteration and cylindrical arc-length continuation over a generic
//! discretised system, plus the full-order system itself.

use std::path::Path;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::assembly::{virgin_states, Assembler, ElementStates};
use crate::dofs::{Component, DofLayout, Field};
use crate::error::{Error, Result};
use crate::format;

/// A factorised tangent.
pub trait Factorized {
    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>>;
}

/// Residual and tangent at a trial point, with the time spent on them.
pub struct Linearization {
    pub g: Vec<f64>,
    pub tangent: Box<dyn Factorized>,
    pub t_assembly: f64,
    pub t_factor: f64,
}

/// A discretised equilibrium problem `G(x, λ) = R(x) − λ P = 0` in some set
/// of coordinates (full free DOFs or reduced coordinates).
pub trait ContinuationSystem {
    fn dim(&self) -> usize;
    /// Evaluates residual and tangent at `(x, λ)` from the committed
    /// history; the resulting trial state becomes the commit candidate.
    fn linearize(&mut self, x: &[f64], lambda: f64) -> Result<Linearization>;
    /// Accepts the trial state of the most recent `linearize`.
    fn commit(&mut self);
    /// `P` in system coordinates.
    fn reference_load(&self) -> &[f64];
    /// Coordinates entering the arc-length constraint.
    fn displacement_mask(&self) -> &[bool];
    /// Control displacement [mm] of state `x`.
    fn control_displacement(&self, x: &[f64]) -> f64;
    /// Element kernel evaluations so far.
    fn element_evaluations(&self) -> u64;
    /// Called after each committed step with the converged point.
    fn on_commit(&mut self, _x: &[f64], _lambda: f64) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Convergence: `‖G‖ ≤ newton_tol · ‖λ P‖` (plus an absolute floor).
    pub newton_tol: f64,
    /// Absolute floor on `‖G‖` [N] below which round-off dominates.
    pub abs_tol: f64,
    pub max_newton_iters: usize,
    /// Arc length in displacement-coordinate norm [mm].
    pub initial_arc_length: f64,
    pub min_arc_length: f64,
    pub max_arc_length: f64,
    /// Desired Newton iterations per step for the step adaptation.
    pub target_iters: usize,
    pub max_steps: usize,
    /// Stop once the control displacement exceeds this value [mm].
    pub target_displacement: Option<f64>,
    /// Stop once the load factor has fallen this fraction below its maximum.
    pub stop_after_peak: Option<f64>,
    /// Prescribed arc length of each step (e.g. replaying a training run);
    /// adaptivity takes over once it is exhausted or after a cut.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arc_schedule: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-8,
            abs_tol: 1e-9,
            max_newton_iters: 12,
            initial_arc_length: 1e-3,
            min_arc_length: 1e-7,
            max_arc_length: 1e-2,
            target_iters: 4,
            max_steps: 300,
            target_displacement: None,
            stop_after_peak: None,
            arc_schedule: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.newton_tol > 0.0
            && self.abs_tol >= 0.0
            && self.max_newton_iters > 0
            && self.min_arc_length > 0.0
            && self.min_arc_length <= self.initial_arc_length
            && self.initial_arc_length <= self.max_arc_length
            && self.target_iters > 0
            && self.arc_schedule.as_ref().is_none_or(|s| s.iter().all(|&a| a > 0.0 && a.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("solver configuration: tolerances and arc-length bounds must be positive and ordered".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub load_factor: f64,
    pub u_control: f64,
    pub force: f64,
    pub iterations: usize,
    pub t_assembly: f64,
    pub t_solve: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxSteps,
    TargetDisplacement,
    PastPeak,
    /// Step cutting reached the minimum arc length.
    CutExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
    /// Total resultant of the reference load pattern [N]; force = λ · this.
    pub load_resultant: f64,
    pub element_evaluations: u64,
    pub newton_iterations: usize,
    pub failed_attempts: usize,
    pub wall_time: f64,
}

impl ContinuationRecord {
    pub fn is_partial(&self) -> bool {
        self.termination == Termination::CutExhausted
    }

    /// `(u_control, force)` pairs.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.steps.iter().map(|s| (s.u_control, s.force)).collect()
    }

    pub fn max_force(&self) -> f64 {
        self.steps.iter().map(|s| s.force).fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with header `step,load_factor,u_control_mm,F_reaction_N,iters,t_assembly_s,t_solve_s`.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("step,load_factor,u_control_mm,F_reaction_N,iters,t_assembly_s,t_solve_s\n");
        for s in &self.steps {
            let (ta, ts) = if with_timing { (format!("{:.6}", s.t_assembly), format!("{:.6}", s.t_solve)) } else { ("-".into(), "-".into()) };
            out.push_str(&format!("{},{:.17e},{:.17e},{:.17e},{},{},{}\n", s.step, s.load_factor, s.u_control, s.force, s.iterations, ta, ts));
        }
        out
    }

    pub fn from_csv(text: &str, load_resultant: f64) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("line {}: expected 7 fields", i + 1)));
            }
            let num = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| Error::Format(format!("line {}: bad number `{s}`", i + 1))) };
            let time = |s: &str| -> Result<f64> { if s.trim() == "-" { Ok(0.0) } else { num(s) } };
            steps.push(StepRecord {
                step: f[0].trim().parse().map_err(|_| Error::Format(format!("line {}: bad step", i + 1)))?,
                load_factor: num(f[1])?,
                u_control: num(f[2])?,
                force: num(f[3])?,
                iterations: f[4].trim().parse().map_err(|_| Error::Format(format!("line {}: bad iteration count", i + 1)))?,
                t_assembly: time(f[5])?,
                t_solve: time(f[6])?,
            });
        }
        Ok(ContinuationRecord {
            steps,
            termination: Termination::MaxSteps,
            load_resultant,
            element_evaluations: 0,
            newton_iterations: 0,
            failed_attempts: 0,
            wall_time: 0.0,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn masked_dot(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter().zip(b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| x * y).sum()
}

fn converged(g: &[f64], lambda: f64, p_norm: f64, config: &SolverConfig) -> bool {
    norm(g) <= (config.newton_tol * lambda.abs() * p_norm).max(config.abs_tol)
}

/// Outcome of a converged load-controlled Newton solve.
#[derive(Clone, Debug)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Newton iteration at fixed load factor. The trial state is committed only
/// on convergence. Iterations count linearisations.
pub fn newton_step<S: ContinuationSystem + ?Sized>(system: &mut S, x0: &[f64], lambda: f64, config: &SolverConfig) -> Result<NewtonResult> {
    let p_norm = norm(system.reference_load());
    let mut x = x0.to_vec();
    let mut history = Vec::new();
    for it in 1..=config.max_newton_iters {
        let lin = system.linearize(&x, lambda)?;
        let gn = norm(&lin.g);
        history.push(gn);
        if !gn.is_finite() {
            break;
        }
        if converged(&lin.g, lambda, p_norm, config) {
            system.commit();
            return Ok(NewtonResult { x, iterations: it, residual_history: history });
        }
        let dx = lin.tangent.solve(&lin.g)?;
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi -= d;
        }
    }
    Err(Error::Solver(format!("Newton did not converge; residual history {history:?}")))
}

struct StepOutcome {
    x: Vec<f64>,
    lambda: f64,
    iterations: usize,
    tangent: Box<dyn Factorized>,
    t_assembly: f64,
    t_solve: f64,
}

/// One arc-length step from the converged point `(x, λ)`.
fn arc_step<S: ContinuationSystem + ?Sized>(
    system: &mut S,
    x: &[f64],
    lambda: f64,
    tangent: &dyn Factorized,
    prev_dx: &[f64],
    arc: f64,
    config: &SolverConfig,
) -> Result<StepOutcome> {
    let mask = system.displacement_mask().to_vec();
    let p = system.reference_load().to_vec();
    let p_norm = norm(&p);
    let mut t_solve = 0.0;
    let mut t_assembly = 0.0;

    let t0 = Instant::now();
    let dxt = tangent.solve(&p)?;
    t_solve += t0.elapsed().as_secs_f64();
    let tn = masked_dot(&dxt, &dxt, &mask).sqrt();
    if !(tn > 0.0) || !tn.is_finite() {
        return Err(Error::Solver("degenerate tangent predictor".into()));
    }
    let sign = if masked_dot(&dxt, prev_dx, &mask) < 0.0 { -1.0 } else { 1.0 };
    let mut dlam = sign * arc / tn;
    let mut dx: Vec<f64> = dxt.iter().map(|v| dlam * v).collect();

    for it in 1..=config.max_newton_iters {
        let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let lt = lambda + dlam;
        let lin = system.linearize(&xt, lt)?;
        t_assembly += lin.t_assembly;
        t_solve += lin.t_factor;
        if lin.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("non-finite residual".into()));
        }
        if converged(&lin.g, lt, p_norm, config) {
            return Ok(StepOutcome { x: xt, lambda: lt, iterations: it, tangent: lin.tangent, t_assembly, t_solve });
        }
        let t0 = Instant::now();
        let dg = lin.tangent.solve(&lin.g)?;
        let dt = lin.tangent.solve(&p)?;
        t_solve += t0.elapsed().as_secs_f64();
        // δx = −K⁻¹G + δλ K⁻¹P with ‖Δx + δx‖ = arc on the displacement part
        let base: Vec<f64> = dx.iter().zip(&dg).map(|(a, b)| a - b).collect();
        let a = masked_dot(&dt, &dt, &mask);
        let b = 2.0 * masked_dot(&dt, &base, &mask);
        let c = masked_dot(&base, &base, &mask) - arc * arc;
        let disc = b * b - 4.0 * a * c;
        if !(disc >= 0.0) || !(a > 0.0) {
            return Err(Error::Solver("arc-length constraint has no real root".into()));
        }
        let sq = disc.sqrt();
        let q = -0.5 * (b + b.signum() * sq);
        let roots = if q != 0.0 { [q / a, c / q] } else { [-b / (2.0 * a), -b / (2.0 * a)] };
        // pick the root keeping the increment closest to the previous one
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for &r in &roots {
            let cand: Vec<f64> = base.iter().zip(&dt).map(|(u, v)| u + r * v).collect();
            let score = masked_dot(&cand, &dx, &mask);
            if score > best_score {
                best_score = score;
                best = Some((r, cand));
            }
        }
        let (r, cand) = best.expect("two roots");
        dx = cand;
        dlam += r;
    }
    Err(Error::Solver("arc-length corrector did not converge".into()))
}

/// Traces the equilibrium path from the unloaded state.
pub fn arc_length_run<S: ContinuationSystem + ?Sized>(system: &mut S, config: &SolverConfig, load_resultant: f64) -> Result<ContinuationRecord> {
    config.validate()?;
    let start = Instant::now();
    let evals0 = system.element_evaluations();
    let n = system.dim();
    let mut x = vec![0.0; n];
    let mut lambda = 0.0;
    let mut prev_dx = vec![0.0; n];
    let lin0 = system.linearize(&x, lambda)?;
    let mut tangent = lin0.tangent;
    let mut arc = config.initial_arc_length;
    let mut steps = Vec::new();
    let mut newton_iterations = 1;
    let mut failed = 0;
    let mut lambda_max = f64::NEG_INFINITY;
    let mut pending_assembly = lin0.t_assembly;
    let mut pending_solve = lin0.t_factor;

    let mut retrying = false;
    let termination = loop {
        if steps.len() >= config.max_steps {
            break Termination::MaxSteps;
        }
        if !retrying {
            if let Some(&scheduled) = config.arc_schedule.as_ref().and_then(|s| s.get(steps.len())) {
                arc = scheduled;
            }
        }
        match arc_step(system, &x, lambda, tangent.as_ref(), &prev_dx, arc, config) {
            Ok(out) => {
                system.commit();
                prev_dx = out.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                x = out.x;
                lambda = out.lambda;
                tangent = out.tangent;
                newton_iterations += out.iterations;
                system.on_commit(&x, lambda);
                let u = system.control_displacement(&x);
                steps.push(StepRecord {
                    step: steps.len() + 1,
                    load_factor: lambda,
                    u_control: u,
                    force: lambda * load_resultant,
                    iterations: out.iterations,
                    t_assembly: out.t_assembly + pending_assembly,
                    t_solve: out.t_solve + pending_solve,
                });
                pending_assembly = 0.0;
                pending_solve = 0.0;
                retrying = false;
                let factor = (config.target_iters as f64 / out.iterations as f64).sqrt();
                arc = (arc * factor).clamp(config.min_arc_length, config.max_arc_length);
                lambda_max = lambda_max.max(lambda);
                if let Some(target) = config.target_displacement {
                    if u >= target {
                        break Termination::TargetDisplacement;
                    }
                }
                if let Some(margin) = config.stop_after_peak {
                    if lambda < (1.0 - margin) * lambda_max {
                        break Termination::PastPeak;
                    }
                }
            }
            Err(Error::Element { .. }) | Err(Error::Solver(_)) | Err(Error::Singular(_)) => {
                failed += 1;
                retrying = true;
                if arc <= config.min_arc_length {
                    break Termination::CutExhausted;
                }
                arc = (0.5 * arc).max(config.min_arc_length);
            }
            Err(e) => return Err(e),
        }
    };
    Ok(ContinuationRecord {
        steps,
        termination,
        load_resultant,
        element_evaluations: system.element_evaluations() - evals0,
        newton_iterations,
        failed_attempts: failed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

struct SparseLu(Lu<usize, f64>);

impl Factorized for SparseLu {
    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.0.solve_in_place(b.as_mut());
        let out: Vec<f64> = (0..rhs.len()).map(|i| b[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("sparse LU produced non-finite solution".into()));
        }
        Ok(out)
    }
}

/// Dense LU for reduced systems.
pub struct DenseLu(pub nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>);

impl DenseLu {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite reduced tangent".into()));
        }
        Ok(DenseLu(k.lu()))
    }
}

impl Factorized for DenseLu {
    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let x = self
            .0
            .solve(&DVector::from_column_slice(rhs))
            .ok_or_else(|| Error::Singular("reduced tangent is singular".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("reduced tangent is singular".into()));
        }
        Ok(x.as_slice().to_vec())
    }
}

/// Free DOFs of the `u_y` component on the `top` node set, used as control
/// displacement (maximum over the set).
pub fn control_dofs(asm: &Assembler, set: &str) -> Result<Vec<usize>> {
    let nodes = asm.mesh.node_set(set)?;
    Ok(nodes.iter().map(|&n| DofLayout::dof(n, Component::Uy)).collect())
}

/// Snapshots recorded during a full-order run: converged free-DOF solution
/// vectors and the matching internal forces.
#[derive(Clone, Debug)]
pub struct SnapshotStore {
    /// `n_free × ℓ`.
    pub solutions: DMatrix<f64>,
    /// `n_free × ℓ` internal forces `R(V_j)` on the free DOFs.
    pub internal_forces: DMatrix<f64>,
    /// `n_free × ℓ` nonlinear forces `R(V_j) − K_lin V_j`, once recorded.
    pub nonlinear_forces: Option<DMatrix<f64>>,
    /// `(12·n_E) × ℓ` unassembled element internal forces at each converged
    /// state (element `e` in rows `12e..12e+12`), if recorded.
    pub element_forces: Option<DMatrix<f64>>,
    /// Field of each free-DOF row.
    pub fields: Vec<Field>,
    pub provenance: serde_json::Value,
}

impl SnapshotStore {
    pub fn len(&self) -> usize {
        self.solutions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.ncols() == 0
    }

    /// Displacement-field norm of each step increment `V_j − V_{j−1}`
    /// (`V_0 = 0`): the arc lengths that reproduce the recorded path.
    pub fn arc_schedule(&self) -> Vec<f64> {
        let mut prev = vec![0.0; self.fields.len()];
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.len() {
            let col = self.solutions.column(j);
            let mut s = 0.0;
            for i in 0..self.fields.len() {
                if self.fields[i] == Field::Displacement {
                    s += (col[i] - prev[i]) * (col[i] - prev[i]);
                }
                prev[i] = col[i];
            }
            out.push(s.sqrt());
        }
        out
    }

    /// Keeps the first `count` snapshots only.
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.len());
        SnapshotStore {
            solutions: self.solutions.columns(0, count).into_owned(),
            internal_forces: self.internal_forces.columns(0, count).into_owned(),
            nonlinear_forces: self.nonlinear_forces.as_ref().map(|m| m.columns(0, count).into_owned()),
            element_forces: self.element_forces.as_ref().map(|m| m.columns(0, count).into_owned()),
            fields: self.fields.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenates stores that share the same layout.
    pub fn concat(stores: &[&SnapshotStore]) -> Result<Self> {
        let first = stores.first().ok_or_else(|| Error::Invalid("no snapshot stores".into()))?;
        if stores.iter().any(|s| s.fields != first.fields) {
            return Err(Error::Dimension("snapshot stores have different layouts".into()));
        }
        let join = |get: &dyn Fn(&SnapshotStore) -> &DMatrix<f64>| -> DMatrix<f64> {
            let total: usize = stores.iter().map(|s| get(s).ncols()).sum();
            let mut m = DMatrix::zeros(get(first).nrows(), total);
            let mut c = 0;
            for s in stores {
                let g = get(s);
                m.columns_mut(c, g.ncols()).copy_from(g);
                c += g.ncols();
            }
            m
        };
        let nonlinear = if stores.iter().all(|s| s.nonlinear_forces.is_some()) {
            Some(join(&|s| s.nonlinear_forces.as_ref().unwrap()))
        } else {
            None
        };
        let element = match stores.iter().map(|s| s.element_forces.as_ref()).collect::<Option<Vec<_>>>() {
            Some(e) if e.iter().all(|m| m.nrows() == e[0].nrows()) => Some(join(&|s| s.element_forces.as_ref().unwrap())),
            _ => None,
        };
        Ok(SnapshotStore {
            solutions: join(&|s| &s.solutions),
            internal_forces: join(&|s| &s.internal_forces),
            nonlinear_forces: nonlinear,
            element_forces: element,
            fields: first.fields.clone(),
            provenance: serde_json::json!({ "concatenated": stores.iter().map(|s| s.provenance.clone()).collect::<Vec<_>>() }),
        })
    }
}

impl SnapshotStore {
    /// Writes `solutions.hrsnap`, `internal_forces.hrsnap` and (if present)
    /// `nonlinear_forces.hrsnap` and `element_forces.hrsnap` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let fields: String = self.fields.iter().map(|f| if *f == Field::Displacement { 'u' } else { 'd' }).collect();
        let trailer = serde_json::json!({ "fields": fields, "provenance": self.provenance });
        format::save_matrix(&dir.join("solutions.hrsnap"), &self.solutions, &trailer)?;
        format::save_matrix(&dir.join("internal_forces.hrsnap"), &self.internal_forces, &trailer)?;
        if let Some(nl) = &self.nonlinear_forces {
            format::save_matrix(&dir.join("nonlinear_forces.hrsnap"), nl, &trailer)?;
        }
        if let Some(el) = &self.element_forces {
            format::save_matrix(&dir.join("element_forces.hrsnap"), el, &trailer)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (solutions, trailer) = format::load_matrix(&dir.join("solutions.hrsnap"))?;
        let (internal_forces, _) = format::load_matrix(&dir.join("internal_forces.hrsnap"))?;
        let nl_path = dir.join("nonlinear_forces.hrsnap");
        let nonlinear_forces = if nl_path.exists() { Some(format::load_matrix(&nl_path)?.0) } else { None };
        let el_path = dir.join("element_forces.hrsnap");
        let element_forces = if el_path.exists() { Some(format::load_matrix(&el_path)?.0) } else { None };
        let fields: Vec<Field> = trailer["fields"]
            .as_str()
            .ok_or_else(|| Error::Format("snapshot trailer lacks `fields`".into()))?
            .chars()
            .map(|c| match c {
                'u' => Ok(Field::Displacement),
                'd' => Ok(Field::Damage),
                other => Err(Error::Format(format!("unknown field tag `{other}`"))),
            })
            .collect::<Result<_>>()?;
        let dims_ok = solutions.shape() == internal_forces.shape()
            && solutions.nrows() == fields.len()
            && nonlinear_forces.as_ref().is_none_or(|m| m.shape() == solutions.shape())
            && element_forces.as_ref().is_none_or(|m| m.ncols() == solutions.ncols() && m.nrows() % 12 == 0);
        if !dims_ok {
            return Err(Error::Dimension("snapshot matrices disagree in shape".into()));
        }
        Ok(SnapshotStore { solutions, internal_forces, nonlinear_forces, element_forces, fields, provenance: trailer["provenance"].clone() })
    }
}

/// `R_nl(V_j) = R(V_j) − K_lin V_j` for every snapshot.
pub fn record_nonlinear_snapshots(store: &mut SnapshotStore, asm: &Assembler, k_lin: &[f64]) -> Result<()> {
    let n = store.fields.len();
    if asm.pattern.n != n || k_lin.len() != asm.pattern.nnz() {
        return Err(Error::Dimension("K_lin does not match the snapshot layout".into()));
    }
    let mut out = DMatrix::zeros(n, store.len());
    for j in 0..store.len() {
        let v: Vec<f64> = store.solutions.column(j).iter().copied().collect();
        let kv = crate::assembly::spmv(&asm.pattern, k_lin, &v);
        for i in 0..n {
            out[(i, j)] = store.internal_forces[(i, j)] - kv[i];
        }
    }
    store.nonlinear_forces = Some(out);
    Ok(())
}

/// The full-order system on the free DOFs.
pub struct FomSystem {
    pub asm: Arc<Assembler>,
    pub committed: Vec<ElementStates>,
    trial: Vec<ElementStates>,
    trial_r: Vec<f64>,
    trial_element_r: Vec<[f64; 12]>,
    symbolic: SymbolicLu<usize>,
    p: Vec<f64>,
    mask: Vec<bool>,
    control: Vec<usize>,
    /// Snapshot columns accumulated by `on_commit`.
    pub snapshots: Vec<Vec<f64>>,
    pub snapshot_forces: Vec<Vec<f64>>,
    /// Element internal forces of each snapshot, flattened.
    pub snapshot_element_forces: Vec<Vec<f64>>,
    /// Full internal force of the last committed state (reactions on fixed DOFs).
    pub committed_r: Vec<f64>,
}

impl FomSystem {
    pub fn new(asm: Arc<Assembler>, control_set: &str) -> Result<Self> {
        let symbolic = SymbolicLu::try_new(asm.pattern.symbolic().as_ref()).map_err(|e| Error::Solver(format!("symbolic LU: {e:?}")))?;
        let p = asm.p_ref_free();
        let mask = asm.layout.free_fields().iter().map(|f| *f == Field::Displacement).collect();
        let control = control_dofs(&asm, control_set)?;
        let n_el = asm.n_elements();
        let n = asm.layout.n_dofs;
        Ok(FomSystem {
            asm,
            committed: virgin_states(n_el),
            trial: virgin_states(n_el),
            trial_r: vec![0.0; n],
            trial_element_r: Vec::new(),
            symbolic,
            p,
            mask,
            control,
            snapshots: Vec::new(),
            snapshot_forces: Vec::new(),
            snapshot_element_forces: Vec::new(),
            committed_r: vec![0.0; n],
        })
    }

    /// Collects the recorded snapshots.
    pub fn snapshot_store(&self, provenance: serde_json::Value) -> SnapshotStore {
        let n = self.asm.layout.n_free();
        let l = self.snapshots.len();
        let solutions = DMatrix::from_fn(n, l, |i, j| self.snapshots[j][i]);
        let internal_forces = DMatrix::from_fn(n, l, |i, j| self.snapshot_forces[j][i]);
        let rows = 12 * self.asm.n_elements();
        let element_forces = DMatrix::from_fn(rows, l, |i, j| self.snapshot_element_forces[j][i]);
        SnapshotStore { solutions, internal_forces, nonlinear_forces: None, element_forces: Some(element_forces), fields: self.asm.layout.free_fields(), provenance }
    }

    /// Sum of the `u_y` reactions on the given node set.
    pub fn reaction(&self, set: &str) -> Result<f64> {
        let nodes = self.asm.mesh.node_set(set)?;
        Ok(nodes.iter().map(|&n| self.committed_r[DofLayout::dof(n, Component::Uy)]).sum())
    }
}

impl ContinuationSystem for FomSystem {
    fn dim(&self) -> usize {
        self.asm.layout.n_free()
    }

    fn linearize(&mut self, x: &[f64], lambda: f64) -> Result<Linearization> {
        let t0 = Instant::now();
        let v = self.asm.layout.expand(x);
        let sys = self.asm.assemble_full(&v, &self.committed, lambda)?;
        let t_assembly = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let k = self.asm.pattern.to_matrix(sys.k_values);
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone(), k.as_ref()).map_err(|e| Error::Singular(format!("sparse LU: {e:?}")))?;
        let t_factor = t1.elapsed().as_secs_f64();
        self.trial = sys.states;
        self.trial_r = sys.r_full;
        self.trial_element_r = sys.element_r;
        Ok(Linearization { g: sys.g, tangent: Box::new(SparseLu(lu)), t_assembly, t_factor })
    }

    fn commit(&mut self) {
        self.committed.clone_from(&self.trial);
        self.committed_r.clone_from(&self.trial_r);
    }

    fn reference_load(&self) -> &[f64] {
        &self.p
    }

    fn displacement_mask(&self) -> &[bool] {
        &self.mask
    }

    fn control_displacement(&self, x: &[f64]) -> f64 {
        self.control
            .iter()
            .map(|&d| self.asm.layout.free_index(d).map_or(0.0, |k| x[k]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn element_evaluations(&self) -> u64 {
        self.asm.evaluations()
    }

    fn on_commit(&mut self, x: &[f64], _lambda: f64) {
        self.snapshots.push(x.to_vec());
        self.snapshot_forces.push(self.asm.layout.restrict(&self.committed_r));
        // the last linearization is at the converged state
        self.snapshot_element_forces.push(self.trial_element_r.iter().flatten().copied().collect());
    }
}
