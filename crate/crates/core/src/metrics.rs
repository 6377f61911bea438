//! Force–displacement curve error, timing breakdowns and comparison summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean relative force error between two curves, and sampling diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveError {
    pub epsilon: f64,
    pub n: usize,
    /// Samples dropped because the reference force is zero there.
    pub excluded_samples: usize,
    /// Whether either curve's displacement ever decreased.
    pub backtracking: bool,
    pub upper: f64,
}

/// Force at displacement `u` on the polyline through the origin and
/// `points`, taken on the first segment that reaches `u`.
fn first_crossing(points: &[(f64, f64)], u: f64) -> f64 {
    let mut prev = (0.0, 0.0);
    for &p in points {
        let (lo, hi) = if prev.0 <= p.0 { (prev.0, p.0) } else { (p.0, prev.0) };
        if u >= lo && u <= hi {
            if hi == lo {
                return p.1;
            }
            let t = (u - prev.0) / (p.0 - prev.0);
            return prev.1 + t * (p.1 - prev.1);
        }
        prev = p;
    }
    prev.1
}

fn backtracks(points: &[(f64, f64)]) -> bool {
    let mut last = 0.0;
    for &(u, _) in points {
        if u < last {
            return true;
        }
        last = u;
    }
    false
}

/// `ε = (1/N) Σ |F_ref(u_i) − F_cand(u_i)| / F_ref(u_i)` over `N` midpoint
/// samples of `[0, min(max u_ref, max u_cand)]`; both curves start at the
/// origin. Samples with `F_ref = 0` are excluded and counted.
pub fn curve_error(reference: &[(f64, f64)], candidate: &[(f64, f64)], n: usize) -> Result<CurveError> {
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    let max_u = |c: &[(f64, f64)]| c.iter().map(|p| p.0).fold(0.0, f64::max);
    let upper = max_u(reference).min(max_u(candidate));
    if !(upper > 0.0) {
        return Err(Error::Invalid("curves share no displacement interval".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for i in 0..n {
        let u = upper * (i as f64 + 0.5) / n as f64;
        let fr = first_crossing(reference, u);
        if fr == 0.0 {
            continue;
        }
        let fc = first_crossing(candidate, u);
        sum += ((fr - fc) / fr).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Invalid("reference force is zero at every sample".into()));
    }
    Ok(CurveError { epsilon: sum / used as f64, n, excluded_samples: n - used, backtracking: backtracks(reference) || backtracks(candidate), upper })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Assembly,
    Solve,
    Other,
}

/// A timed phase `[start, end]` in seconds on a common clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub assembly: f64,
    pub solve: f64,
    pub other: f64,
    pub total: f64,
    pub assembly_share: f64,
    pub solve_share: f64,
    /// A stamp ended before it started or began before its predecessor ended.
    pub clock_skew: bool,
}

pub fn timing_report(stamps: &[PhaseStamp]) -> TimingReport {
    let mut rep = TimingReport::default();
    let mut last_end = f64::NEG_INFINITY;
    for s in stamps {
        if s.end < s.start || s.start < last_end {
            rep.clock_skew = true;
        }
        last_end = last_end.max(s.end);
        let d = (s.end - s.start).max(0.0);
        match s.phase {
            Phase::Assembly => rep.assembly += d,
            Phase::Solve => rep.solve += d,
            Phase::Other => rep.other += d,
        }
    }
    rep.total = rep.assembly + rep.solve + rep.other;
    if rep.total > 0.0 {
        rep.assembly_share = rep.assembly / rep.total;
        rep.solve_share = rep.solve / rep.total;
    }
    rep
}

/// Timing breakdown of a continuation run: per-step assembly and solve
/// times, with the rest of the wall time booked as `Other`.
pub fn record_timing(record: &crate::solver::ContinuationRecord) -> TimingReport {
    let mut stamps = Vec::with_capacity(2 * record.steps.len() + 1);
    let mut t = 0.0;
    for s in &record.steps {
        stamps.push(PhaseStamp { phase: Phase::Assembly, start: t, end: t + s.t_assembly });
        t += s.t_assembly;
        stamps.push(PhaseStamp { phase: Phase::Solve, start: t, end: t + s.t_solve });
        t += s.t_solve;
    }
    if record.wall_time > t {
        stamps.push(PhaseStamp { phase: Phase::Other, start: t, end: record.wall_time });
    }
    timing_report(&stamps)
}

/// Summary of a reduced run against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    pub epsilon: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub time_ratio: f64,
    pub element_fraction: f64,
    pub excluded_samples: usize,
}

impl CurveComparison {
    pub fn new(error: &CurveError, time_ratio: f64, element_fraction: f64) -> Self {
        CurveComparison { epsilon: error.epsilon, n: error.n, time_ratio, element_fraction, excluded_samples: error.excluded_samples }
    }
}
