//! Batch studies: N-1 contingency runs warm-started from a base solution,
//! and convergence sweeps over uniformly sampled initial conditions.
//!
//! Solves run in parallel; results always come back in input order.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::network::{BusKind, Network, ValidationError};
use crate::solver::{solve, InitialCondition, SolveError, SolveReport, SolveStatus, Solution, SolverOptions};
use crate::state::StateVector;
use crate::stamps::transformer_two_port;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outage {
    Generator(u32),
    Branch(u32),
    Transformer(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub label: String,
    pub outages: Vec<Outage>,
}

impl Contingency {
    pub fn single(outage: Outage) -> Self {
        let label = match outage {
            Outage::Generator(id) => format!("G{id}"),
            Outage::Branch(id) => format!("B{id}"),
            Outage::Transformer(id) => format!("T{id}"),
        };
        Contingency { label, outages: vec![outage] }
    }

    /// Number of generator and branch outages, as `(|L_G|, |L_B|)`.
    pub fn counts(&self) -> (usize, usize) {
        let g = self.outages.iter().filter(|o| matches!(o, Outage::Generator(_))).count();
        (g, self.outages.len() - g)
    }
}

pub type ContingencySet = Vec<Contingency>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0:?} does not exist or is already out of service")]
    UnknownOutage(Outage),
    #[error("base case is not a converged solution")]
    BaseNotConverged,
    #[error("empty sampling range")]
    EmptyRange,
    #[error("{0}")]
    Solve(String),
}

impl From<SolveError> for AnalysisError {
    fn from(e: SolveError) -> Self {
        AnalysisError::Solve(e.to_string())
    }
}

/// Copy of `net` with the outages applied. Bus kinds are refreshed, so a
/// bus that loses its only regulating generator becomes PQ.
pub fn apply_outages(net: &Network, outages: &[Outage]) -> Result<Network, AnalysisError> {
    let mut out = net.clone();
    for &o in outages {
        let flag = match o {
            Outage::Generator(id) => out.generators.iter_mut().find(|g| g.id == id && g.in_service).map(|g| &mut g.in_service),
            Outage::Branch(id) => out.branches.iter_mut().find(|b| b.id == id && b.in_service).map(|b| &mut b.in_service),
            Outage::Transformer(id) => {
                out.transformers.iter_mut().find(|t| t.id == id && t.in_service).map(|t| &mut t.in_service)
            }
        };
        *flag.ok_or(AnalysisError::UnknownOutage(o))? = false;
    }
    out.refresh_kinds();
    Ok(out)
}

fn infeasible(reason: String, method: crate::homotopy::HomotopyMethod) -> SolveReport {
    SolveReport {
        status: SolveStatus::Infeasible,
        method,
        inner_iterations: 0,
        homotopy_steps: 0,
        outer_passes: 0,
        events: Vec::new(),
        residual: crate::nr::Convergence {
            converged: false,
            max_current: f64::NAN,
            max_control: f64::NAN,
            max_source: f64::NAN,
        },
        max_mismatch: f64::NAN,
        generators: Vec::new(),
        message: Some(reason),
        wall_time_s: 0.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContingencyResult {
    pub label: String,
    pub outages: Vec<Outage>,
    pub report: SolveReport,
    /// Post-outage network and state, when a solve was attempted.
    #[serde(skip)]
    pub solution: Option<Box<Solution>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub converged: usize,
    pub diverged: usize,
    pub infeasible: usize,
}

impl Tally {
    pub fn of<'a>(statuses: impl IntoIterator<Item = &'a SolveStatus>) -> Self {
        let mut t = Tally::default();
        for s in statuses {
            match s {
                SolveStatus::Converged => t.converged += 1,
                SolveStatus::Diverged => t.diverged += 1,
                SolveStatus::Infeasible => t.infeasible += 1,
            }
        }
        t
    }
}

fn solve_outage(net: &Network, c: &Contingency, init: &InitialCondition, opts: &SolverOptions) -> (SolveReport, Option<Solution>) {
    let post = match apply_outages(net, &c.outages) {
        Ok(n) => n,
        Err(e) => return (infeasible(e.to_string(), opts.method), None),
    };
    let errs = post.validate();
    if !errs.is_empty() {
        let islanding = errs.iter().any(|e| matches!(e, ValidationError::MissingSlack(_)));
        let text = errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
        let reason = if islanding { format!("islanding: {text}") } else { text };
        return (infeasible(reason, opts.method), None);
    }
    let mut o = opts.clone();
    o.init = init.clone();
    match solve(&post, &o) {
        Ok(sol) => (sol.report.clone(), Some(sol)),
        Err(e) => (infeasible(e.to_string(), opts.method), None),
    }
}

/// Solves every contingency starting from the pre-contingency state `base`.
/// Outages that leave an island without a slack (or otherwise break the
/// network) are reported as infeasible without solving.
pub fn run_contingencies(
    net: &Network,
    base: &StateVector,
    set: &[Contingency],
    opts: &SolverOptions,
) -> Result<Vec<ContingencyResult>, AnalysisError> {
    base.check_dims(net).map_err(|e| AnalysisError::Solve(e.to_string()))?;
    let init = InitialCondition::WarmStart(base.clone());
    Ok(set
        .par_iter()
        .map(|c| {
            let (report, sol) = solve_outage(net, c, &init, opts);
            ContingencyResult { label: c.label.clone(), outages: c.outages.clone(), report, solution: sol.map(Box::new) }
        })
        .collect())
}

/// Contingencies whose warm-started status is worse than the flat-start
/// status. Used as a regression log, not an error.
pub fn warm_start_regressions(net: &Network, warm: &[ContingencyResult], opts: &SolverOptions) -> Vec<String> {
    warm.par_iter()
        .filter_map(|r| {
            let c = Contingency { label: r.label.clone(), outages: r.outages.clone() };
            let (flat, _) = solve_outage(net, &c, &InitialCondition::Flat, opts);
            (r.report.status > flat.status)
                .then(|| format!("{}: warm start {:?}, flat start {:?}", r.label, r.report.status, flat.status))
        })
        .collect()
}

fn branch_flow(v_from: Complex64, v_to: Complex64, y: [Complex64; 4]) -> f64 {
    let i_from = y[0] * v_from + y[1] * v_to;
    let i_to = y[2] * v_from + y[3] * v_to;
    (v_from * i_from.conj()).norm().max((v_to * i_to.conj()).norm())
}

/// Apparent power carried by every in-service branch and transformer at
/// `state`, the larger of the two ends, summed over phases.
pub fn element_flows(net: &Network, state: &StateVector) -> (Vec<f64>, Vec<f64>) {
    let nph = net.phases();
    let lines = net
        .branches
        .iter()
        .map(|b| {
            let mut s = 0.0;
            let mut i_f = vec![Complex64::new(0.0, 0.0); nph];
            let mut i_t = i_f.clone();
            for p in 0..nph {
                for q in 0..nph {
                    let (vf, vt) = (state.voltage(b.from, q), state.voltage(b.to, q));
                    let ys = b.series.get(p, q);
                    let yc = b.charging.get(p, q) * 0.5;
                    i_f[p] += ys * (vf - vt) + yc * vf;
                    i_t[p] += ys * (vt - vf) + yc * vt;
                }
            }
            for p in 0..nph {
                let f = (state.voltage(b.from, p) * i_f[p].conj()).norm();
                let t = (state.voltage(b.to, p) * i_t[p].conj()).norm();
                s += f.max(t);
            }
            s
        })
        .collect();
    let xfmrs = net
        .transformers
        .iter()
        .map(|t| {
            (0..nph)
                .map(|p| {
                    let y = transformer_two_port(t.series[p], t.tap[p], t.shift[p]);
                    branch_flow(state.voltage(t.from, p), state.voltage(t.to, p), y)
                })
                .sum()
        })
        .collect();
    (lines, xfmrs)
}

fn top_fraction(n: usize, fraction: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * fraction).ceil() as usize).clamp(1, n)
    }
}

/// Single-outage set from a solved base case: the largest `fraction` of
/// online generators by real output, then the highest-capacity `fraction`
/// of lines and transformers, one at a time. Capacity is the rating when
/// known, otherwise the base-case flow. Generators on slack buses are left
/// out, since the slack keeps its voltage whether or not they run.
pub fn sample_contingencies(net: &Network, base: &StateVector, fraction: f64) -> ContingencySet {
    let mut gens: Vec<(f64, u32)> = net
        .generators
        .iter()
        .filter(|g| g.in_service && net.buses[g.bus].kind != BusKind::Slack)
        .map(|g| (g.p.iter().sum::<f64>().abs(), g.id))
        .collect();
    gens.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut set: ContingencySet =
        gens.iter().take(top_fraction(gens.len(), fraction)).map(|&(_, id)| Contingency::single(Outage::Generator(id))).collect();

    let (lf, tf) = element_flows(net, base);
    let mut elems: Vec<(f64, Outage)> = Vec::new();
    for (b, f) in net.branches.iter().zip(lf) {
        if b.in_service {
            elems.push((if b.rating > 0.0 { b.rating } else { f }, Outage::Branch(b.id)));
        }
    }
    for (t, f) in net.transformers.iter().zip(tf) {
        if t.in_service {
            elems.push((if t.rating > 0.0 { t.rating } else { f }, Outage::Transformer(t.id)));
        }
    }
    let key = |o: &Outage| match *o {
        Outage::Branch(id) => (0, id),
        Outage::Transformer(id) => (1, id),
        Outage::Generator(id) => (2, id),
    };
    elems.sort_by(|a, b| b.0.total_cmp(&a.0).then(key(&a.1).cmp(&key(&b.1))));
    let k = top_fraction(elems.len(), fraction);
    set.extend(elems.into_iter().take(k).map(|(_, o)| Contingency::single(o)));
    set
}

/// Every single generator, branch and transformer outage.
pub fn all_single_outages(net: &Network) -> ContingencySet {
    let g = net.generators.iter().filter(|g| g.in_service).map(|g| Outage::Generator(g.id));
    let b = net.branches.iter().filter(|b| b.in_service).map(|b| Outage::Branch(b.id));
    let t = net.transformers.iter().filter(|t| t.in_service).map(|t| Outage::Transformer(t.id));
    g.chain(b).chain(t).map(Contingency::single).collect()
}

pub const CONTINGENCY_HEADER: &str = "label,status,inner_iters,homotopy_steps,max_mismatch";

pub fn contingency_csv(results: &[ContingencyResult]) -> String {
    let mut s = format!("{CONTINGENCY_HEADER}\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{:?},{},{},{:e}",
            r.label, r.report.status, r.report.inner_iterations, r.report.homotopy_steps, r.report.max_mismatch
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub samples: usize,
    pub vmag: (f64, f64),
    /// Degrees.
    pub vang: (f64, f64),
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { samples: 15, vmag: (0.9, 1.1), vang: (-40.0, 40.0), seed: 0 }
    }
}

impl SweepSpec {
    /// `(vmag, vang_deg)` for each sample. Every bus gets the same pair.
    pub fn draw(&self) -> Result<Vec<(f64, f64)>, AnalysisError> {
        let ok = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !ok(self.vmag) || !ok(self.vang) || self.vmag.0 <= 0.0 {
            return Err(AnalysisError::EmptyRange);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.samples)
            .map(|_| (rng.gen_range(self.vmag.0..=self.vmag.1), rng.gen_range(self.vang.0..=self.vang.1)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub sample: usize,
    pub vmag0: f64,
    pub vang0_deg: f64,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub samples: Vec<SweepSample>,
    /// Largest voltage difference between each pair of converged samples;
    /// `None` where either sample did not converge.
    pub agreement: Vec<Vec<Option<f64>>>,
    pub states: Vec<Option<StateVector>>,
}

impl SweepResult {
    pub fn tally(&self) -> Tally {
        Tally::of(self.samples.iter().map(|s| &s.report.status))
    }

    /// Largest pairwise difference among converged samples.
    pub fn spread(&self) -> f64 {
        self.agreement.iter().flatten().flatten().fold(0.0, |m, &d| f64::max(m, d))
    }
}

/// Starting state with every bus at `mag∠ang_deg` plus the phase offsets.
pub fn uniform_start(net: &Network, mag: f64, ang_deg: f64) -> StateVector {
    let mut st = StateVector::flat(net);
    for b in 0..net.buses.len() {
        for p in 0..net.phases() {
            st.set_voltage(b, p, Complex64::from_polar(mag, ang_deg.to_radians() + net.domain.angle_offset(p)));
        }
    }
    st
}

pub fn run_sweep(net: &Network, spec: &SweepSpec, opts: &SolverOptions) -> Result<SweepResult, AnalysisError> {
    let errs = net.validate();
    if !errs.is_empty() {
        return Err(SolveError::Invalid(errs).into());
    }
    let draws = spec.draw()?;
    let runs: Vec<(SweepSample, Option<StateVector>)> = draws
        .par_iter()
        .enumerate()
        .map(|(i, &(m, a))| {
            let mut o = opts.clone();
            o.init = InitialCondition::WarmStart(uniform_start(net, m, a));
            let sol = solve(net, &o).expect("validated network");
            let state = (sol.report.status == SolveStatus::Converged).then_some(sol.state);
            (SweepSample { sample: i, vmag0: m, vang0_deg: a, report: sol.report }, state)
        })
        .collect();
    let (samples, states): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let n = states.len();
    let mut agreement = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if let (Some(a), Some(b)) = (&states[i], &states[j]) {
                agreement[i][j] = Some(a.max_voltage_diff(b));
            }
        }
    }
    Ok(SweepResult { samples, agreement, states })
}

pub const SWEEP_HEADER: &str = "sample,vmag0,vang0,status,iters";

pub fn sweep_csv(res: &SweepResult) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in &res.samples {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{}", r.sample, r.vmag0, r.vang0_deg, r.report.status, r.report.inner_iterations);
    }
    s
}
