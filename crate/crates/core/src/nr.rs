//! Inner Newton-Raphson loop with variable limiting on generator stamps,
//! componentwise voltage limiting and reactive-power limiting.

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linear::{LuSolver, SingularityReport};
use crate::stamps::{devices, Problem, StampError};
use crate::state::StateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrOptions {
    /// Max-norm tolerance on the nonlinear residual (pu).
    pub tol: f64,
    pub max_iter: usize,
    /// Largest change of `V_R` or `V_I` accepted in one step (pu).
    pub dv_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub zeta_init: f64,
    pub zeta_min: f64,
    pub zeta_shrink: f64,
    pub zeta_growth: f64,
    /// A raw voltage step above this shrinks `zeta`.
    pub large_step: f64,
    /// Largest change of a regulating generator's current in one step (pu).
    pub q_current_cap: f64,
}

impl Default for NrOptions {
    fn default() -> Self {
        NrOptions {
            tol: 1e-6,
            max_iter: 100,
            dv_max: 0.1,
            v_min: -2.0,
            v_max: 2.0,
            zeta_init: 1.0,
            zeta_min: 0.05,
            zeta_shrink: 0.5,
            zeta_growth: 2.0,
            large_step: 0.5,
            q_current_cap: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid solver options: {0}")]
pub struct OptionsError(pub String);

impl NrOptions {
    pub fn check(&self) -> Result<(), OptionsError> {
        let bad = |m: &str| Err(OptionsError(m.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.dv_max > 0.0) {
            return bad("dv_max must be positive");
        }
        if !(self.v_min < self.v_max) {
            return bad("v_min must be below v_max");
        }
        if !(0.0 < self.zeta_min && self.zeta_min <= self.zeta_init && self.zeta_init <= 1.0) {
            return bad("need 0 < zeta_min <= zeta_init <= 1");
        }
        if !(self.zeta_shrink > 0.0 && self.zeta_shrink < 1.0) || !(self.zeta_growth > 1.0) {
            return bad("zeta factors must shrink below 1 and grow above 1");
        }
        if !(self.q_current_cap >= 0.0) {
            return bad("q_current_cap must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Residual at the iterate the step started from.
    pub residual: f64,
    /// Largest raw voltage component change before limiting.
    pub max_dv: f64,
    pub zeta: f64,
    /// Variables whose step was limited.
    pub limited: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NrTrace {
    pub rows: Vec<TraceRow>,
}

impl NrTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual,max_dv,zeta,limited\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:e},{:e},{},{}", r.iteration, r.residual, r.max_dv, r.zeta, r.limited);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum NrFailure {
    #[error(transparent)]
    Singular(#[from] SingularityReport),
    #[error("{0}")]
    Stamp(String),
    #[error("no convergence within {0} iterations")]
    MaxIterations(usize),
    #[error("iterate became non-finite")]
    NonFinite,
}

impl From<StampError> for NrFailure {
    fn from(e: StampError) -> Self {
        NrFailure::Stamp(e.to_string())
    }
}

/// Residual split by equation class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    /// Largest KCL current mismatch.
    pub max_current: f64,
    /// Largest voltage-magnitude constraint residual.
    pub max_control: f64,
    /// Largest slack source equation residual.
    pub max_source: f64,
}

impl Convergence {
    pub fn max(&self) -> f64 {
        self.max_current.max(self.max_control).max(self.max_source)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NrOutcome {
    pub converged: bool,
    /// Linear solves performed.
    pub iterations: usize,
    pub residual: Convergence,
    pub trace: NrTrace,
    pub failure: Option<NrFailure>,
}

/// New value of one voltage component after capping the step at `dv_max`
/// and clamping to `[v_min, v_max]`.
pub fn apply_voltage_limiting(v_k: f64, dv: f64, opts: &NrOptions) -> f64 {
    let step = dv.signum() * dv.abs().min(opts.dv_max);
    let step = if dv == 0.0 { 0.0 } else { step };
    (v_k + step).clamp(opts.v_min, opts.v_max)
}

/// Damping for the next iteration given the trace so far.
pub fn update_zeta(trace: &[TraceRow], zeta: f64, opts: &NrOptions) -> f64 {
    let Some(last) = trace.last() else { return zeta };
    if last.max_dv > opts.large_step {
        return (zeta * opts.zeta_shrink).max(opts.zeta_min);
    }
    if trace.len() >= 3 {
        let t = &trace[trace.len() - 3..];
        if t[0].max_dv > t[1].max_dv && t[1].max_dv > t[2].max_dv {
            return (zeta * opts.zeta_growth).min(1.0);
        }
    }
    zeta
}

/// Reactive output after limiting a generator's current step.
///
/// `i_k` is the generator current at `v_k` and `di` the raw step the
/// linearized solve implied. Steps within `cap` return `q_plain`, the
/// unlimited update; larger ones are scaled back to magnitude `cap` and the
/// reactive power recovered from the limited current at `v_k`. Returns the
/// new value and whether it was limited.
pub fn apply_q_limiting(i_k: Complex64, di: Complex64, v_k: Complex64, q_plain: f64, cap: f64) -> (f64, bool) {
    let m = di.norm();
    if m <= cap || v_k.norm_sqr() < devices::MIN_VOLTAGE_SQ {
        return (q_plain, false);
    }
    let limited = if cap == 0.0 { Complex64::new(0.0, 0.0) } else { di * (cap / m) };
    (devices::generator_q(i_k + limited, v_k), true)
}

/// Residual of `state` on `pb` split by equation class.
pub fn check_convergence(pb: &Problem, state: &StateVector, tol: f64) -> Result<Convergence, StampError> {
    let r = pb.residual(state)?;
    Ok(classify(pb, &r, tol))
}

fn classify(pb: &Problem, r: &[f64], tol: f64) -> Convergence {
    let nv = pb.map.voltage_vars();
    let ng = pb.map.groups.len();
    let ns = pb.dim() - nv - ng;
    let norm = |s: &[f64]| s.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) });
    let max_current = norm(&r[..nv]);
    let max_source = norm(&r[nv..nv + ns]);
    let max_control = norm(&r[nv + ns..]);
    Convergence {
        converged: max_current < tol && max_control < tol && max_source < tol,
        max_current,
        max_control,
        max_source,
    }
}

/// One assemble-solve-limit cycle. Updates `state` in place and returns the
/// trace row (with the residual left for the caller to fill).
pub fn nr_iterate(
    pb: &Problem,
    state: &mut StateVector,
    zeta: f64,
    opts: &NrOptions,
    lu: &mut LuSolver,
) -> Result<TraceRow, NrFailure> {
    let map = &pb.map;
    let sys = pb.system(state, zeta)?;
    let mut x = lu.factor_solve(&sys)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NrFailure::NonFinite);
    }
    let x_k = map.pack(state);
    let mut limited = 0;

    if opts.q_current_cap.is_finite() {
        for (k, grp) in map.groups.iter().enumerate() {
            let col = map.group_var(k);
            let d_total = x[col] - x_k[col];
            let mut total = 0.0;
            for m in &grp.members {
                let g = &pb.net.generators[m.gen];
                let v = state.voltage(g.bus, grp.phase);
                let q = state.q(m.gen, grp.phase);
                let dq = m.share * d_total;
                let Some((lin, d_q)) = devices::generator(g.p[grp.phase], q, v) else {
                    total += q + dq;
                    continue;
                };
                let (r, i) = (map.vr(g.bus, grp.phase), map.vi(g.bus, grp.phase));
                let (dvr, dvi) = (x[r] - x_k[r], x[i] - x_k[i]);
                let di = zeta * (lin.d_vr * dvr + lin.d_vi * dvi) + d_q * dq;
                let (q_new, hit) = apply_q_limiting(lin.i, di, v, q + dq, opts.q_current_cap);
                limited += hit as usize;
                total += q_new;
            }
            x[col] = (total - grp.members.iter().map(|m| m.offset).sum::<f64>())
                / grp.members.iter().map(|m| m.share).sum::<f64>();
        }
    }

    let mut max_dv = 0.0f64;
    for i in 0..map.voltage_vars() {
        let dv = x[i] - x_k[i];
        max_dv = max_dv.max(dv.abs());
        let v = apply_voltage_limiting(x_k[i], dv, opts);
        if v != x[i] {
            limited += 1;
        }
        x[i] = v;
    }
    map.unpack(&x, state);
    Ok(TraceRow { iteration: 0, residual: 0.0, max_dv, zeta, limited })
}

/// Runs Newton-Raphson on `pb` from `state` until the residual drops below
/// `opts.tol` or the iteration budget is spent. `state` holds the last
/// iterate either way.
pub fn newton(pb: &Problem, state: &mut StateVector, opts: &NrOptions) -> NrOutcome {
    let mut lu = LuSolver::new();
    let mut trace = NrTrace::default();
    let mut zeta = opts.zeta_init;
    pb.map.normalize(state);
    let mut iterations = 0;
    let fail = |trace, iterations, residual, failure| NrOutcome {
        converged: false,
        iterations,
        residual,
        trace,
        failure: Some(failure),
    };
    let unknown = Convergence { converged: false, max_current: f64::INFINITY, max_control: f64::INFINITY, max_source: f64::INFINITY };
    loop {
        let conv = match pb.residual(state) {
            Ok(r) => classify(pb, &r, opts.tol),
            Err(e) => return fail(trace, iterations, unknown, e.into()),
        };
        if conv.converged {
            return NrOutcome { converged: true, iterations, residual: conv, trace, failure: None };
        }
        if !conv.max().is_finite() {
            return fail(trace, iterations, conv, NrFailure::NonFinite);
        }
        if iterations >= opts.max_iter {
            return fail(trace, iterations, conv, NrFailure::MaxIterations(opts.max_iter));
        }
        let mut row = match nr_iterate(pb, state, zeta, opts, &mut lu) {
            Ok(row) => row,
            Err(e) => return fail(trace, iterations, conv, e),
        };
        iterations += 1;
        row.iteration = iterations;
        row.residual = conv.max();
        trace.rows.push(row);
        zeta = update_zeta(&trace.rows, zeta, opts);
    }
}
