//! Continuation from an easy sub-problem to the original network.
//!
//! Both methods share one driver parameterized by `λ` running from 1 (easy)
//! to 0 (original). Tx stepping shorts series elements, opens shunts,
//! neutralizes taps and shifts and shorts remote-control pairs; power
//! stepping scales generation and load by `β = 1 - λ`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::nr::{newton, NrOptions, NrOutcome};
use crate::stamps::{Problem, StampError, VirtualShort};
use crate::state::StateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HomotopyMethod {
    None,
    Tx,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Admittance scaling of Tx stepping.
    pub gamma: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub backtrack: f64,
    pub growth: f64,
    /// Consecutive first-try successes needed before the step grows.
    pub grow_after: usize,
    /// Residual tolerance of the intermediate sub-problems (`λ > 0`), which
    /// only serve as starting points. Never tighter than the final one.
    pub sub_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { gamma: 1e4, initial_step: 0.1, min_step: 1e-4, backtrack: 0.5, growth: 2.0, grow_after: 2, sub_tol: 1e-6 }
    }
}

/// Remote voltage control pair shorted during Tx stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualShortPath {
    pub controlling: usize,
    pub controlled: usize,
}

impl VirtualShortPath {
    /// Short admittance at `λ`; exactly zero at the original problem.
    pub fn admittance(&self, lambda: f64, gamma: f64) -> Complex64 {
        Complex64::new(1.0, -10.0) * (lambda * gamma)
    }
}

/// One path per distinct remote-control pair of in-service generators.
pub fn build_virtual_shorts(net: &Network) -> Vec<VirtualShortPath> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for g in net.generators.iter().filter(|g| g.in_service) {
        if let Some(w) = g.remote_bus() {
            if seen.insert((g.bus, w)) {
                out.push(VirtualShortPath { controlling: g.bus, controlled: w });
            }
        }
    }
    out
}

/// Tx-stepping network at `λ`: series admittances (three-phase self terms
/// only) times `1 + λγ`, charging and shunts times `1 - λ`, taps pulled
/// toward 1 and shifts toward 0.
pub fn tx_transform(net: &Network, lambda: f64, gamma: f64) -> Network {
    let mut out = net.clone();
    let grow = 1.0 + lambda * gamma;
    let open = 1.0 - lambda;
    for br in &mut out.branches {
        for p in 0..br.series.n {
            br.series.m[p][p] = br.series.m[p][p] * grow;
        }
        br.charging = br.charging.scale(open);
    }
    for tr in &mut out.transformers {
        for p in 0..tr.series.len() {
            tr.series[p] = tr.series[p] * grow;
            tr.tap[p] += lambda * (1.0 - tr.tap[p]);
            tr.shift[p] *= open;
        }
    }
    for sh in &mut out.shunts {
        for y in &mut sh.y {
            *y = *y * open;
        }
        if let Some(sw) = &mut sh.switched {
            for y in &mut sw.block {
                *y = *y * open;
            }
        }
    }
    out
}

/// Power-stepping network at load factor `β`: generator outputs and the
/// current and power parts of loads scaled, impedances untouched.
pub fn power_transform(net: &Network, beta: f64) -> Network {
    let mut out = net.clone();
    for g in &mut out.generators {
        g.p.iter_mut().chain(g.q.iter_mut()).for_each(|x| *x *= beta);
    }
    for l in &mut out.zip_loads {
        l.current.iter_mut().chain(l.power.iter_mut()).for_each(|x| *x = *x * beta);
    }
    for l in &mut out.big_loads {
        l.alpha.iter_mut().for_each(|x| *x = *x * beta);
    }
    out
}

/// Sub-problem of `method` at `λ`.
pub fn sub_problem(
    net: &Network,
    method: HomotopyMethod,
    lambda: f64,
    gamma: f64,
    pinned: &BTreeSet<(usize, usize)>,
) -> Result<Problem, StampError> {
    match method {
        HomotopyMethod::None => Problem::new(net.clone(), pinned, vec![]),
        HomotopyMethod::Tx => {
            let shorts = if lambda == 0.0 {
                vec![]
            } else {
                build_virtual_shorts(net)
                    .into_iter()
                    .map(|p| VirtualShort { controlling: p.controlling, controlled: p.controlled, y: p.admittance(lambda, gamma) })
                    .collect()
            };
            Problem::new(tx_transform(net, lambda, gamma), pinned, shorts)
        }
        HomotopyMethod::Power => Problem::new(power_transform(net, 1.0 - lambda), pinned, vec![]),
    }
}

/// Continuation progress: current `λ`, step and accepted history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyState {
    pub method: HomotopyMethod,
    pub lambda: f64,
    pub gamma: f64,
    pub step: f64,
    pub accepted: Vec<f64>,
}

/// One attempted sub-problem solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStep {
    pub lambda: f64,
    pub step: f64,
    pub nr_iterations: usize,
    pub residual: f64,
    pub accepted: bool,
    /// Largest voltage component change from the previous accepted solution.
    pub dv_from_prev: f64,
}

pub fn lambda_trace_csv(steps: &[LambdaStep]) -> String {
    let mut out = String::from("lambda,step,nr_iterations,residual,accepted,dv_from_prev\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{},{:e}",
            s.lambda, s.step, s.nr_iterations, s.residual, s.accepted as u8, s.dv_from_prev
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyOutcome {
    pub converged: bool,
    pub state: StateVector,
    pub homotopy: HomotopyState,
    pub steps: Vec<LambdaStep>,
    /// NR iterations summed over every attempted sub-problem.
    pub inner_iterations: usize,
    /// Outcome of the last NR run (the original problem when converged).
    pub last: NrOutcome,
    /// Smallest `λ` solved, `None` if even the first sub-problem failed.
    pub last_good_lambda: Option<f64>,
}

/// Solves the chain of sub-problems from `λ = 1` down to `λ = 0`, warm
/// starting each from the previous solution and halving the step on
/// failure. With [`HomotopyMethod::None`] this is a single NR run.
pub fn run_homotopy(
    net: &Network,
    pinned: &BTreeSet<(usize, usize)>,
    method: HomotopyMethod,
    opts: &NrOptions,
    schedule: &Schedule,
    init: &StateVector,
) -> HomotopyOutcome {
    let mut hs = HomotopyState {
        method,
        lambda: if method == HomotopyMethod::None { 0.0 } else { 1.0 },
        gamma: schedule.gamma,
        step: schedule.initial_step,
        accepted: Vec::new(),
    };
    let mut steps = Vec::new();
    let mut inner = 0;

    let attempt = |lambda: f64, start: &StateVector| -> (StateVector, NrOutcome) {
        let mut st = start.clone();
        let sub_opts;
        let o = if lambda > 0.0 {
            sub_opts = NrOptions { tol: opts.tol.max(schedule.sub_tol), ..opts.clone() };
            &sub_opts
        } else {
            opts
        };
        let out = match sub_problem(net, method, lambda, schedule.gamma, pinned) {
            Ok(pb) => newton(&pb, &mut st, o),
            Err(e) => NrOutcome {
                converged: false,
                iterations: 0,
                residual: crate::nr::Convergence {
                    converged: false,
                    max_current: f64::INFINITY,
                    max_control: f64::INFINITY,
                    max_source: f64::INFINITY,
                },
                trace: Default::default(),
                failure: Some(e.into()),
            },
        };
        (st, out)
    };

    let (mut state, mut last) = attempt(hs.lambda, init);
    inner += last.iterations;
    steps.push(LambdaStep {
        lambda: hs.lambda,
        step: 0.0,
        nr_iterations: last.iterations,
        residual: last.residual.max(),
        accepted: last.converged,
        dv_from_prev: 0.0,
    });
    if !last.converged {
        return HomotopyOutcome {
            converged: false,
            state,
            homotopy: hs,
            steps,
            inner_iterations: inner,
            last,
            last_good_lambda: None,
        };
    }
    hs.accepted.push(hs.lambda);

    let mut streak = 0;
    while hs.lambda > 0.0 {
        let target = (hs.lambda - hs.step).max(0.0);
        let (st, out) = attempt(target, &state);
        inner += out.iterations;
        let ok = out.converged;
        steps.push(LambdaStep {
            lambda: target,
            step: hs.step,
            nr_iterations: out.iterations,
            residual: out.residual.max(),
            accepted: ok,
            dv_from_prev: if ok { st.max_voltage_diff(&state) } else { 0.0 },
        });
        last = out;
        if ok {
            hs.lambda = target;
            hs.accepted.push(target);
            state = st;
            streak += 1;
            if streak >= schedule.grow_after {
                hs.step *= schedule.growth;
                streak = 0;
            }
        } else {
            streak = 0;
            hs.step *= schedule.backtrack;
            if hs.step < schedule.min_step {
                return HomotopyOutcome {
                    converged: false,
                    state,
                    last_good_lambda: Some(hs.lambda),
                    homotopy: hs,
                    steps,
                    inner_iterations: inner,
                    last,
                };
            }
        }
    }
    HomotopyOutcome {
        converged: true,
        state,
        last_good_lambda: Some(0.0),
        homotopy: hs,
        steps,
        inner_iterations: inner,
        last,
    }
}
