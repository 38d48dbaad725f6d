//! End-to-end solve: initialization, inner NR/homotopy loop, and the outer
//! loop adjusting generator reactive limits, switched shunts and taps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::homotopy::{run_homotopy, HomotopyMethod, Schedule};
use crate::network::{BusKind, Connection, Network, ValidationError};
use crate::nr::{Convergence, NrOptions};
use crate::stamps::transformer_two_port;
use crate::state::{DimensionMismatch, StateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialCondition {
    /// `1∠0` everywhere (balanced offsets on three-phase networks). With a
    /// homotopy method the slack magnitude and angle are used instead.
    Flat,
    /// Every bus and phase drawn independently from the given ranges.
    Random { vmag: (f64, f64), vang_deg: (f64, f64), seed: u64 },
    /// Voltages read from a solution file.
    File(PathBuf),
    WarmStart(StateVector),
}

impl InitialCondition {
    /// Random start over the default sweep ranges.
    pub fn random(seed: u64) -> Self {
        InitialCondition::Random { vmag: (0.9, 1.1), vang_deg: (-40.0, 40.0), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub nr: NrOptions,
    pub method: HomotopyMethod,
    pub schedule: Schedule,
    pub max_outer_passes: usize,
    pub q_limits: bool,
    pub adjust_shunts: bool,
    pub adjust_taps: bool,
    pub init: InitialCondition,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            nr: NrOptions::default(),
            method: HomotopyMethod::None,
            schedule: Schedule::default(),
            max_outer_passes: 10,
            q_limits: true,
            adjust_shunts: true,
            adjust_taps: true,
            init: InitialCondition::Flat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
pub enum SolveStatus {
    Converged,
    Diverged,
    Infeasible,
}

impl SolveStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            SolveStatus::Converged => 0,
            SolveStatus::Diverged => 1,
            SolveStatus::Infeasible => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    /// Regulating generator pinned at a reactive limit.
    PinnedAtLimit { q: f64 },
    /// Pinned generator returned to voltage control.
    Released,
    ShuntStep { steps: i32 },
    TapStep { tap: f64 },
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub pass: usize,
    pub device: String,
    pub phase: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutput {
    pub id: u32,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub method: HomotopyMethod,
    pub inner_iterations: usize,
    pub homotopy_steps: usize,
    pub outer_passes: usize,
    pub events: Vec<DeviceEvent>,
    pub residual: Convergence,
    /// Largest mismatch from [`validate_solution`] on the final state.
    pub max_mismatch: f64,
    pub generators: Vec<GeneratorOutput>,
    pub message: Option<String>,
    /// Kept out of serialized reports so repeated runs write identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("network failed validation: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error("initial condition: {0}")]
    Init(String),
}

/// Starting state for `net` from `source`.
pub fn initialize_state(net: &Network, source: &InitialCondition) -> Result<StateVector, SolveError> {
    match source {
        InitialCondition::Flat => Ok(StateVector::flat(net)),
        InitialCondition::Random { vmag, vang_deg, seed } => {
            if !(vmag.0 <= vmag.1 && vang_deg.0 <= vang_deg.1 && vmag.0 > 0.0) {
                return Err(SolveError::Init(format!("bad ranges {vmag:?} {vang_deg:?}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut st = StateVector::flat(net);
            for b in 0..net.buses.len() {
                let m = rng.gen_range(vmag.0..=vmag.1);
                let a = rng.gen_range(vang_deg.0..=vang_deg.1).to_radians();
                for p in 0..net.phases() {
                    st.set_voltage(b, p, Complex64::from_polar(m, a + net.domain.angle_offset(p)));
                }
            }
            Ok(st)
        }
        InitialCondition::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| SolveError::Init(format!("{}: {e}", path.display())))?;
            crate::case_io::read_solution(&text, net).map_err(|e| SolveError::Init(e.to_string()))
        }
        InitialCondition::WarmStart(s) => {
            s.check_dims(net)?;
            Ok(s.clone())
        }
    }
}

/// Every bus at its island's slack magnitude and angle.
pub fn slack_start(net: &Network) -> StateVector {
    let islands = net.islands();
    let mut by_island = BTreeMap::new();
    for b in net.slack_buses() {
        by_island.insert(islands[b], (net.buses[b].v_set.unwrap_or(1.0), net.buses[b].angle));
    }
    let mut st = StateVector::flat(net);
    for b in 0..net.buses.len() {
        let (m, a) = by_island.get(&islands[b]).copied().unwrap_or((1.0, 0.0));
        for p in 0..net.phases() {
            st.set_voltage(b, p, Complex64::from_polar(m, a + net.domain.angle_offset(p)));
        }
    }
    st
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MismatchKind {
    /// Complex power mismatch per bus (positive sequence).
    Power,
    /// Complex current mismatch per bus and phase (three-phase).
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub kind: MismatchKind,
    /// Magnitude per node (`phase * n_bus + bus`); zero at slack buses.
    pub per_node: Vec<f64>,
    pub max: f64,
    pub worst_node: Option<usize>,
}

/// Sparse complex nodal admittance matrix, one row per node.
pub fn admittance_matrix(net: &Network) -> Vec<BTreeMap<usize, Complex64>> {
    let nph = net.phases();
    let nb = net.buses.len();
    let idx = |b: usize, p: usize| p * nb + b;
    let mut y: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); nb * nph];
    let add = |y: &mut Vec<BTreeMap<usize, Complex64>>, i: usize, j: usize, v: Complex64| {
        *y[i].entry(j).or_insert(Complex64::new(0.0, 0.0)) += v;
    };
    for br in net.branches.iter().filter(|b| b.in_service) {
        for p in 0..nph {
            for q in 0..nph {
                let s = br.series.get(p, q);
                let h = br.charging.get(p, q) / 2.0;
                add(&mut y, idx(br.from, p), idx(br.from, q), s + h);
                add(&mut y, idx(br.to, p), idx(br.to, q), s + h);
                add(&mut y, idx(br.from, p), idx(br.to, q), -s);
                add(&mut y, idx(br.to, p), idx(br.from, q), -s);
            }
        }
    }
    for tr in net.transformers.iter().filter(|t| t.in_service) {
        for p in 0..nph {
            let [ff, ft, tf, tt] = transformer_two_port(tr.series[p], tr.tap[p], tr.shift[p]);
            add(&mut y, idx(tr.from, p), idx(tr.from, p), ff);
            add(&mut y, idx(tr.from, p), idx(tr.to, p), ft);
            add(&mut y, idx(tr.to, p), idx(tr.from, p), tf);
            add(&mut y, idx(tr.to, p), idx(tr.to, p), tt);
        }
    }
    for sh in &net.shunts {
        for p in 0..nph {
            add(&mut y, idx(sh.bus, p), idx(sh.bus, p), sh.admittance(p));
        }
    }
    y
}

/// Residuals of the classical network equations at `state`, computed from
/// the admittance matrix and the device power definitions only.
///
/// Positive-sequence networks report `|S_net + S_load - S_gen|` per bus;
/// three-phase networks the corresponding current mismatch per node.
/// Generator reactive outputs are taken from `state`.
pub fn validate_solution(net: &Network, state: &StateVector) -> MismatchReport {
    let nph = net.phases();
    let nb = net.buses.len();
    let v = &state.voltages;
    let slack: BTreeSet<usize> = net.slack_buses().into_iter().collect();
    let mismatch = node_mismatch(net, state);
    let mut per_node = vec![0.0; nb * nph];
    for p in 0..nph {
        for b in 0..nb {
            if slack.contains(&b) {
                continue;
            }
            let i = p * nb + b;
            per_node[i] = match nph {
                1 => (v[i] * mismatch[i].conj()).norm(),
                _ => mismatch[i].norm(),
            };
        }
    }
    let (worst_node, max) = per_node
        .iter()
        .enumerate()
        .fold((None, 0.0f64), |(w, m), (i, &x)| if x > m || x.is_nan() { (Some(i), x.max(m)) } else { (w, m) });
    let max = if per_node.iter().any(|x| x.is_nan()) { f64::INFINITY } else { max };
    MismatchReport {
        kind: if nph == 1 { MismatchKind::Power } else { MismatchKind::Current },
        per_node,
        max,
        worst_node,
    }
}

/// Sets the reactive output of every regulating generator to the value that
/// closes the reactive balance at its bus, shared equally between the
/// regulating generators on that bus. Used for solutions stored without
/// generator outputs.
pub fn infer_regulating_q(net: &Network, state: &mut StateVector) {
    let nb = net.buses.len();
    let mut by_bus: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for gi in 0..net.generators.len() {
        if regulates(net, gi).is_some() {
            by_bus.entry(net.generators[gi].bus).or_default().push(gi);
        }
    }
    for gens in by_bus.values() {
        for &gi in gens {
            for p in 0..net.phases() {
                state.set_q(gi, p, 0.0);
            }
        }
    }
    let mismatch = node_mismatch(net, state);
    for (&b, gens) in &by_bus {
        for p in 0..net.phases() {
            let i = p * nb + b;
            let q = (state.voltages[i] * mismatch[i].conj()).im;
            for &gi in gens {
                state.set_q(gi, p, q / gens.len() as f64);
            }
        }
    }
}

/// Net current leaving every node (network plus devices), phase-major.
fn node_mismatch(net: &Network, state: &StateVector) -> Vec<Complex64> {
    let nph = net.phases();
    let nb = net.buses.len();
    let n = nb * nph;
    let y = admittance_matrix(net);
    let v = &state.voltages;
    let mut inj = vec![Complex64::new(0.0, 0.0); n];
    for (i, row) in y.iter().enumerate() {
        for (&j, &yij) in row {
            inj[i] += yij * v[j];
        }
    }
    // Device currents leaving each node.
    let mut dev = vec![Complex64::new(0.0, 0.0); n];
    let pair = |b: usize, p: usize, conn: Connection| -> Option<(usize, usize)> {
        match conn {
            Connection::Delta if nph == 3 => Some((p * nb + b, ((p + 1) % 3) * nb + b)),
            _ => None,
        }
    };
    let add_load = |dev: &mut Vec<Complex64>, b: usize, p: usize, conn: Connection, s_of: &dyn Fn(Complex64) -> Complex64| {
        match pair(b, p, conn) {
            Some((i, j)) => {
                let vd = v[i] - v[j];
                let cur = (s_of(vd) / vd).conj();
                dev[i] += cur;
                dev[j] -= cur;
            }
            None => {
                let i = p * nb + b;
                dev[i] += (s_of(v[i]) / v[i]).conj();
            }
        }
    };
    for l in &net.zip_loads {
        for p in 0..nph {
            let (s, ipq) = (l.power[p], l.current[p]);
            let yl = match l.impedance[p] {
                Some(z) => Complex64::new(1.0, 0.0) / z,
                None => Complex64::new(0.0, 0.0),
            };
            add_load(&mut dev, l.bus, p, l.connection, &|vv: Complex64| s + ipq * vv.norm() + yl.conj() * vv.norm_sqr());
        }
    }
    for l in &net.big_loads {
        for p in 0..nph {
            let (a, yl) = (l.alpha[p], l.y[p]);
            add_load(&mut dev, l.bus, p, l.connection, &|vv: Complex64| vv * a.conj() + yl.conj() * vv.norm_sqr());
        }
    }
    let slack: BTreeSet<usize> = net.slack_buses().into_iter().collect();
    for (gi, g) in net.generators.iter().enumerate() {
        if !g.in_service || slack.contains(&g.bus) {
            continue;
        }
        for p in 0..nph {
            let i = p * nb + g.bus;
            let s = Complex64::new(g.p[p], state.q(gi, p));
            dev[i] -= (s / v[i]).conj();
        }
    }
    (0..n).map(|i| inj[i] + dev[i]).collect()
}

/// Whether a regulating generator would be stamped with a voltage
/// constraint (ignoring pins).
fn regulates(net: &Network, gi: usize) -> Option<usize> {
    let g = &net.generators[gi];
    let w = g.regulated_bus?;
    if !g.in_service || net.buses[g.bus].kind == BusKind::Slack || net.buses[w].kind == BusKind::Slack {
        return None;
    }
    net.buses[w].v_set.map(|_| w)
}

/// Checks the reactive-limit complementarity conditions at a solution:
/// every regulating generator within its limits, free ones holding their
/// set point within `tol`, pinned ones exactly at a limit.
pub fn q_limit_complementarity(
    net: &Network,
    pinned: &BTreeSet<(usize, usize)>,
    state: &StateVector,
    tol: f64,
) -> Result<(), String> {
    for gi in 0..net.generators.len() {
        let Some(w) = regulates(net, gi) else { continue };
        let g = &net.generators[gi];
        for p in 0..net.phases() {
            let q = state.q(gi, p);
            if q < g.q_min[p] || q > g.q_max[p] {
                return Err(format!("generator {} phase {p}: Q {q} outside [{}, {}]", g.id, g.q_min[p], g.q_max[p]));
            }
            if pinned.contains(&(gi, p)) {
                if q != g.q_min[p] && q != g.q_max[p] {
                    return Err(format!("generator {} phase {p}: pinned but Q {q} not at a limit", g.id));
                }
            } else {
                let vset = net.buses[w].v_set.unwrap();
                let m = state.voltage(w, p).norm();
                if (m - vset).abs() > tol {
                    return Err(format!("generator {} phase {p}: |V| {m} misses set point {vset}", g.id));
                }
            }
        }
    }
    Ok(())
}

/// Per-device switching history for the anti-oscillation rule.
#[derive(Debug, Default)]
struct SwitchLog {
    last: BTreeMap<(u8, usize, usize), i8>,
    reversals: BTreeMap<(u8, usize, usize), usize>,
}

impl SwitchLog {
    fn frozen(&self, key: (u8, usize, usize)) -> bool {
        self.reversals.get(&key).copied().unwrap_or(0) >= 2
    }

    /// Records a move in direction `dir`; returns whether the device is now frozen.
    fn record(&mut self, key: (u8, usize, usize), dir: i8) -> bool {
        if let Some(&prev) = self.last.get(&key) {
            if prev != dir {
                *self.reversals.entry(key).or_insert(0) += 1;
            }
        }
        self.last.insert(key, dir);
        self.frozen(key)
    }
}

const GEN: u8 = 0;
const SHUNT: u8 = 1;
const TAP: u8 = 2;

fn mean_magnitude(state: &StateVector, bus: usize) -> f64 {
    (0..state.phases).map(|p| state.voltage(bus, p).norm()).sum::<f64>() / state.phases as f64
}

/// One outer-loop pass of device adjustments on the working network.
fn adjust_devices(
    work: &mut Network,
    pinned: &mut BTreeSet<(usize, usize)>,
    state: &mut StateVector,
    log: &mut SwitchLog,
    opts: &SolverOptions,
    pass: usize,
    events: &mut Vec<DeviceEvent>,
) -> bool {
    let mut changed = false;
    let vtol = opts.nr.tol;
    if opts.q_limits {
        for gi in 0..work.generators.len() {
            let Some(w) = regulates(work, gi) else { continue };
            for p in 0..work.phases() {
                let key = (GEN, gi, p);
                if log.frozen(key) {
                    continue;
                }
                let g = &work.generators[gi];
                let (lo, hi) = (g.q_min[p], g.q_max[p]);
                let vset = work.buses[w].v_set.unwrap();
                let m = state.voltage(w, p).norm();
                let q = state.q(gi, p);
                let label = format!("generator {}", g.id);
                let mut push = |kind| events.push(DeviceEvent { pass, device: label.clone(), phase: p, kind });
                if pinned.contains(&(gi, p)) {
                    let release = (q == hi && m > vset + vtol) || (q == lo && m < vset - vtol);
                    if release {
                        pinned.remove(&(gi, p));
                        push(EventKind::Released);
                        if log.record(key, -1) {
                            push(EventKind::Frozen);
                        }
                        changed = true;
                    }
                } else if q > hi || q < lo {
                    let limit = if q > hi { hi } else { lo };
                    pinned.insert((gi, p));
                    work.generators[gi].q[p] = limit;
                    state.set_q(gi, p, limit);
                    push(EventKind::PinnedAtLimit { q: limit });
                    if log.record(key, 1) {
                        push(EventKind::Frozen);
                    }
                    changed = true;
                }
            }
        }
        for b in 0..work.buses.len() {
            if work.buses[b].kind == BusKind::Slack {
                continue;
            }
            let free = (0..work.generators.len())
                .any(|gi| regulates(work, gi) == Some(b) && (0..work.phases()).any(|p| !pinned.contains(&(gi, p))));
            work.buses[b].kind = if free { BusKind::PV } else { BusKind::PQ };
        }
    }
    if opts.adjust_shunts {
        for si in 0..work.shunts.len() {
            let key = (SHUNT, si, 0);
            let bus = work.shunts[si].bus;
            let m = mean_magnitude(state, bus);
            let id = work.shunts[si].id;
            let Some(sw) = work.shunts[si].switched.as_mut() else { continue };
            if log.frozen(key) {
                continue;
            }
            let raise = if sw.block[0].im >= 0.0 { 1 } else { -1 };
            let dir = if m < sw.v_target - sw.deadband {
                raise
            } else if m > sw.v_target + sw.deadband {
                -raise
            } else {
                0
            };
            let next = (sw.steps + dir).clamp(sw.min_steps, sw.max_steps);
            if next != sw.steps {
                sw.steps = next;
                events.push(DeviceEvent { pass, device: format!("shunt {id}"), phase: 0, kind: EventKind::ShuntStep { steps: next } });
                if log.record(key, dir as i8) {
                    events.push(DeviceEvent { pass, device: format!("shunt {id}"), phase: 0, kind: EventKind::Frozen });
                }
                changed = true;
            }
        }
    }
    if opts.adjust_taps {
        for ti in 0..work.transformers.len() {
            let key = (TAP, ti, 0);
            let tr = &work.transformers[ti];
            let Some(ctl) = tr.control.clone() else { continue };
            if !tr.in_service || tr.tap_step <= 0.0 || log.frozen(key) {
                continue;
            }
            let m = mean_magnitude(state, ctl.bus);
            // Raising the from-side ratio lowers the to-side voltage.
            let raise = if ctl.bus == tr.from { 1.0 } else { -1.0 };
            let dir = if m < ctl.v_target - ctl.deadband {
                raise
            } else if m > ctl.v_target + ctl.deadband {
                -raise
            } else {
                0.0
            };
            if dir == 0.0 {
                continue;
            }
            let tr = &mut work.transformers[ti];
            let mut moved = false;
            for t in &mut tr.tap {
                let next = (*t + dir * tr.tap_step).clamp(tr.tap_min, tr.tap_max);
                if next != *t {
                    *t = next;
                    moved = true;
                }
            }
            if moved {
                let label = format!("transformer {}", tr.id);
                events.push(DeviceEvent { pass, device: label.clone(), phase: 0, kind: EventKind::TapStep { tap: tr.tap[0] } });
                if log.record(key, dir as i8) {
                    events.push(DeviceEvent { pass, device: label, phase: 0, kind: EventKind::Frozen });
                }
                changed = true;
            }
        }
    }
    changed
}

/// Fills in outputs the NR unknowns do not carry: fixed generator Q and the
/// slack generators' share of the source injection.
fn finish_outputs(work: &Network, state: &mut StateVector) -> Vec<GeneratorOutput> {
    let nph = work.phases();
    let slack = work.slack_buses();
    let mut outputs: Vec<GeneratorOutput> =
        work.generators.iter().map(|g| GeneratorOutput { id: g.id, p: g.p.clone(), q: vec![0.0; nph] }).collect();
    for (gi, g) in work.generators.iter().enumerate() {
        for p in 0..nph {
            if !g.in_service {
                outputs[gi].p[p] = 0.0;
                state.set_q(gi, p, 0.0);
            } else if regulates(work, gi).is_none() && !slack.contains(&g.bus) {
                state.set_q(gi, p, g.q[p]);
            }
            outputs[gi].q[p] = state.q(gi, p);
        }
    }
    for (k, &b) in slack.iter().enumerate() {
        let at_bus: Vec<usize> =
            (0..work.generators.len()).filter(|&gi| work.generators[gi].in_service && work.generators[gi].bus == b).collect();
        for p in 0..nph {
            let s = state.voltage(b, p) * state.slack_currents[k * nph + p].conj();
            for &gi in &at_bus {
                let share = s / at_bus.len() as f64;
                outputs[gi].p[p] = share.re;
                outputs[gi].q[p] = share.im;
                state.set_q(gi, p, share.im);
            }
        }
    }
    outputs
}

/// Result of [`solve`] including the working network with the final
/// device settings and the generators pinned at limits.
#[derive(Debug, Clone)]
pub struct Solution {
    pub report: SolveReport,
    pub state: StateVector,
    pub network: Network,
    pub pinned: BTreeSet<(usize, usize)>,
    /// Iterations of the final NR run of every outer pass, in order.
    pub trace: crate::nr::NrTrace,
    /// Continuation steps of every homotopy run, in order.
    pub lambda_steps: Vec<crate::homotopy::LambdaStep>,
}

/// Full solve of `net`.
pub fn solve(net: &Network, opts: &SolverOptions) -> Result<Solution, SolveError> {
    let errs = net.validate();
    if !errs.is_empty() {
        return Err(SolveError::Invalid(errs));
    }
    opts.nr.check().map_err(|e| SolveError::Init(e.to_string()))?;
    let clock = Instant::now();
    let mut state = match (&opts.init, opts.method) {
        (InitialCondition::Flat, HomotopyMethod::Tx | HomotopyMethod::Power) => slack_start(net),
        (src, _) => initialize_state(net, src)?,
    };
    let mut work = net.clone();
    let mut pinned = BTreeSet::new();
    let mut log = SwitchLog::default();
    let mut events = Vec::new();
    let (mut inner, mut hsteps) = (0, 0);
    let mut pass = 0;
    let mut message = None;
    let mut trace = crate::nr::NrTrace::default();
    let mut lambda_steps = Vec::new();

    let status = loop {
        pass += 1;
        let mut out = if pass == 1 {
            run_homotopy(&work, &pinned, opts.method, &opts.nr, &opts.schedule, &state)
        } else {
            run_homotopy(&work, &pinned, HomotopyMethod::None, &opts.nr, &opts.schedule, &state)
        };
        inner += out.inner_iterations;
        hsteps += out.steps.len().saturating_sub(1);
        if opts.method != HomotopyMethod::None {
            lambda_steps.extend(out.steps.iter().cloned());
        }
        if !out.converged && pass > 1 && opts.method != HomotopyMethod::None {
            out = run_homotopy(&work, &pinned, opts.method, &opts.nr, &opts.schedule, &state);
            inner += out.inner_iterations;
            hsteps += out.steps.len().saturating_sub(1);
            lambda_steps.extend(out.steps.iter().cloned());
        }
        trace.rows.extend(out.last.trace.rows.iter().cloned());
        state = out.state;
        if !out.converged {
            message = Some(match (out.last.failure, out.last_good_lambda) {
                (Some(f), Some(l)) if opts.method != HomotopyMethod::None => format!("{f} (last solved lambda {l})"),
                (Some(f), _) => f.to_string(),
                (None, _) => "no convergence".to_string(),
            });
            break SolveStatus::Diverged;
        }
        if !adjust_devices(&mut work, &mut pinned, &mut state, &mut log, opts, pass, &mut events) {
            break SolveStatus::Converged;
        }
        if pass >= opts.max_outer_passes {
            message = Some(format!("device adjustments still changing after {pass} passes"));
            break SolveStatus::Infeasible;
        }
    };

    let final_pb = crate::stamps::Problem::new(work.clone(), &pinned, vec![]);
    let residual = final_pb
        .ok()
        .and_then(|pb| crate::nr::check_convergence(&pb, &state, opts.nr.tol).ok())
        .unwrap_or(Convergence { converged: false, max_current: f64::INFINITY, max_control: f64::INFINITY, max_source: f64::INFINITY });
    let generators = finish_outputs(&work, &mut state);
    let mismatch = validate_solution(&work, &state);
    let report = SolveReport {
        status,
        method: opts.method,
        inner_iterations: inner,
        homotopy_steps: hsteps,
        outer_passes: pass,
        events,
        residual,
        max_mismatch: mismatch.max,
        generators,
        message,
        wall_time_s: clock.elapsed().as_secs_f64(),
    };
    Ok(Solution { report, state, network: work, pinned, trace, lambda_steps })
}
