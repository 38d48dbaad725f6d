//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances and limits are pinned below.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use ecpf::analyses::{all_single_outages, run_contingencies, run_sweep, SweepSpec, Tally};
use ecpf::homotopy::{power_transform, tx_transform, HomotopyMethod, Schedule};
use ecpf::network::{Bus, BusKind, Branch, Connection, Generator, Network, PhaseDomain, PhaseMatrix, ZipLoad};
use ecpf::solver::{q_limit_complementarity, solve, validate_solution, SolveStatus, SolverOptions};
use ecpf::stamps::Problem;
use ecpf::state::StateVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_VM_TOL: f64 = 1e-8;
const ORACLE_VA_TOL_DEG: f64 = 1e-6;
const GRADIENT_REL_TOL: f64 = 1e-6;
const GRADIENT_ITERATES: usize = 100;
const SWEEP_SAMPLES: usize = 15;
const SWEEP_SEED: u64 = 7;
const SWEEP_SPREAD: f64 = 1e-6;
const FEEDER_MAX_ITERS: usize = 7;
const FEEDER_MISMATCH: f64 = 1e-6;
const RESCUE_MAX_ITER: usize = 100;
const Q_ORACLE_TOL: f64 = 1e-8;
const TIGHT_TOL: f64 = 1e-10;

fn tight() -> SolverOptions {
    let mut o = SolverOptions::default();
    o.nr.tol = TIGHT_TOL;
    o
}

fn with_method(mut o: SolverOptions, m: HomotopyMethod) -> SolverOptions {
    o.method = m;
    o
}

fn sampled_starts(samples: usize) -> SweepSpec {
    SweepSpec { samples, vmag: (0.9, 1.1), vang: (-40.0, 40.0), seed: SWEEP_SEED }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    if e <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {} s", e.as_secs_f64(), limit.as_secs()))
    }
}

fn oracle_equivalence() -> Result<String, String> {
    let t = Instant::now();
    let corpus = corpus();
    let (mut worst_m, mut worst_a) = (0.0f64, 0.0f64);
    for (name, net) in &corpus {
        let sol = solve(net, &tight()).map_err(|e| format!("{name}: {e}"))?;
        if sol.report.status != SolveStatus::Converged {
            return Err(format!("{name}: {:?}", sol.report.status));
        }
        let fixed: BTreeMap<usize, f64> = sol.pinned.iter().map(|&(g, p)| (g, sol.state.q(g, p))).collect();
        let o = oracle_solve(&sol.network, &fixed, 1e-12).ok_or(format!("{name}: oracle did not converge"))?;
        let (dm, da) = compare(net, &sol.state, &o);
        worst_m = worst_m.max(dm);
        worst_a = worst_a.max(da);
        if dm >= ORACLE_VM_TOL || da >= ORACLE_VA_TOL_DEG {
            return Err(format!("{name}: |V| diff {dm:.2e}, angle diff {da:.2e} deg"));
        }
    }
    within(t, Duration::from_secs(10))?;
    Ok(format!("{} cases, max |V| diff {worst_m:.1e} pu, max angle diff {worst_a:.1e} deg", corpus.len()))
}

fn random_state(net: &Network, rng: &mut ChaCha8Rng) -> StateVector {
    let mut st = StateVector::flat(net);
    for b in 0..net.buses.len() {
        for p in 0..net.phases() {
            let v = num_complex::Complex64::from_polar(rng.gen_range(0.7..1.3), rng.gen_range(-3.1..3.1));
            st.set_voltage(b, p, v);
        }
    }
    for q in st.gen_q.iter_mut() {
        *q = rng.gen_range(-1.0..1.0);
    }
    for cur in st.slack_currents.iter_mut() {
        *cur = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    st
}

/// Largest column-wise relative error between the stamped matrix and a
/// central difference of the nonlinear residual.
fn jacobian_error(pb: &Problem, st: &StateVector) -> f64 {
    let a = pb.system(st, 1.0).unwrap().to_dense();
    let x = pb.map.pack(st);
    let mut worst = 0.0f64;
    let eval = |x: &[f64]| {
        let mut s = st.clone();
        pb.map.unpack(x, &mut s);
        pb.residual(&s).unwrap()
    };
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (eval(&xp), eval(&xm));
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..x.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            diff = diff.max((fd - a[i][j]).abs());
            scale = scale.max(a[i][j].abs());
        }
        worst = worst.max(diff / scale.max(1e-8));
    }
    worst
}

fn device_network(domain: PhaseDomain) -> Network {
    let n = domain.phases();
    let mut net = Network::new("device", domain, 1.0);
    net.buses.push(Bus { v_set: Some(1.0), ..Bus::new(1, BusKind::Slack) });
    net.buses.push(Bus::new(2, BusKind::PQ));
    let mut y = PhaseMatrix::diagonal(&vec![c(2.0, -20.0); n]);
    if n == 3 {
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    y.m[i][j] = c(-0.4, 5.0);
                }
            }
        }
    }
    net.branches.push(Branch { id: 1, from: 0, to: 1, series: y, charging: PhaseMatrix::zeros(n), rating: 0.0, in_service: true });
    net
}

fn gradient_suite() -> Result<String, String> {
    let t = Instant::now();
    let zero = c(0.0, 0.0);
    let pos = PhaseDomain::PositiveSequence;
    let three = PhaseDomain::ThreePhase;
    let load = |conn: Connection, n: usize, s: num_complex::Complex64, i: num_complex::Complex64| ZipLoad {
        id: 1,
        bus: 1,
        connection: conn,
        impedance: vec![None; n],
        current: vec![i; n],
        power: vec![s; n],
    };
    let gen = |n: usize, reg: Option<usize>| Generator {
        id: 1,
        bus: 1,
        p: vec![0.4; n],
        q: vec![0.1; n],
        q_min: vec![f64::NEG_INFINITY; n],
        q_max: vec![f64::INFINITY; n],
        regulated_bus: reg,
        in_service: true,
    };
    let mut cases: Vec<(&str, Network)> = Vec::new();
    let mut pv = device_network(pos);
    pv.buses[1].v_set = Some(1.02);
    pv.generators.push(gen(1, Some(1)));
    pv.refresh_kinds();
    cases.push(("PV generator", pv));
    let mut pv3 = device_network(three);
    pv3.buses[1].v_set = Some(1.02);
    pv3.generators.push(gen(3, Some(1)));
    pv3.refresh_kinds();
    cases.push(("PV generator, three-phase", pv3));
    let mut fixed = device_network(pos);
    fixed.generators.push(gen(1, None));
    cases.push(("fixed P/Q generator", fixed));
    for (name, domain, conn, s, i) in [
        ("constant-power load", pos, Connection::Wye, c(0.5, 0.2), zero),
        ("constant-current load", pos, Connection::Wye, zero, c(0.3, 0.1)),
        ("constant-power wye load, three-phase", three, Connection::Wye, c(0.5, 0.2), zero),
        ("constant-power delta load", three, Connection::Delta, c(0.5, 0.2), zero),
        ("constant-current delta load", three, Connection::Delta, zero, c(0.3, 0.1)),
    ] {
        let mut net = device_network(domain);
        net.zip_loads.push(load(conn, domain.phases(), s, i));
        cases.push((name, net));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut report = Vec::new();
    for (name, net) in &cases {
        assert!(net.validate().is_empty(), "{name}: {:?}", net.validate());
        let pb = Problem::new(net.clone(), &Default::default(), vec![]).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..GRADIENT_ITERATES {
            worst = worst.max(jacobian_error(&pb, &random_state(net, &mut rng)));
        }
        if worst >= GRADIENT_REL_TOL {
            return Err(format!("{name}: relative error {worst:.2e}"));
        }
        report.push(format!("{name} {worst:.0e}"));
    }
    within(t, Duration::from_secs(5))?;
    Ok(format!("{} device types x {GRADIENT_ITERATES} iterates; worst: {}", cases.len(), report.join(", ")))
}

fn homotopy_endpoints() -> Result<String, String> {
    let mut nets: Vec<(String, Network)> = corpus();
    for f in ["case58_stressed.net", "feeder8_unbalanced.json"] {
        nets.push((f.to_string(), fixture(f)));
    }
    let gamma = Schedule::default().gamma;
    for (name, net) in &nets {
        let orig = format!("{net:?}");
        if format!("{:?}", tx_transform(net, 0.0, gamma)) != orig {
            return Err(format!("{name}: Tx transform at lambda 0 changed the network"));
        }
        if format!("{:?}", power_transform(net, 1.0)) != orig {
            return Err(format!("{name}: power transform at beta 1 changed the network"));
        }
    }
    Ok(format!("{} networks, both transforms bit-exact", nets.len()))
}

fn initial_condition_sweep() -> Result<String, String> {
    let t = Instant::now();
    let tx = with_method(SolverOptions::default(), HomotopyMethod::Tx);
    let c14 = run_sweep(&fixture("case14.net"), &sampled_starts(SWEEP_SAMPLES), &tx).map_err(|e| e.to_string())?;
    let tally14 = c14.tally();
    if tally14.converged != SWEEP_SAMPLES || c14.spread() >= SWEEP_SPREAD {
        return Err(format!("case14 Tx: {tally14:?}, spread {:.2e}", c14.spread()));
    }
    let hard = fixture("case58_stressed.net");
    let plain = run_sweep(&hard, &sampled_starts(SWEEP_SAMPLES), &SolverOptions::default()).map_err(|e| e.to_string())?;
    let stepped = run_sweep(&hard, &sampled_starts(SWEEP_SAMPLES), &tx).map_err(|e| e.to_string())?;
    let (np, nt) = (plain.tally().converged, stepped.tally().converged);
    if np >= nt {
        return Err(format!("hard fixture: plain NR {np}/{SWEEP_SAMPLES}, Tx {nt}/{SWEEP_SAMPLES}"));
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!(
        "case14 Tx {}/{SWEEP_SAMPLES} converge, spread {:.1e} pu; hard fixture plain NR {np}/{SWEEP_SAMPLES} vs Tx {nt}/{SWEEP_SAMPLES}",
        tally14.converged,
        c14.spread()
    ))
}

fn three_phase_iterations() -> Result<String, String> {
    let net = fixture("feeder8_unbalanced.json");
    let wye = net.zip_loads.iter().any(|l| l.connection == Connection::Wye);
    let delta = net.zip_loads.iter().any(|l| l.connection == Connection::Delta);
    if !(wye && delta && net.transformers.len() == 1) {
        return Err("fixture must hold wye and delta loads and one transformer".into());
    }
    let sol = solve(&net, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let r = &sol.report;
    let mismatch = validate_solution(&sol.network, &sol.state).max;
    if r.status != SolveStatus::Converged || r.inner_iterations > FEEDER_MAX_ITERS || r.residual.max_current >= FEEDER_MISMATCH || mismatch >= FEEDER_MISMATCH {
        return Err(format!("{:?} in {} iterations, residual {:.2e}, mismatch {:.2e}", r.status, r.inner_iterations, r.residual.max_current, mismatch));
    }
    Ok(format!("{} iterations, max current mismatch {:.1e} pu", r.inner_iterations, mismatch))
}

fn power_stepping_rescue() -> Result<String, String> {
    let t = Instant::now();
    let net = fixture("case58_stressed.net");
    let mut plain = SolverOptions::default();
    plain.nr.max_iter = RESCUE_MAX_ITER;
    let a = solve(&net, &plain).map_err(|e| e.to_string())?;
    if a.report.status == SolveStatus::Converged {
        return Err("plain NR converged".into());
    }
    let b = solve(&net, &with_method(plain.clone(), HomotopyMethod::Power)).map_err(|e| e.to_string())?;
    let mismatch = validate_solution(&b.network, &b.state).max;
    if b.report.status != SolveStatus::Converged || mismatch > 10.0 * plain.nr.tol {
        return Err(format!("power stepping {:?}, mismatch {mismatch:.2e}", b.report.status));
    }
    within(t, Duration::from_secs(30))?;
    Ok(format!(
        "plain NR {:?} after {} iterations; power stepping converged in {} continuation steps, {} NR iterations",
        a.report.status, a.report.inner_iterations, b.report.homotopy_steps, b.report.inner_iterations
    ))
}

fn high_voltage_selection() -> Result<String, String> {
    let net = fixture("case2_two_solutions.net");
    let (s, z) = (net.zip_loads[0].power[0], net.branches[0].series.get(0, 0).inv());
    let b = 2.0 * (s.re * z.re + s.im * z.im) - 1.0;
    let cc = s.norm_sqr() * z.norm_sqr();
    let disc = (b * b - 4.0 * cc).sqrt();
    let (high, low) = (((-b + disc) / 2.0).sqrt(), ((-b - disc) / 2.0).sqrt());
    let res = run_sweep(&net, &sampled_starts(SWEEP_SAMPLES), &with_method(tight(), HomotopyMethod::Tx)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (i, st) in res.states.iter().enumerate() {
        let st = st.as_ref().ok_or(format!("sample {i} did not converge"))?;
        worst = worst.max((st.voltage(1, 0).norm() - high).abs());
    }
    if worst > 1e-8 {
        return Err(format!("a sample ended {worst:.2e} pu from the high solution {high:.4}"));
    }
    let plain = run_sweep(&net, &sampled_starts(SWEEP_SAMPLES), &tight()).map_err(|e| e.to_string())?;
    let plain_low = plain.states.iter().flatten().filter(|st| (st.voltage(1, 0).norm() - low).abs() < 1e-6).count();
    Ok(format!(
        "Tx: {SWEEP_SAMPLES}/{SWEEP_SAMPLES} samples at |V| = {high:.4} (low root {low:.4}); plain NR reached the low root {plain_low} times"
    ))
}

/// Synthetic network with every generator's reactive range cut to half its
/// unconstrained output, so limits bind.
fn tightened_synthetic() -> Network {
    let mut net = synthetic(30, 30);
    let sol = solve(&net, &SolverOptions::default()).unwrap();
    for (gi, g) in net.generators.iter_mut().enumerate() {
        let q = sol.state.q(gi, 0);
        g.q_max = vec![if q > 0.0 { 0.5 * q } else { 1.0 }];
        g.q_min = vec![if q < 0.0 { 0.5 * q } else { -1.0 }];
    }
    net
}

fn q_limit_complementarity_check() -> Result<String, String> {
    let mut lines = Vec::new();
    for (name, net) in [("case14_qlim", fixture("case14_qlim.net")), ("synthetic30 tightened", tightened_synthetic())] {
        let sol = solve(&net, &tight()).map_err(|e| e.to_string())?;
        if sol.report.status != SolveStatus::Converged || sol.pinned.is_empty() {
            return Err(format!("{name}: {:?} with {} pinned", sol.report.status, sol.pinned.len()));
        }
        q_limit_complementarity(&sol.network, &sol.pinned, &sol.state, 1e-8).map_err(|e| format!("{name}: {e}"))?;
        let fixed: BTreeMap<usize, f64> = sol.pinned.iter().map(|&(g, p)| (g, sol.state.q(g, p))).collect();
        let o = oracle_solve(&sol.network, &fixed, 1e-12).ok_or(format!("{name}: oracle failed"))?;
        let (dm, da) = compare(&net, &sol.state, &o);
        if dm >= Q_ORACLE_TOL || da >= ORACLE_VA_TOL_DEG {
            return Err(format!("{name}: oracle |V| diff {dm:.2e}, angle {da:.2e}"));
        }
        lines.push(format!("{name}: {} pinned, oracle diff {dm:.0e}", sol.pinned.len()));
    }
    Ok(lines.join("; "))
}

fn contingency_protocol() -> Result<String, String> {
    let opts = SolverOptions::default();
    let limit = 10.0 * opts.nr.tol;
    let mut nets: Vec<(String, Network)> = ["case3_ring.net", "case9.net", "case14.net", "case14_qlim.net"]
        .iter()
        .map(|f| (f.to_string(), fixture(f)))
        .collect();
    nets.push(("synthetic30".into(), synthetic(30, 30)));
    nets.push(("synthetic57".into(), synthetic(57, 57)));
    let mut total = Tally::default();
    let mut rows = Vec::new();
    for (name, net) in &nets {
        let base = solve(net, &opts).map_err(|e| e.to_string())?;
        if base.report.status != SolveStatus::Converged {
            return Err(format!("{name}: base case {:?}", base.report.status));
        }
        let set = all_single_outages(&base.network);
        let res = run_contingencies(&base.network, &base.state, &set, &opts).map_err(|e| e.to_string())?;
        for r in &res {
            if r.report.status == SolveStatus::Converged {
                let sol = r.solution.as_ref().ok_or(format!("{name} {}: no solution kept", r.label))?;
                let m = validate_solution(&sol.network, &sol.state).max;
                if !(m <= limit) {
                    return Err(format!("{name} {}: reported Converged but mismatch {m:.2e}", r.label));
                }
            }
        }
        let t = Tally::of(res.iter().map(|r| &r.report.status));
        total.converged += t.converged;
        total.diverged += t.diverged;
        total.infeasible += t.infeasible;
        rows.push(format!("{name} {}/{}/{}", t.converged, t.diverged, t.infeasible));
    }
    Ok(format!(
        "converge/diverge/infeasible: {}; total {}/{}/{}, no false Converged",
        rows.join(", "),
        total.converged,
        total.diverged,
        total.infeasible
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<String, String>); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("homotopy endpoints", homotopy_endpoints),
        ("initial-condition sweep", initial_condition_sweep),
        ("three-phase iteration count", three_phase_iterations),
        ("power-stepping rescue", power_stepping_rescue),
        ("high-voltage selection", high_voltage_selection),
        ("Q-limit complementarity", q_limit_complementarity_check),
        ("contingency protocol", contingency_protocol),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.2} s] {detail}", i + 1),
            Err(detail) => {
                println!("criterion {} ({name}): FAIL [{secs:.2} s] {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
