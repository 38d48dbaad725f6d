//! Shared test support: fixture loading, a dense polar power-mismatch
//! Newton solver used as an independent oracle, and a seeded generator of
//! synthetic positive-sequence networks.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ecpf::case_io::load_case;
use ecpf::network::{Branch, Bus, BusKind, Generator, Network, PhaseDomain, PhaseMatrix, Shunt, Transformer, ZipLoad};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn cases_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases")
}

pub fn fixture(name: &str) -> Network {
    let path = cases_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    load_case(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Gaussian elimination with partial pivoting. `None` if singular.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[p][k].abs() < 1e-300 {
            return None;
        }
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

/// Dense bus admittance matrix of a positive-sequence network, built from
/// the textbook pi and off-nominal-tap models.
pub fn ybus(net: &Network) -> Vec<Vec<Complex64>> {
    let n = net.buses.len();
    let mut y = vec![vec![c(0.0, 0.0); n]; n];
    for br in net.branches.iter().filter(|b| b.in_service) {
        let (f, t) = (br.from, br.to);
        let ys = br.series.get(0, 0);
        let half = br.charging.get(0, 0) / 2.0;
        y[f][f] += ys + half;
        y[t][t] += ys + half;
        y[f][t] -= ys;
        y[t][f] -= ys;
    }
    for tr in net.transformers.iter().filter(|t| t.in_service) {
        let (f, t) = (tr.from, tr.to);
        let ys = tr.series[0];
        let a = Complex64::from_polar(tr.tap[0], tr.shift[0]);
        y[f][f] += ys / (a * a.conj());
        y[f][t] -= ys / a.conj();
        y[t][f] -= ys / a;
        y[t][t] += ys;
    }
    for sh in &net.shunts {
        y[sh.bus][sh.bus] += sh.admittance(0);
    }
    for l in &net.zip_loads {
        if let Some(z) = l.impedance[0] {
            y[l.bus][l.bus] += c(1.0, 0.0) / z;
        }
    }
    y
}

pub struct OracleSolution {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub iterations: usize,
    pub mismatch: f64,
}

impl OracleSolution {
    pub fn voltage(&self, b: usize) -> Complex64 {
        Complex64::from_polar(self.vm[b], self.va[b])
    }
}

/// Solves the polar power-balance equations with Newton's method and a
/// central-difference Jacobian. Generators listed in `fixed_q` (index to
/// reactive output) inject that output instead of regulating. Only
/// positive-sequence networks with local voltage control are supported.
pub fn oracle_solve(net: &Network, fixed_q: &BTreeMap<usize, f64>, tol: f64) -> Option<OracleSolution> {
    assert_eq!(net.domain, PhaseDomain::PositiveSequence);
    let n = net.buses.len();
    let y = ybus(net);
    let mut kind: Vec<BusKind> = net.buses.iter().map(|b| if b.kind == BusKind::Slack { BusKind::Slack } else { BusKind::PQ }).collect();
    let mut sched_p = vec![0.0; n];
    let mut sched_q = vec![0.0; n];
    for (gi, g) in net.generators.iter().enumerate() {
        if !g.in_service || kind[g.bus] == BusKind::Slack {
            continue;
        }
        sched_p[g.bus] += g.p[0];
        match (g.regulated_bus, fixed_q.get(&gi)) {
            (_, Some(&q)) => sched_q[g.bus] += q,
            (Some(w), None) => {
                assert_eq!(w, g.bus, "oracle supports local voltage control only");
                kind[g.bus] = BusKind::PV;
            }
            (None, None) => sched_q[g.bus] += g.q[0],
        }
    }
    let mut s_const = vec![c(0.0, 0.0); n];
    let mut s_curr = vec![c(0.0, 0.0); n];
    for l in &net.zip_loads {
        s_const[l.bus] += l.power[0];
        s_curr[l.bus] += l.current[0];
    }
    let mut big_alpha = vec![c(0.0, 0.0); n];
    let mut big_y = vec![c(0.0, 0.0); n];
    for l in &net.big_loads {
        big_alpha[l.bus] += l.alpha[0];
        big_y[l.bus] += l.y[0];
    }
    let rows: Vec<Vec<(usize, Complex64)>> =
        y.iter().map(|r| r.iter().enumerate().filter(|(_, v)| v.norm() != 0.0).map(|(j, &v)| (j, v)).collect()).collect();

    let mut vm: Vec<f64> = net.buses.iter().enumerate().map(|(i, b)| if kind[i] == BusKind::PQ { 1.0 } else { b.v_set.unwrap_or(1.0) }).collect();
    let mut va: Vec<f64> = net.buses.iter().map(|b| if b.kind == BusKind::Slack { b.angle } else { 0.0 }).collect();
    let ang: Vec<usize> = (0..n).filter(|&i| kind[i] != BusKind::Slack).collect();
    let mag: Vec<usize> = (0..n).filter(|&i| kind[i] == BusKind::PQ).collect();

    let mismatch = |vm: &[f64], va: &[f64]| -> Vec<f64> {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let mut ds = vec![c(0.0, 0.0); n];
        for i in 0..n {
            let inj: Complex64 = rows[i].iter().map(|&(j, yij)| yij * v[j]).sum();
            let s_load = s_const[i] + s_curr[i] * vm[i] + v[i] * big_alpha[i].conj() + big_y[i].conj() * vm[i] * vm[i];
            ds[i] = c(sched_p[i], sched_q[i]) - s_load - v[i] * inj.conj();
        }
        ang.iter().map(|&i| ds[i].re).chain(mag.iter().map(|&i| ds[i].im)).collect()
    };
    let unpack = |x: &[f64], vm: &mut Vec<f64>, va: &mut Vec<f64>| {
        for (k, &i) in ang.iter().enumerate() {
            va[i] = x[k];
        }
        for (k, &i) in mag.iter().enumerate() {
            vm[i] = x[ang.len() + k];
        }
    };
    let mut x: Vec<f64> = ang.iter().map(|&i| va[i]).chain(mag.iter().map(|&i| vm[i])).collect();
    let m = x.len();
    for it in 0..60 {
        unpack(&x, &mut vm, &mut va);
        let f = mismatch(&vm, &va);
        let worst = f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if worst < tol {
            return Some(OracleSolution { vm, va, iterations: it, mismatch: worst });
        }
        let h = 1e-7;
        let mut jac = vec![vec![0.0; m]; m];
        for j in 0..m {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (mut vp, mut ap) = (vm.clone(), va.clone());
            unpack(&xp, &mut vp, &mut ap);
            let fp = mismatch(&vp, &ap);
            let (mut vq, mut aq) = (vm.clone(), va.clone());
            unpack(&xm, &mut vq, &mut aq);
            let fm = mismatch(&vq, &aq);
            for i in 0..m {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let dx = dense_solve(jac, f.iter().map(|v| -v).collect())?;
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    None
}

/// Largest |V| difference and angle difference (degrees) between a solver
/// state and an oracle solution.
pub fn compare(net: &Network, state: &ecpf::state::StateVector, o: &OracleSolution) -> (f64, f64) {
    let mut dm = 0.0f64;
    let mut da = 0.0f64;
    for b in 0..net.buses.len() {
        let v = state.voltage(b, 0);
        dm = dm.max((v.norm() - o.vm[b]).abs());
        let mut d = (v.arg() - o.va[b]).to_degrees();
        d = (d + 180.0).rem_euclid(360.0) - 180.0;
        da = da.max(d.abs());
    }
    (dm, da)
}

/// Seeded synthetic transmission-style network with `n` buses: a random
/// spanning tree over nearby buses plus chords, about one generator per six
/// buses with local voltage control, constant-power loads, a few
/// transformers with off-nominal taps and small phase shifts, and a few
/// capacitor banks. Loading is moderate so flat-start Newton converges.
pub fn synthetic(n: usize, seed: u64) -> Network {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(&format!("synthetic{n}"), PhaseDomain::PositiveSequence, 100.0);
    for i in 0..n {
        let id = i as u32 + 1;
        let mut bus = Bus::new(id, if i == 0 { BusKind::Slack } else { BusKind::PQ });
        bus.base_kv = 230.0;
        if i == 0 {
            bus.v_set = Some(1.02);
        }
        net.buses.push(bus);
    }
    let mut edges = Vec::new();
    for i in 1..n {
        let j = rng.gen_range(i.saturating_sub(3)..i);
        edges.push((j, i));
    }
    for _ in 0..n / 4 {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    let (mut next_branch, mut next_tr) = (1, 1);
    for &(a, b) in &edges {
        let x = rng.gen_range(0.03..0.15);
        let r = x * rng.gen_range(0.1..0.35);
        let y = c(r, x).inv();
        if rng.gen_bool(0.1) {
            let shift = if rng.gen_bool(0.3) { rng.gen_range(-5.0f64..5.0).to_radians() } else { 0.0 };
            let tap = rng.gen_range(0.95..1.05);
            net.transformers.push(Transformer {
                id: next_tr,
                from: a,
                to: b,
                series: vec![c(0.0, x).inv()],
                tap: vec![tap],
                shift: vec![shift],
                tap_min: 0.9,
                tap_max: 1.1,
                tap_step: 0.0,
                control: None,
                rating: 0.0,
                in_service: true,
            });
            next_tr += 1;
        } else {
            net.branches.push(Branch {
                id: next_branch,
                from: a,
                to: b,
                series: PhaseMatrix::scalar(y),
                charging: PhaseMatrix::scalar(c(0.0, rng.gen_range(0.0..0.04))),
                rating: 0.0,
                in_service: true,
            });
            next_branch += 1;
        }
    }
    let mut total_load = 0.0;
    for i in 1..n {
        if rng.gen_bool(0.75) {
            let p = rng.gen_range(0.05..0.3);
            let q = p * rng.gen_range(0.1..0.4);
            total_load += p;
            net.zip_loads.push(ZipLoad::constant_power(i as u32 + 1, i, &[c(p, q)]));
        }
    }
    let mut gen_buses: Vec<usize> = (1..n).filter(|_| rng.gen_bool(1.0 / 6.0)).collect();
    if gen_buses.is_empty() && n > 2 {
        gen_buses.push(n - 1);
    }
    for (k, &b) in gen_buses.iter().enumerate() {
        net.buses[b].v_set = Some(rng.gen_range(0.99..1.04));
        net.generators.push(Generator {
            id: k as u32 + 1,
            bus: b,
            p: vec![0.95 * total_load / gen_buses.len() as f64],
            q: vec![0.0],
            q_min: vec![f64::NEG_INFINITY],
            q_max: vec![f64::INFINITY],
            regulated_bus: Some(b),
            in_service: true,
        });
    }
    for k in 0..n / 20 {
        let b = rng.gen_range(1..n);
        net.shunts.push(Shunt { id: k as u32 + 1, bus: b, y: vec![c(0.0, rng.gen_range(0.05..0.2))], switched: None });
    }
    net.refresh_kinds();
    assert!(net.validate().is_empty(), "{:?}", net.validate());
    net
}

/// Positive-sequence fixtures shipped in `cases/` that plain Newton solves
/// from flat start.
pub const SOLVABLE_FIXTURES: &[&str] =
    &["case2_two_solutions.net", "case3_ring.net", "case9.net", "case14.net", "case14_qlim.net"];

pub const SYNTHETIC_SIZES: &[usize] = &[5, 12, 30, 57, 118, 200];

/// Fixtures plus synthetic networks, with names.
pub fn corpus() -> Vec<(String, Network)> {
    let mut out: Vec<(String, Network)> = SOLVABLE_FIXTURES.iter().map(|f| (f.to_string(), fixture(f))).collect();
    for &n in SYNTHETIC_SIZES {
        out.push((format!("synthetic{n}"), synthetic(n, n as u64)));
    }
    out
}
