//! Per-device contributions to the linearized nodal system.
//!
//! Every stamp writes the companion form of its device: the matrix gets the
//! device's Jacobian and the right-hand side gets the linearization
//! constant, so solving `A x = b` yields the next iterate directly rather
//! than a correction. Rows follow KCL with currents leaving the node
//! counted positive.

pub mod devices;
pub mod index;

use std::collections::BTreeSet;

use num_complex::Complex64;

use crate::linear::{assemble, SparseSystem};
use crate::network::{
    BigLoad, Branch, BusKind, Connection, DeviceRef, Network, Shunt, Transformer, ZipLoad,
};
use crate::state::StateVector;

pub use index::{ControlGroup, GroupMember, IndexMap};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum StampError {
    #[error("{0} sees a zero voltage at the current iterate")]
    ZeroVoltage(DeviceRef),
    #[error("{0} has non-positive effective tap {1}")]
    NonPositiveTap(DeviceRef, f64),
}

/// Matrix triplets plus right-hand-side entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stamp {
    pub triplets: Vec<(usize, usize, f64)>,
    pub rhs: Vec<(usize, f64)>,
}

type Node = (usize, usize);

impl Stamp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, other: Stamp) {
        self.triplets.extend(other.triplets);
        self.rhs.extend(other.rhs);
    }

    fn push(&mut self, r: usize, c: usize, v: f64) {
        self.triplets.push((r, c, v));
    }

    /// Current `y * V_col` leaving node `row`.
    fn admittance(&mut self, row: Node, col: Node, y: Complex64) {
        self.push(row.0, col.0, y.re);
        self.push(row.0, col.1, -y.im);
        self.push(row.1, col.0, y.im);
        self.push(row.1, col.1, y.re);
    }

    /// Jacobian block of a current with respect to the voltage at `col`.
    fn derivative(&mut self, row: Node, col: Node, d_vr: Complex64, d_vi: Complex64) {
        self.push(row.0, col.0, d_vr.re);
        self.push(row.0, col.1, d_vi.re);
        self.push(row.1, col.0, d_vr.im);
        self.push(row.1, col.1, d_vi.im);
    }

    /// Constant current `c` leaving node `row`.
    fn constant(&mut self, row: Node, c: Complex64) {
        self.rhs.push((row.0, -c.re));
        self.rhs.push((row.1, -c.im));
    }

    /// Evaluates `A x - b` restricted to this stamp.
    pub fn residual_into(&self, x: &[f64], out: &mut [f64]) {
        for &(r, c, v) in &self.triplets {
            out[r] += v * x[c];
        }
        for &(r, v) in &self.rhs {
            out[r] -= v;
        }
    }
}

fn node(map: &IndexMap, bus: usize, phase: usize) -> Node {
    (map.vr(bus, phase), map.vi(bus, phase))
}

fn voltage(state: &StateVector, bus: usize, phase: usize) -> Complex64 {
    state.voltage(bus, phase)
}

/// Linear pi-section: series matrix between the ends, half the charging at
/// each end. Contributes only matrix entries.
pub fn stamp_branch(map: &IndexMap, br: &Branch) -> Stamp {
    let mut st = Stamp::new();
    let n = br.series.n;
    for p in 0..n {
        let (fp, tp) = (node(map, br.from, p), node(map, br.to, p));
        for q in 0..n {
            let (fq, tq) = (node(map, br.from, q), node(map, br.to, q));
            let y = br.series.get(p, q);
            if y.norm_sqr() > 0.0 {
                st.admittance(fp, fq, y);
                st.admittance(fp, tq, -y);
                st.admittance(tp, tq, y);
                st.admittance(tp, fq, -y);
            }
            let half = br.charging.get(p, q) * 0.5;
            if half.norm_sqr() > 0.0 {
                st.admittance(fp, fq, half);
                st.admittance(tp, tq, half);
            }
        }
    }
    st
}

/// Two-port admittances `(Yff, Yft, Ytf, Ytt)` of a tap changer with complex
/// ratio `tap∠shift` on the from side.
pub fn transformer_two_port(y: Complex64, tap: f64, shift: f64) -> [Complex64; 4] {
    let t = Complex64::from_polar(tap, shift);
    [y / (tap * tap), -y / t.conj(), -y / t, y]
}

/// Tap-changer stamp using the effective ratio `tap` and shift `shift`
/// (radians) per phase rather than the stored ones.
pub fn stamp_transformer(
    map: &IndexMap,
    tr: &Transformer,
    tap: &[f64],
    shift: &[f64],
) -> Result<Stamp, StampError> {
    let mut st = Stamp::new();
    for p in 0..tr.series.len() {
        if !(tap[p] > 0.0) {
            return Err(StampError::NonPositiveTap(DeviceRef::Transformer(tr.id), tap[p]));
        }
        let [yff, yft, ytf, ytt] = transformer_two_port(tr.series[p], tap[p], shift[p]);
        let (f, t) = (node(map, tr.from, p), node(map, tr.to, p));
        st.admittance(f, f, yff);
        st.admittance(f, t, yft);
        st.admittance(t, f, ytf);
        st.admittance(t, t, ytt);
    }
    Ok(st)
}

/// Ideal voltage source at a slack bus. Its current unknowns enter the KCL
/// rows as injections and its own rows pin the voltage.
pub fn stamp_slack(map: &IndexMap, net: &Network, bus: usize) -> Stamp {
    let mut st = Stamp::new();
    let b = &net.buses[bus];
    let mag = b.v_set.unwrap_or(1.0);
    for p in 0..map.phases {
        let Some((ir, ii)) = map.slack_vars(bus, p) else { continue };
        let n = node(map, bus, p);
        st.push(n.0, ir, -1.0);
        st.push(n.1, ii, -1.0);
        let v = Complex64::from_polar(mag, b.angle + net.domain.angle_offset(p));
        st.push(ir, n.0, 1.0);
        st.push(ii, n.1, 1.0);
        st.rhs.push((ir, v.re));
        st.rhs.push((ii, v.im));
    }
    st
}

/// Voltage-regulating generator linearized around `state`, with the voltage
/// derivative terms scaled by `zeta` and the reactive-power column left
/// unscaled.
pub fn stamp_pv_generator(
    map: &IndexMap,
    net: &Network,
    gen: usize,
    phase: usize,
    group: usize,
    state: &StateVector,
    zeta: f64,
) -> Result<Stamp, StampError> {
    let g = &net.generators[gen];
    let v = voltage(state, g.bus, phase);
    let q = state.q(gen, phase);
    let (lin, d_q) = devices::generator(g.p[phase], q, v)
        .ok_or(StampError::ZeroVoltage(DeviceRef::Generator(g.id)))?;
    let member = map.groups[group].members.iter().find(|m| m.gen == gen).expect("group member");
    let n = node(map, g.bus, phase);
    let col = map.group_var(group);
    let mut st = Stamp::new();
    // Out-current is the negated generator current.
    st.derivative(n, n, -zeta * lin.d_vr, -zeta * lin.d_vi);
    st.push(n.0, col, -d_q.re * member.share);
    st.push(n.1, col, -d_q.im * member.share);
    let jv = lin.d_vr * v.re + lin.d_vi * v.im;
    let c = -lin.i + zeta * jv - d_q * (member.offset - q);
    st.constant(n, c);
    Ok(st)
}

/// Fixed `P + jQ` injection linearized around `state`.
pub fn stamp_fixed_generator(
    map: &IndexMap,
    net: &Network,
    gen: usize,
    phase: usize,
    state: &StateVector,
) -> Result<Stamp, StampError> {
    let g = &net.generators[gen];
    let s = Complex64::new(g.p[phase], g.q[phase]);
    let mut st = Stamp::new();
    if s.norm_sqr() == 0.0 {
        return Ok(st);
    }
    let v = voltage(state, g.bus, phase);
    let lin = devices::constant_power(-s, v).ok_or(StampError::ZeroVoltage(DeviceRef::Generator(g.id)))?;
    linearized(&mut st, &[(node(map, g.bus, phase), 1.0)], lin, v);
    Ok(st)
}

/// Linearized magnitude constraint `V_set² - |V|² = 0` in the group's row.
pub fn stamp_voltage_control(map: &IndexMap, group: usize, state: &StateVector) -> Stamp {
    let grp = &map.groups[group];
    let v = voltage(state, grp.bus, grp.phase);
    let n = node(map, grp.bus, grp.phase);
    let row = map.group_var(group);
    let mut st = Stamp::new();
    st.push(row, n.0, -2.0 * v.re);
    st.push(row, n.1, -2.0 * v.im);
    st.rhs.push((row, -grp.v_set * grp.v_set - v.norm_sqr()));
    st
}

/// Terminal nodes of a single-phase element with their current signs.
/// Wye elements sit between a phase node and ground; delta elements between
/// two phase nodes of the same bus.
fn terminals(map: &IndexMap, bus: usize, phase: usize, conn: Connection) -> Vec<(Node, f64)> {
    match conn {
        Connection::Delta if map.phases == 3 => {
            vec![(node(map, bus, phase), 1.0), (node(map, bus, (phase + 1) % 3), -1.0)]
        }
        _ => vec![(node(map, bus, phase), 1.0)],
    }
}

fn terminal_voltage(state: &StateVector, map: &IndexMap, bus: usize, phase: usize, conn: Connection) -> Complex64 {
    match conn {
        Connection::Delta if map.phases == 3 => voltage(state, bus, phase) - voltage(state, bus, (phase + 1) % 3),
        _ => voltage(state, bus, phase),
    }
}

/// Companion stamp of a nonlinear element across `terms` whose device
/// voltage is `v` and device current `lin`.
fn linearized(st: &mut Stamp, terms: &[(Node, f64)], lin: devices::Linearized, v: Complex64) {
    let c = lin.i - (lin.d_vr * v.re + lin.d_vi * v.im);
    for &(row, rs) in terms {
        for &(col, cs) in terms {
            st.derivative(row, col, lin.d_vr * (rs * cs), lin.d_vi * (rs * cs));
        }
        st.constant(row, c * rs);
    }
}

fn linear_across(st: &mut Stamp, terms: &[(Node, f64)], y: Complex64, alpha: Complex64) {
    for &(row, rs) in terms {
        if y.norm_sqr() > 0.0 {
            for &(col, cs) in terms {
                st.admittance(row, col, y * (rs * cs));
            }
        }
        if alpha.norm_sqr() > 0.0 {
            st.constant(row, alpha * rs);
        }
    }
}

/// Impedance part of a ZIP load; iterate independent.
pub fn stamp_zip_impedance(map: &IndexMap, load: &ZipLoad) -> Stamp {
    let mut st = Stamp::new();
    for p in 0..load.power.len() {
        let y = load.admittance(p);
        linear_across(&mut st, &terminals(map, load.bus, p, load.connection), y, Complex64::new(0.0, 0.0));
    }
    st
}

/// Constant-current and constant-power parts of a ZIP load linearized
/// around `state`.
pub fn stamp_zip_nonlinear(map: &IndexMap, load: &ZipLoad, state: &StateVector) -> Result<Stamp, StampError> {
    let mut st = Stamp::new();
    let zero = Complex64::new(0.0, 0.0);
    for p in 0..load.power.len() {
        let (ipq, s) = (load.current[p], load.power[p]);
        if ipq.norm_sqr() == 0.0 && s.norm_sqr() == 0.0 {
            continue;
        }
        let v = terminal_voltage(state, map, load.bus, p, load.connection);
        let lin = devices::zip(zero, ipq, s, v).ok_or(StampError::ZeroVoltage(DeviceRef::ZipLoad(load.id)))?;
        linearized(&mut st, &terminals(map, load.bus, p, load.connection), lin, v);
    }
    Ok(st)
}

/// Full ZIP load stamp at `state`.
pub fn stamp_zip_load(map: &IndexMap, load: &ZipLoad, state: &StateVector) -> Result<Stamp, StampError> {
    let mut st = stamp_zip_impedance(map, load);
    st.extend(stamp_zip_nonlinear(map, load, state)?);
    Ok(st)
}

/// Linear load `I = scale * alpha + Y V`.
pub fn stamp_big_load(map: &IndexMap, load: &BigLoad, scale: f64) -> Stamp {
    let mut st = Stamp::new();
    for p in 0..load.alpha.len() {
        let terms = terminals(map, load.bus, p, load.connection);
        linear_across(&mut st, &terms, load.y[p], load.alpha[p] * scale);
    }
    st
}

/// Shunt admittance with the fraction `open` of it disconnected.
pub fn stamp_shunt(map: &IndexMap, shunt: &Shunt, open: f64) -> Stamp {
    let mut st = Stamp::new();
    for p in 0..shunt.y.len() {
        let y = shunt.admittance(p) * (1.0 - open);
        if y.norm_sqr() > 0.0 {
            let n = node(map, shunt.bus, p);
            st.admittance(n, n, y);
        }
    }
    st
}

/// Extra admittance between a regulating generator's bus and the bus it
/// regulates, on every phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualShort {
    pub controlling: usize,
    pub controlled: usize,
    pub y: Complex64,
}

pub fn stamp_virtual_short(map: &IndexMap, short: &VirtualShort) -> Stamp {
    let mut st = Stamp::new();
    if short.y.norm_sqr() == 0.0 {
        return st;
    }
    for p in 0..map.phases {
        let (a, b) = (node(map, short.controlling, p), node(map, short.controlled, p));
        st.admittance(a, a, short.y);
        st.admittance(a, b, -short.y);
        st.admittance(b, b, short.y);
        st.admittance(b, a, -short.y);
    }
    st
}

/// One sub-problem: a (possibly homotopy-transformed) network with its
/// numbering and the iterate-independent part of the system cached.
#[derive(Debug, Clone)]
pub struct Problem {
    pub net: Network,
    pub map: IndexMap,
    pub shorts: Vec<VirtualShort>,
    linear: Stamp,
}

impl Problem {
    pub fn new(net: Network, pinned: &BTreeSet<(usize, usize)>, shorts: Vec<VirtualShort>) -> Result<Self, StampError> {
        let map = IndexMap::build(&net, pinned);
        let mut linear = Stamp::new();
        for br in net.branches.iter().filter(|b| b.in_service) {
            linear.extend(stamp_branch(&map, br));
        }
        for tr in net.transformers.iter().filter(|t| t.in_service) {
            linear.extend(stamp_transformer(&map, tr, &tr.tap, &tr.shift)?);
        }
        for sh in &net.shunts {
            linear.extend(stamp_shunt(&map, sh, 0.0));
        }
        for l in &net.zip_loads {
            linear.extend(stamp_zip_impedance(&map, l));
        }
        for l in &net.big_loads {
            linear.extend(stamp_big_load(&map, l, 1.0));
        }
        for s in &shorts {
            linear.extend(stamp_virtual_short(&map, s));
        }
        for &b in &map.slack_buses {
            linear.extend(stamp_slack(&map, &net, b));
        }
        Ok(Problem { net, map, shorts, linear })
    }

    pub fn dim(&self) -> usize {
        self.map.dim
    }

    /// Every stamp at `state`, in a fixed device order.
    pub fn stamp(&self, state: &StateVector, zeta: f64) -> Result<Stamp, StampError> {
        let net = &self.net;
        let map = &self.map;
        let mut st = self.linear.clone();
        for (gi, g) in net.generators.iter().enumerate() {
            if !g.in_service || net.buses[g.bus].kind == BusKind::Slack {
                continue;
            }
            for p in 0..map.phases {
                match map.gen_group(gi, p) {
                    Some(k) => st.extend(stamp_pv_generator(map, net, gi, p, k, state, zeta)?),
                    None => st.extend(stamp_fixed_generator(map, net, gi, p, state)?),
                }
            }
        }
        for l in &net.zip_loads {
            st.extend(stamp_zip_nonlinear(map, l, state)?);
        }
        for k in 0..map.groups.len() {
            st.extend(stamp_voltage_control(map, k, state));
        }
        Ok(st)
    }

    pub fn system(&self, state: &StateVector, zeta: f64) -> Result<SparseSystem, StampError> {
        let st = self.stamp(state, zeta)?;
        Ok(assemble(&st.triplets, &st.rhs, self.dim()).expect("stamp indices within the system"))
    }

    /// Nonlinear residual of every equation at `state`: KCL current
    /// mismatch in voltage rows, source and control equations in the rest.
    pub fn residual(&self, state: &StateVector) -> Result<Vec<f64>, StampError> {
        let st = self.stamp(state, 1.0)?;
        let x = self.map.pack(state);
        let mut r = vec![0.0; self.dim()];
        st.residual_into(&x, &mut r);
        Ok(r)
    }
}
