//! Grid element types shared by the positive-sequence and three-phase
//! solvers.
//!
//! All quantities held by a [`Network`] are per-unit on the network's
//! `base_mva` (per phase for three-phase networks). Angles are radians.
//! Every per-phase vector carries exactly [`PhaseDomain::phases`] entries.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Phase coordinates a network is modelled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseDomain {
    PositiveSequence,
    ThreePhase,
}

impl PhaseDomain {
    pub fn phases(self) -> usize {
        match self {
            PhaseDomain::PositiveSequence => 1,
            PhaseDomain::ThreePhase => 3,
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            PhaseDomain::PositiveSequence => &["p"],
            PhaseDomain::ThreePhase => &["a", "b", "c"],
        }
    }

    /// Balanced-source angle offset of phase `p` in radians.
    pub fn angle_offset(self, p: usize) -> f64 {
        match (self, p) {
            (PhaseDomain::PositiveSequence, _) | (PhaseDomain::ThreePhase, 0) => 0.0,
            (PhaseDomain::ThreePhase, 1) => -2.0 * PI / 3.0,
            (PhaseDomain::ThreePhase, _) => 2.0 * PI / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Voltage magnitude set point; present for slack buses and buses
    /// regulated by a generator.
    pub v_set: Option<f64>,
    /// Reference angle (radians) of a slack bus, phase `a` for three-phase.
    pub angle: f64,
}

impl Bus {
    pub fn new(id: u32, kind: BusKind) -> Self {
        Bus { id, kind, base_kv: 0.0, v_set: None, angle: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub id: u32,
    pub bus: usize,
    pub p: Vec<f64>,
    /// Reactive output. For a regulating generator this is only the
    /// starting value; the solver treats it as an unknown.
    pub q: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Bus whose voltage magnitude this generator regulates (its own bus
    /// or a remote one). `None` makes it a fixed P/Q injection.
    pub regulated_bus: Option<usize>,
    pub in_service: bool,
}

impl Generator {
    pub fn remote_bus(&self) -> Option<usize> {
        self.regulated_bus.filter(|&b| b != self.bus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Wye,
    Delta,
}

/// Aggregate load with constant-impedance, constant-current and
/// constant-power parts.
///
/// The current and power parts are expressed as the complex power they draw
/// at 1 pu voltage; the impedance part is a per-unit impedance whose
/// admittance `1/Z` is stamped directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipLoad {
    pub id: u32,
    pub bus: usize,
    pub connection: Connection,
    pub impedance: Vec<Option<Complex64>>,
    pub current: Vec<Complex64>,
    pub power: Vec<Complex64>,
}

impl ZipLoad {
    /// Constant-power load on every phase.
    pub fn constant_power(id: u32, bus: usize, s: &[Complex64]) -> Self {
        ZipLoad {
            id,
            bus,
            connection: Connection::Wye,
            impedance: vec![None; s.len()],
            current: vec![Complex64::new(0.0, 0.0); s.len()],
            power: s.to_vec(),
        }
    }

    pub fn admittance(&self, phase: usize) -> Complex64 {
        match self.impedance[phase] {
            Some(z) => z.inv(),
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Impedance that draws complex power `s` at 1 pu voltage.
    pub fn impedance_for_power(s: Complex64) -> Option<Complex64> {
        if s.norm() == 0.0 {
            None
        } else {
            Some(s.conj().inv())
        }
    }
}

/// Linear load: base current source plus a sensitivity admittance.
#[derive(Debug, Clone, PartialEq)]
pub struct BigLoad {
    pub id: u32,
    pub bus: usize,
    pub connection: Connection,
    pub alpha: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

/// Dense 1×1 or 3×3 complex phase matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMatrix {
    pub n: usize,
    pub m: [[Complex64; 3]; 3],
}

impl PhaseMatrix {
    pub fn zeros(n: usize) -> Self {
        PhaseMatrix { n, m: [[Complex64::new(0.0, 0.0); 3]; 3] }
    }

    pub fn scalar(y: Complex64) -> Self {
        let mut pm = Self::zeros(1);
        pm.m[0][0] = y;
        pm
    }

    pub fn diagonal(d: &[Complex64]) -> Self {
        let mut pm = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            pm.m[i][i] = v;
        }
        pm
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let mut pm = Self::zeros(rows.len());
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                pm.m[i][j] = v;
            }
        }
        pm
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.m[i][j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.m[i][j] == self.m[j][i]))
    }

    pub fn is_zero(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.m[i][j].norm() == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.m[i][j].is_finite()))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.m[i][j] = self.m[i][j] * s;
            }
        }
        out
    }

    pub fn rows(&self) -> Vec<Vec<Complex64>> {
        (0..self.n).map(|i| self.m[i][..self.n].to_vec()).collect()
    }
}

/// Transmission line or distribution line segment (pi model).
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: u32,
    pub from: usize,
    pub to: usize,
    pub series: PhaseMatrix,
    /// Total shunt charging admittance; half is connected at each end.
    pub charging: PhaseMatrix,
    /// Thermal rating in per-unit power, `0` when unknown.
    pub rating: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapControl {
    pub bus: usize,
    pub v_target: f64,
    pub deadband: f64,
}

/// Two-winding transformer with the off-nominal tap and phase shift on the
/// `from` side. Three-phase transformers are modelled per phase (grounded
/// wye on both sides).
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub id: u32,
    pub from: usize,
    pub to: usize,
    pub series: Vec<Complex64>,
    pub tap: Vec<f64>,
    /// Phase shift in radians.
    pub shift: Vec<f64>,
    pub tap_min: f64,
    pub tap_max: f64,
    pub tap_step: f64,
    pub control: Option<TapControl>,
    pub rating: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedShunt {
    /// Admittance of one block.
    pub block: Vec<Complex64>,
    pub steps: i32,
    pub min_steps: i32,
    pub max_steps: i32,
    pub v_target: f64,
    pub deadband: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shunt {
    pub id: u32,
    pub bus: usize,
    pub y: Vec<Complex64>,
    pub switched: Option<SwitchedShunt>,
}

impl Shunt {
    /// Fixed plus switched admittance on `phase`.
    pub fn admittance(&self, phase: usize) -> Complex64 {
        let mut y = self.y[phase];
        if let Some(sw) = &self.switched {
            y += sw.block[phase] * sw.steps as f64;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub domain: PhaseDomain,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub zip_loads: Vec<ZipLoad>,
    pub big_loads: Vec<BigLoad>,
    pub branches: Vec<Branch>,
    pub transformers: Vec<Transformer>,
    pub shunts: Vec<Shunt>,
}

/// Reference to a device by its external id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceRef {
    Bus(u32),
    Generator(u32),
    ZipLoad(u32),
    BigLoad(u32),
    Branch(u32),
    Transformer(u32),
    Shunt(u32),
}

impl fmt::Display for DeviceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceRef::Bus(i) => write!(f, "bus {i}"),
            DeviceRef::Generator(i) => write!(f, "generator {i}"),
            DeviceRef::ZipLoad(i) => write!(f, "load {i}"),
            DeviceRef::BigLoad(i) => write!(f, "BIG load {i}"),
            DeviceRef::Branch(i) => write!(f, "branch {i}"),
            DeviceRef::Transformer(i) => write!(f, "transformer {i}"),
            DeviceRef::Shunt(i) => write!(f, "shunt {i}"),
        }
    }
}

/// Structural problem found by [`Network::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
pub enum ValidationError {
    #[error("base MVA must be positive, got {0}")]
    InvalidBase(f64),
    #[error("{0}: references bus index {1} which does not exist")]
    DanglingBus(DeviceRef, usize),
    #[error("{device}: expected {expected} phase values, found {found}")]
    PhaseCount { device: DeviceRef, expected: usize, found: usize },
    #[error("{0}: non-finite parameter")]
    NonFinite(DeviceRef),
    #[error("island {0} has no slack bus")]
    MissingSlack(usize),
    #[error("island {island} has {count} slack buses")]
    MultipleSlack { island: usize, count: usize },
    #[error("{0}: voltage set point must be positive")]
    InvalidSetPoint(DeviceRef),
    #[error("{0}: Q_min exceeds Q_max")]
    InvertedQLimits(DeviceRef),
    #[error("{0}: regulated bus is not reachable from the generator bus")]
    UnreachableRemote(DeviceRef),
    #[error("{0}: regulates a bus without a voltage set point")]
    MissingSetPoint(DeviceRef),
    #[error("{0}: regulates a slack bus")]
    RegulatesSlack(DeviceRef),
    #[error("{0}: bus kind disagrees with its regulating generators")]
    KindMismatch(DeviceRef),
    #[error("{0}: three-phase admittance matrix is not symmetric")]
    AsymmetricAdmittance(DeviceRef),
    #[error("{0}: series admittance is zero")]
    ZeroSeriesAdmittance(DeviceRef),
    #[error("{0}: tap ratio outside its limits or not positive")]
    TapOutOfRange(DeviceRef),
    #[error("{0}: phase shift outside (-180, 180] degrees")]
    ShiftOutOfRange(DeviceRef),
    #[error("{0}: zero load impedance")]
    ZeroImpedance(DeviceRef),
    #[error("{0}: switched block range is empty or excludes the current step")]
    InvalidSteps(DeviceRef),
    #[error("{0}: branch connects a bus to itself")]
    SelfLoop(DeviceRef),
}

impl Network {
    pub fn new(name: &str, domain: PhaseDomain, base_mva: f64) -> Self {
        Network {
            name: name.to_string(),
            domain,
            base_mva,
            buses: Vec::new(),
            generators: Vec::new(),
            zip_loads: Vec::new(),
            big_loads: Vec::new(),
            branches: Vec::new(),
            transformers: Vec::new(),
            shunts: Vec::new(),
        }
    }

    pub fn phases(&self) -> usize {
        self.domain.phases()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_buses(&self) -> Vec<usize> {
        (0..self.buses.len()).filter(|&i| self.buses[i].kind == BusKind::Slack).collect()
    }

    /// Recomputes PV/PQ kinds from the in-service regulating generators.
    pub fn refresh_kinds(&mut self) {
        let mut regulated = vec![false; self.buses.len()];
        for g in self.generators.iter().filter(|g| g.in_service) {
            if g.bus < regulated.len() && self.buses[g.bus].kind == BusKind::Slack {
                continue;
            }
            if let Some(b) = g.regulated_bus {
                if b < regulated.len() {
                    regulated[b] = true;
                }
            }
        }
        for (bus, reg) in self.buses.iter_mut().zip(regulated) {
            if bus.kind != BusKind::Slack {
                bus.kind = if reg { BusKind::PV } else { BusKind::PQ };
            }
        }
    }

    /// Undirected in-service connections between buses.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lines = self.branches.iter().filter(|b| b.in_service).map(|b| (b.from, b.to));
        let xfmrs = self.transformers.iter().filter(|t| t.in_service).map(|t| (t.from, t.to));
        lines.chain(xfmrs)
    }

    /// Island label of every bus, numbered in order of first appearance.
    pub fn islands(&self) -> Vec<usize> {
        let n = self.buses.len();
        let mut uf = UnionFind::new(n);
        for (a, b) in self.edges() {
            if a < n && b < n {
                uf.union(a, b);
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut root_label = vec![usize::MAX; n];
        let mut next = 0;
        for i in 0..n {
            let r = uf.find(i);
            if root_label[r] == usize::MAX {
                root_label[r] = next;
                next += 1;
            }
            label[i] = root_label[r];
        }
        label
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (a, b) in self.edges() {
            if a < n && b < n {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        adj
    }

    /// Whether `to` can be reached from `from` through in-service elements.
    pub fn reachable(&self, from: usize, to: usize) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(u) = queue.pop_front() {
            if u == to {
                return true;
            }
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        false
    }

    /// Checks every structural invariant; an empty list means the network
    /// can be solved.
    pub fn validate(&self) -> Vec<ValidationError> {
        let mut errs = Vec::new();
        let nph = self.phases();
        let nb = self.buses.len();
        if !(self.base_mva > 0.0) || !self.base_mva.is_finite() {
            errs.push(ValidationError::InvalidBase(self.base_mva));
        }

        let check_bus = |errs: &mut Vec<ValidationError>, dev: DeviceRef, b: usize| -> bool {
            if b >= nb {
                errs.push(ValidationError::DanglingBus(dev, b));
                false
            } else {
                true
            }
        };
        let phase_len = |errs: &mut Vec<ValidationError>, dev: DeviceRef, len: usize| {
            if len != nph {
                errs.push(ValidationError::PhaseCount { device: dev, expected: nph, found: len });
            }
        };

        for bus in &self.buses {
            let dev = DeviceRef::Bus(bus.id);
            if let Some(v) = bus.v_set {
                if !(v > 0.0) || !v.is_finite() {
                    errs.push(ValidationError::InvalidSetPoint(dev));
                }
            } else if bus.kind != BusKind::PQ {
                errs.push(ValidationError::InvalidSetPoint(dev));
            }
            if !bus.angle.is_finite() {
                errs.push(ValidationError::NonFinite(dev));
            }
        }

        let mut regulated = vec![false; nb];
        for g in &self.generators {
            let dev = DeviceRef::Generator(g.id);
            if !check_bus(&mut errs, dev, g.bus) {
                continue;
            }
            for v in [&g.p, &g.q, &g.q_min, &g.q_max] {
                phase_len(&mut errs, dev, v.len());
            }
            if g.p.iter().chain(&g.q).any(|x| !x.is_finite())
                || g.q_min.iter().chain(&g.q_max).any(|x| x.is_nan())
            {
                errs.push(ValidationError::NonFinite(dev));
            }
            if g.q_min.iter().zip(&g.q_max).any(|(lo, hi)| lo > hi) {
                errs.push(ValidationError::InvertedQLimits(dev));
            }
            if let Some(w) = g.regulated_bus {
                if !check_bus(&mut errs, dev, w) {
                    continue;
                }
                if !g.in_service || self.buses[g.bus].kind == BusKind::Slack {
                    continue;
                }
                regulated[w] = true;
                if self.buses[w].kind == BusKind::Slack {
                    errs.push(ValidationError::RegulatesSlack(dev));
                } else if self.buses[w].v_set.is_none() {
                    errs.push(ValidationError::MissingSetPoint(dev));
                }
                if w != g.bus && !self.reachable(g.bus, w) {
                    errs.push(ValidationError::UnreachableRemote(dev));
                }
            }
        }
        for (i, bus) in self.buses.iter().enumerate() {
            let pv = bus.kind == BusKind::PV;
            if bus.kind != BusKind::Slack && pv != regulated[i] {
                errs.push(ValidationError::KindMismatch(DeviceRef::Bus(bus.id)));
            }
        }

        for l in &self.zip_loads {
            let dev = DeviceRef::ZipLoad(l.id);
            if !check_bus(&mut errs, dev, l.bus) {
                continue;
            }
            phase_len(&mut errs, dev, l.impedance.len());
            phase_len(&mut errs, dev, l.current.len());
            phase_len(&mut errs, dev, l.power.len());
            if l.current.iter().chain(&l.power).any(|c| !c.is_finite())
                || l.impedance.iter().flatten().any(|z| !z.is_finite())
            {
                errs.push(ValidationError::NonFinite(dev));
            }
            if l.impedance.iter().flatten().any(|z| z.norm() == 0.0) {
                errs.push(ValidationError::ZeroImpedance(dev));
            }
        }
        for l in &self.big_loads {
            let dev = DeviceRef::BigLoad(l.id);
            if !check_bus(&mut errs, dev, l.bus) {
                continue;
            }
            phase_len(&mut errs, dev, l.alpha.len());
            phase_len(&mut errs, dev, l.y.len());
            if l.alpha.iter().chain(&l.y).any(|c| !c.is_finite()) {
                errs.push(ValidationError::NonFinite(dev));
            }
        }
        for br in &self.branches {
            let dev = DeviceRef::Branch(br.id);
            if !check_bus(&mut errs, dev, br.from) || !check_bus(&mut errs, dev, br.to) {
                continue;
            }
            if br.from == br.to {
                errs.push(ValidationError::SelfLoop(dev));
            }
            phase_len(&mut errs, dev, br.series.n);
            phase_len(&mut errs, dev, br.charging.n);
            if !br.series.is_finite() || !br.charging.is_finite() {
                errs.push(ValidationError::NonFinite(dev));
            }
            if !br.series.is_symmetric() || !br.charging.is_symmetric() {
                errs.push(ValidationError::AsymmetricAdmittance(dev));
            }
            if br.series.is_zero() {
                errs.push(ValidationError::ZeroSeriesAdmittance(dev));
            }
        }
        for t in &self.transformers {
            let dev = DeviceRef::Transformer(t.id);
            if !check_bus(&mut errs, dev, t.from) || !check_bus(&mut errs, dev, t.to) {
                continue;
            }
            if t.from == t.to {
                errs.push(ValidationError::SelfLoop(dev));
            }
            phase_len(&mut errs, dev, t.series.len());
            phase_len(&mut errs, dev, t.tap.len());
            phase_len(&mut errs, dev, t.shift.len());
            if t.series.iter().any(|y| !y.is_finite()) || t.tap.iter().chain(&t.shift).any(|x| !x.is_finite()) {
                errs.push(ValidationError::NonFinite(dev));
            }
            if t.series.iter().any(|y| y.norm() == 0.0) {
                errs.push(ValidationError::ZeroSeriesAdmittance(dev));
            }
            if !(t.tap_min > 0.0) || t.tap_min > t.tap_max || t.tap.iter().any(|&r| r < t.tap_min || r > t.tap_max) {
                errs.push(ValidationError::TapOutOfRange(dev));
            }
            if t.shift.iter().any(|&s| !(s > -PI && s <= PI)) {
                errs.push(ValidationError::ShiftOutOfRange(dev));
            }
            if let Some(c) = &t.control {
                check_bus(&mut errs, dev, c.bus);
                if !(c.v_target > 0.0) {
                    errs.push(ValidationError::InvalidSetPoint(dev));
                }
            }
        }
        for s in &self.shunts {
            let dev = DeviceRef::Shunt(s.id);
            if !check_bus(&mut errs, dev, s.bus) {
                continue;
            }
            phase_len(&mut errs, dev, s.y.len());
            if s.y.iter().any(|y| !y.is_finite()) {
                errs.push(ValidationError::NonFinite(dev));
            }
            if let Some(sw) = &s.switched {
                phase_len(&mut errs, dev, sw.block.len());
                if sw.min_steps > sw.max_steps || sw.steps < sw.min_steps || sw.steps > sw.max_steps {
                    errs.push(ValidationError::InvalidSteps(dev));
                }
            }
        }

        // Slack per island, only meaningful once bus references are sound.
        if errs.iter().all(|e| !matches!(e, ValidationError::DanglingBus(..))) {
            let islands = self.islands();
            let n_islands = islands.iter().max().map_or(0, |m| m + 1);
            let mut slacks = vec![0usize; n_islands];
            for (i, bus) in self.buses.iter().enumerate() {
                if bus.kind == BusKind::Slack {
                    slacks[islands[i]] += 1;
                }
            }
            for (island, &count) in slacks.iter().enumerate() {
                match count {
                    0 => errs.push(ValidationError::MissingSlack(island)),
                    1 => {}
                    _ => errs.push(ValidationError::MultipleSlack { island, count }),
                }
            }
        }
        errs
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}
