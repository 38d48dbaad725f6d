use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::network::{BusKind, Network};

/// Solver unknowns independent of any particular matrix layout.
///
/// Voltages are stored phase-major (`phase * n_bus + bus`), slack currents
/// per slack bus in bus order then phase, and generator reactive power per
/// generator then phase. Generator outputs on slack buses are filled in from
/// the slack currents after a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub phases: usize,
    pub n_bus: usize,
    pub voltages: Vec<Complex64>,
    pub slack_currents: Vec<Complex64>,
    pub gen_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("state has {found} but the network needs {expected}")]
pub struct DimensionMismatch {
    pub expected: String,
    pub found: String,
}

impl StateVector {
    /// Every bus at `mag∠ang` (radians) with the balanced phase offsets.
    pub fn uniform(net: &Network, mag: f64, ang: f64) -> Self {
        let nph = net.phases();
        let nb = net.buses.len();
        let mut voltages = Vec::with_capacity(nph * nb);
        for p in 0..nph {
            let v = Complex64::from_polar(mag, ang + net.domain.angle_offset(p));
            voltages.extend(std::iter::repeat(v).take(nb));
        }
        let n_slack = net.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        let gen_q = net.generators.iter().flat_map(|g| g.q.iter().copied()).collect();
        StateVector {
            phases: nph,
            n_bus: nb,
            voltages,
            slack_currents: vec![Complex64::new(0.0, 0.0); n_slack * nph],
            gen_q,
        }
    }

    pub fn flat(net: &Network) -> Self {
        let mut s = Self::uniform(net, 1.0, 0.0);
        s.gen_q.iter_mut().for_each(|q| *q = 0.0);
        s
    }

    pub fn voltage(&self, bus: usize, phase: usize) -> Complex64 {
        self.voltages[phase * self.n_bus + bus]
    }

    pub fn set_voltage(&mut self, bus: usize, phase: usize, v: Complex64) {
        self.voltages[phase * self.n_bus + bus] = v;
    }

    pub fn q(&self, gen: usize, phase: usize) -> f64 {
        self.gen_q[gen * self.phases + phase]
    }

    pub fn set_q(&mut self, gen: usize, phase: usize, q: f64) {
        self.gen_q[gen * self.phases + phase] = q;
    }

    pub fn check_dims(&self, net: &Network) -> Result<(), DimensionMismatch> {
        let n_slack = net.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        let want = (net.phases(), net.buses.len(), net.generators.len() * net.phases(), n_slack * net.phases());
        let have = (self.phases, self.n_bus, self.gen_q.len(), self.slack_currents.len());
        if want != have || self.voltages.len() != self.phases * self.n_bus {
            return Err(DimensionMismatch {
                expected: format!("{} phases, {} buses, {} generator slots, {} slack slots", want.0, want.1, want.2, want.3),
                found: format!("{} phases, {} buses, {} generator slots, {} slack slots", have.0, have.1, have.2, have.3),
            });
        }
        Ok(())
    }

    /// Largest componentwise voltage difference to `other`.
    pub fn max_voltage_diff(&self, other: &StateVector) -> f64 {
        self.voltages
            .iter()
            .zip(&other.voltages)
            .map(|(a, b)| (a.re - b.re).abs().max((a.im - b.im).abs()))
            .fold(0.0, f64::max)
    }
}
