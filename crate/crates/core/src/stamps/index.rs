use std::collections::BTreeSet;

use crate::network::{BusKind, Network};
use crate::state::StateVector;

/// Generator taking part in a voltage-control group. Its reactive output
/// is `offset + share * Q_group`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub gen: usize,
    pub share: f64,
    pub offset: f64,
}

/// One voltage-magnitude constraint with its auxiliary unknown (the total
/// reactive output of the generators regulating `bus` on `phase`).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGroup {
    pub bus: usize,
    pub phase: usize,
    pub v_set: f64,
    pub members: Vec<GroupMember>,
}

/// Row/column numbering of the linearized system.
///
/// Layout: interleaved `(V_R, V_I)` per node with nodes phase-major, then
/// `(I_R, I_I)` slack source currents, then one reactive-power unknown per
/// control group.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub phases: usize,
    pub n_bus: usize,
    pub slack_buses: Vec<usize>,
    slack_ordinal: Vec<Option<usize>>,
    pub groups: Vec<ControlGroup>,
    gen_group: Vec<Option<usize>>,
    pub dim: usize,
}

impl IndexMap {
    /// `pinned` lists `(generator, phase)` pairs whose reactive output is
    /// fixed by the outer limit loop.
    pub fn build(net: &Network, pinned: &BTreeSet<(usize, usize)>) -> Self {
        let nph = net.phases();
        let nb = net.buses.len();
        let slack_buses: Vec<usize> =
            (0..nb).filter(|&i| net.buses[i].kind == BusKind::Slack).collect();
        let mut slack_ordinal = vec![None; nb];
        for (k, &b) in slack_buses.iter().enumerate() {
            slack_ordinal[b] = Some(k);
        }

        let mut groups: Vec<ControlGroup> = Vec::new();
        let mut gen_group = vec![None; net.generators.len() * nph];
        for p in 0..nph {
            for (gi, g) in net.generators.iter().enumerate() {
                let Some(w) = g.regulated_bus else { continue };
                if !g.in_service || slack_ordinal[g.bus].is_some() || slack_ordinal[w].is_some() {
                    continue;
                }
                if pinned.contains(&(gi, p)) {
                    continue;
                }
                let Some(v_set) = net.buses[w].v_set else { continue };
                let k = match groups.iter().position(|c| c.bus == w && c.phase == p) {
                    Some(k) => k,
                    None => {
                        groups.push(ControlGroup { bus: w, phase: p, v_set, members: Vec::new() });
                        groups.len() - 1
                    }
                };
                groups[k].members.push(GroupMember { gen: gi, share: 0.0, offset: 0.0 });
                gen_group[gi * nph + p] = Some(k);
            }
        }
        for grp in &mut groups {
            let (mut lo_sum, mut range_sum, mut finite) = (0.0, 0.0, true);
            for m in &grp.members {
                let g = &net.generators[m.gen];
                let (lo, hi) = (g.q_min[grp.phase], g.q_max[grp.phase]);
                finite &= lo.is_finite() && hi.is_finite();
                lo_sum += lo;
                range_sum += hi - lo;
            }
            let count = grp.members.len() as f64;
            for m in &mut grp.members {
                let g = &net.generators[m.gen];
                if finite && range_sum > 0.0 {
                    m.share = (g.q_max[grp.phase] - g.q_min[grp.phase]) / range_sum;
                    m.offset = g.q_min[grp.phase] - m.share * lo_sum;
                } else {
                    m.share = 1.0 / count;
                    m.offset = 0.0;
                }
            }
        }

        let dim = 2 * nb * nph + 2 * slack_buses.len() * nph + groups.len();
        IndexMap { phases: nph, n_bus: nb, slack_buses, slack_ordinal, groups, gen_group, dim }
    }

    pub fn node(&self, bus: usize, phase: usize) -> usize {
        phase * self.n_bus + bus
    }

    pub fn vr(&self, bus: usize, phase: usize) -> usize {
        2 * self.node(bus, phase)
    }

    pub fn vi(&self, bus: usize, phase: usize) -> usize {
        2 * self.node(bus, phase) + 1
    }

    pub fn voltage_vars(&self) -> usize {
        2 * self.n_bus * self.phases
    }

    pub fn slack_ordinal(&self, bus: usize) -> Option<usize> {
        self.slack_ordinal[bus]
    }

    /// `(I_R, I_I)` unknowns of the slack source at `bus`.
    pub fn slack_vars(&self, bus: usize, phase: usize) -> Option<(usize, usize)> {
        let k = self.slack_ordinal[bus]?;
        let base = self.voltage_vars() + 2 * (k * self.phases + phase);
        Some((base, base + 1))
    }

    pub fn group_var(&self, group: usize) -> usize {
        self.voltage_vars() + 2 * self.slack_buses.len() * self.phases + group
    }

    pub fn gen_group(&self, gen: usize, phase: usize) -> Option<usize> {
        self.gen_group[gen * self.phases + phase]
    }

    /// Total reactive output of a group according to `state`.
    pub fn group_q(&self, group: usize, state: &StateVector) -> f64 {
        let grp = &self.groups[group];
        grp.members.iter().map(|m| state.q(m.gen, grp.phase)).sum()
    }

    /// Redistributes each group's total reactive output among its members.
    pub fn normalize(&self, state: &mut StateVector) {
        for (k, grp) in self.groups.iter().enumerate() {
            let total = self.group_q(k, state);
            for m in &grp.members {
                state.set_q(m.gen, grp.phase, m.offset + m.share * total);
            }
        }
    }

    pub fn pack(&self, state: &StateVector) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for p in 0..self.phases {
            for b in 0..self.n_bus {
                let v = state.voltage(b, p);
                x[self.vr(b, p)] = v.re;
                x[self.vi(b, p)] = v.im;
            }
        }
        for &b in &self.slack_buses {
            for p in 0..self.phases {
                let (r, i) = self.slack_vars(b, p).unwrap();
                let k = self.slack_ordinal[b].unwrap();
                let cur = state.slack_currents[k * self.phases + p];
                x[r] = cur.re;
                x[i] = cur.im;
            }
        }
        for k in 0..self.groups.len() {
            x[self.group_var(k)] = self.group_q(k, state);
        }
        x
    }

    /// Writes `x` back into `state`, distributing group totals to members.
    pub fn unpack(&self, x: &[f64], state: &mut StateVector) {
        for p in 0..self.phases {
            for b in 0..self.n_bus {
                state.set_voltage(b, p, num_complex::Complex64::new(x[self.vr(b, p)], x[self.vi(b, p)]));
            }
        }
        for &b in &self.slack_buses {
            let k = self.slack_ordinal[b].unwrap();
            for p in 0..self.phases {
                let (r, i) = self.slack_vars(b, p).unwrap();
                state.slack_currents[k * self.phases + p] = num_complex::Complex64::new(x[r], x[i]);
            }
        }
        for (k, grp) in self.groups.iter().enumerate() {
            let total = x[self.group_var(k)];
            for m in &grp.members {
                state.set_q(m.gen, grp.phase, m.offset + m.share * total);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::two_bus;
    use crate::network::{Bus, Generator};

    fn gen(id: u32, bus: usize, reg: usize, lo: f64, hi: f64) -> Generator {
        Generator {
            id,
            bus,
            p: vec![0.1],
            q: vec![0.0],
            q_min: vec![lo],
            q_max: vec![hi],
            regulated_bus: Some(reg),
            in_service: true,
        }
    }

    #[test]
    fn layout_is_bijective() {
        let mut net = two_bus();
        net.buses.push(Bus { v_set: Some(1.02), ..Bus::new(3, BusKind::PV) });
        let mut br = net.branches[0].clone();
        br.from = 1;
        br.to = 2;
        net.branches.push(br);
        net.generators.push(gen(1, 2, 2, -1.0, 1.0));
        let map = IndexMap::build(&net, &BTreeSet::new());
        assert_eq!(map.dim, 6 + 2 + 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|b| [map.vr(b, 0), map.vi(b, 0)]).collect();
        let (r, i) = map.slack_vars(0, 0).unwrap();
        seen.extend([r, i, map.group_var(0)]);
        seen.sort();
        assert_eq!(seen, (0..map.dim).collect::<Vec<_>>());
    }

    #[test]
    fn shared_group_shares_by_range() {
        let mut net = two_bus();
        net.buses[1].v_set = Some(1.0);
        net.buses[1].kind = BusKind::PV;
        net.generators.push(gen(1, 1, 1, -1.0, 1.0));
        net.generators.push(gen(2, 1, 1, 0.0, 6.0));
        let map = IndexMap::build(&net, &BTreeSet::new());
        assert_eq!(map.groups.len(), 1);
        let mut st = StateVector::flat(&net);
        st.set_q(0, 0, 3.0);
        map.normalize(&mut st);
        // Total 3 between [-1, 7]: both generators at the same fraction of range.
        let f0 = (st.q(0, 0) + 1.0) / 2.0;
        let f1 = st.q(1, 0) / 6.0;
        assert!((f0 - f1).abs() < 1e-15);
        assert!((st.q(0, 0) + st.q(1, 0) - 3.0).abs() < 1e-15);

        let pinned = BTreeSet::from([(0, 0)]);
        let map = IndexMap::build(&net, &pinned);
        assert_eq!(map.groups[0].members.len(), 1);
        assert_eq!(map.gen_group(0, 0), None);
    }
}
