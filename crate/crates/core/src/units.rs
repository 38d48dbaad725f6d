//! Per-unit normalization.
//!
//! A physical-unit network uses the same [`Network`] type with powers in MW,
//! MVAr or MVA, impedances in ohms and admittances in siemens referred to
//! the bus base voltage in kV (the `from` bus for two-terminal devices).

use num_complex::Complex64;

use crate::network::{Network, PhaseMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UnitError {
    #[error("base MVA must be positive, got {0}")]
    BaseMva(f64),
    #[error("bus {0} has non-positive base kV {1}")]
    BaseKv(u32, f64),
}

/// System base for per-unit conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub base_mva: f64,
}

impl PerUnitBase {
    pub fn new(base_mva: f64) -> Result<Self, UnitError> {
        if base_mva > 0.0 && base_mva.is_finite() {
            Ok(PerUnitBase { base_mva })
        } else {
            Err(UnitError::BaseMva(base_mva))
        }
    }

    /// Base impedance in ohms for a bus at `base_kv`.
    pub fn z_base(&self, base_kv: f64) -> f64 {
        base_kv * base_kv / self.base_mva
    }

    pub fn power_to_pu(&self, mva: f64) -> f64 {
        mva / self.base_mva
    }

    pub fn power_from_pu(&self, pu: f64) -> f64 {
        pu * self.base_mva
    }

    pub fn ohms_to_pu(&self, ohms: Complex64, base_kv: f64) -> Complex64 {
        ohms / self.z_base(base_kv)
    }

    pub fn siemens_to_pu(&self, siemens: Complex64, base_kv: f64) -> Complex64 {
        siemens * self.z_base(base_kv)
    }
}

#[derive(Clone, Copy)]
enum Direction {
    ToPu,
    FromPu,
}

/// Converts a physical-unit network to per-unit on `base_mva`.
pub fn to_per_unit(raw: &Network, base_mva: f64) -> Result<Network, UnitError> {
    convert(raw, base_mva, Direction::ToPu)
}

/// Inverse of [`to_per_unit`].
pub fn from_per_unit(net: &Network) -> Result<Network, UnitError> {
    convert(net, net.base_mva, Direction::FromPu)
}

fn convert(src: &Network, base_mva: f64, dir: Direction) -> Result<Network, UnitError> {
    let base = PerUnitBase::new(base_mva)?;
    for b in &src.buses {
        if !(b.base_kv > 0.0) {
            return Err(UnitError::BaseKv(b.id, b.base_kv));
        }
    }
    let mut out = src.clone();
    out.base_mva = base_mva;

    // Power quantities scale by 1/S_base; admittances by Z_base and
    // impedances by 1/Z_base.
    let s = match dir {
        Direction::ToPu => 1.0 / base.base_mva,
        Direction::FromPu => base.base_mva,
    };
    let y_scale = |kv: f64| match dir {
        Direction::ToPu => base.z_base(kv),
        Direction::FromPu => 1.0 / base.z_base(kv),
    };
    let kv = |bus: usize| src.buses[bus].base_kv;

    for g in &mut out.generators {
        for v in [&mut g.p, &mut g.q, &mut g.q_min, &mut g.q_max] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
    for l in &mut out.zip_loads {
        let ys = y_scale(kv(l.bus));
        l.impedance.iter_mut().flatten().for_each(|z| *z /= ys);
        l.current.iter_mut().for_each(|x| *x *= s);
        l.power.iter_mut().for_each(|x| *x *= s);
    }
    for l in &mut out.big_loads {
        let ys = y_scale(kv(l.bus));
        l.alpha.iter_mut().for_each(|x| *x *= s);
        l.y.iter_mut().for_each(|y| *y *= ys);
    }
    for b in &mut out.branches {
        let ys = y_scale(kv(b.from));
        b.series = scale_matrix(&b.series, ys);
        b.charging = scale_matrix(&b.charging, ys);
        b.rating *= s;
    }
    for t in &mut out.transformers {
        let ys = y_scale(kv(t.from));
        t.series.iter_mut().for_each(|y| *y *= ys);
        t.rating *= s;
    }
    for sh in &mut out.shunts {
        let ys = y_scale(kv(sh.bus));
        sh.y.iter_mut().for_each(|y| *y *= ys);
        if let Some(sw) = &mut sh.switched {
            sw.block.iter_mut().for_each(|y| *y *= ys);
        }
    }
    Ok(out)
}

fn scale_matrix(m: &PhaseMatrix, s: f64) -> PhaseMatrix {
    m.scale(s)
}
