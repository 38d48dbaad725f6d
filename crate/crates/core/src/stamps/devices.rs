//! Nonlinear device current equations and their partial derivatives in
//! rectangular coordinates.
//!
//! Derivatives are returned as complex numbers: `d_vr = ∂I_R/∂V_R + j ∂I_I/∂V_R`
//! and likewise for `d_vi`.

use num_complex::Complex64;

/// Below this squared magnitude a voltage is treated as zero.
pub const MIN_VOLTAGE_SQ: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearized {
    pub i: Complex64,
    pub d_vr: Complex64,
    pub d_vi: Complex64,
}

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Current drawn by a constant complex power `s` at voltage `v`:
/// `I = conj(s / v)`.
pub fn constant_power(s: Complex64, v: Complex64) -> Option<Linearized> {
    let d = v.norm_sqr();
    if d < MIN_VOLTAGE_SQ {
        return None;
    }
    let sc = s.conj();
    Some(Linearized {
        i: sc * v / d,
        d_vr: sc * (1.0 / d - v * (2.0 * v.re) / (d * d)),
        d_vi: sc * (J / d - v * (2.0 * v.im) / (d * d)),
    })
}

/// Constant-magnitude current drawing `ipq = I_P + jI_Q` at 1 pu: magnitude
/// `|ipq|` at angle `δ - atan2(I_Q, I_P)`.
pub fn constant_current(ipq: Complex64, v: Complex64) -> Option<Linearized> {
    let d = v.norm_sqr();
    if d < MIN_VOLTAGE_SQ {
        return None;
    }
    let m = d.sqrt();
    let c = ipq.conj();
    let m3 = m * d;
    Some(Linearized {
        i: c * v / m,
        d_vr: c * (1.0 / m - v * v.re / m3),
        d_vi: c * (J / m - v * v.im / m3),
    })
}

/// Generator current `conj((P + jQ) / V)` with its sensitivity to `Q`.
pub fn generator(p: f64, q: f64, v: Complex64) -> Option<(Linearized, Complex64)> {
    let lin = constant_power(Complex64::new(p, q), v)?;
    let d = v.norm_sqr();
    Some((lin, Complex64::new(v.im / d, -v.re / d)))
}

/// Reactive power recovered from a generator current at voltage `v`
/// (inverse of [`generator`] in `Q`).
pub fn generator_q(i: Complex64, v: Complex64) -> f64 {
    i.re * v.im - i.im * v.re
}

/// Real power recovered from a generator current at voltage `v`.
pub fn generator_p(i: Complex64, v: Complex64) -> f64 {
    i.re * v.re + i.im * v.im
}

/// Total ZIP load current (impedance admittance `y`, current part `ipq`,
/// power part `s`). Parts that are zero contribute nothing and never
/// require a nonzero voltage.
pub fn zip(y: Complex64, ipq: Complex64, s: Complex64, v: Complex64) -> Option<Linearized> {
    let mut out = Linearized { i: y * v, d_vr: y, d_vi: y * J };
    if s.norm_sqr() > 0.0 {
        let l = constant_power(s, v)?;
        out.i += l.i;
        out.d_vr += l.d_vr;
        out.d_vi += l.d_vi;
    }
    if ipq.norm_sqr() > 0.0 {
        let l = constant_current(ipq, v)?;
        out.i += l.i;
        out.d_vr += l.d_vr;
        out.d_vi += l.d_vi;
    }
    Some(out)
}
