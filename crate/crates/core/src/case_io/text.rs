//! Tabular positive-sequence case format.
//!
//! Sections `BUS`, `GEN`, `BRANCH`, `TRANSFORMER` and `SHUNT` each hold one
//! record per line and end with `END`. Records start with fixed positional
//! columns and may be followed by `key=value` options. `#` and `%` start
//! comments. See `docs/case_format.md` for the column lists.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;

use super::CaseError;
use crate::network::{
    Branch, Bus, BusKind, Connection, Generator, Network, PhaseDomain, PhaseMatrix, Shunt,
    SwitchedShunt, TapControl, Transformer, ZipLoad,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Bus,
    Gen,
    Branch,
    Transformer,
    Shunt,
}

impl Section {
    fn from_keyword(w: &str) -> Option<Self> {
        match w.to_ascii_uppercase().as_str() {
            "BUS" => Some(Section::Bus),
            "GEN" => Some(Section::Gen),
            "BRANCH" => Some(Section::Branch),
            "TRANSFORMER" => Some(Section::Transformer),
            "SHUNT" => Some(Section::Shunt),
            _ => None,
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            Section::Bus => &["id", "type", "pd", "qd", "base_kv", "vm", "va"],
            Section::Gen => &["id", "bus", "pg", "qg"],
            Section::Branch => &["id", "from", "to", "r", "x", "b"],
            Section::Transformer => &["id", "from", "to", "r", "x", "tap", "shift"],
            Section::Shunt => &["id", "bus", "gs", "bs"],
        }
    }

    fn options(self) -> &'static [&'static str] {
        match self {
            Section::Bus => &[],
            Section::Gen => &["qmin", "qmax", "status", "reg"],
            Section::Branch => &["rate", "status"],
            Section::Transformer => &["tap_min", "tap_max", "step", "ctrl", "vtarget", "deadband", "rate", "status"],
            Section::Shunt => &["block", "steps", "min", "max", "vtarget", "deadband"],
        }
    }
}

struct Record<'a> {
    line: usize,
    cols: Vec<&'a str>,
    opts: BTreeMap<&'a str, &'a str>,
}

impl<'a> Record<'a> {
    fn num(&self, i: usize) -> Result<f64, CaseError> {
        let s = self.cols[i];
        s.parse::<f64>().map_err(|_| CaseError::syntax(self.line, format!("expected a number, found `{s}`")))
    }

    fn id(&self, i: usize) -> Result<u32, CaseError> {
        let s = self.cols[i];
        s.parse::<u32>().map_err(|_| CaseError::syntax(self.line, format!("expected an integer id, found `{s}`")))
    }

    fn opt_num(&self, key: &str) -> Result<Option<f64>, CaseError> {
        match self.opts.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| CaseError::syntax(self.line, format!("option {key}: expected a number, found `{s}`"))),
        }
    }

    fn opt_int(&self, key: &str) -> Result<Option<i64>, CaseError> {
        match self.opts.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<i64>()
                .map(Some)
                .map_err(|_| CaseError::syntax(self.line, format!("option {key}: expected an integer, found `{s}`"))),
        }
    }

    fn status(&self) -> Result<bool, CaseError> {
        Ok(self.opt_int("status")?.unwrap_or(1) != 0)
    }
}

fn split_record(section: Section, line: usize, text: &str) -> Result<Record<'_>, CaseError> {
    let mut cols = Vec::new();
    let mut opts = BTreeMap::new();
    for tok in text.split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            if !section.options().contains(&k) {
                return Err(CaseError::syntax(line, format!("unknown option `{k}`")));
            }
            if opts.insert(k, v).is_some() {
                return Err(CaseError::syntax(line, format!("option `{k}` given twice")));
            }
        } else if !opts.is_empty() {
            return Err(CaseError::syntax(line, format!("positional column `{tok}` after options")));
        } else {
            cols.push(tok);
        }
    }
    let want = section.columns().len();
    if cols.len() != want {
        return Err(CaseError::syntax(
            line,
            format!("expected {want} columns ({}), found {}", section.columns().join(" "), cols.len()),
        ));
    }
    Ok(Record { line, cols, opts })
}

/// Parses the tabular format. Powers are read in MW/MVAr and converted to
/// per-unit on `BASE_MVA`; impedances are already per-unit.
pub fn parse(text: &str) -> Result<Network, CaseError> {
    let mut name = String::from("case");
    let mut base_mva = None;
    let mut section: Option<(Section, usize)> = None;
    let mut records: Vec<(Section, Record<'_>)> = Vec::new();
    let mut seen = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split(['#', '%']).next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let first = body.split_whitespace().next().unwrap();
        match section {
            Some((sec, _)) => {
                if first.eq_ignore_ascii_case("END") {
                    section = None;
                } else {
                    records.push((sec, split_record(sec, line, body)?));
                }
            }
            None => {
                if let Some(sec) = Section::from_keyword(first) {
                    if seen.contains(&sec) {
                        return Err(CaseError::syntax(line, format!("section {first} repeated")));
                    }
                    seen.push(sec);
                    section = Some((sec, line));
                } else if first.eq_ignore_ascii_case("NAME") {
                    name = body[first.len()..].trim().to_string();
                } else if first.eq_ignore_ascii_case("BASE_MVA") {
                    let v = body[first.len()..].trim();
                    base_mva = Some(v.parse::<f64>().map_err(|_| CaseError::syntax(line, format!("bad base `{v}`")))?);
                } else {
                    return Err(CaseError::syntax(line, format!("unexpected `{first}` outside a section")));
                }
            }
        }
    }
    if let Some((sec, line)) = section {
        return Err(CaseError::syntax(line, format!("section {sec:?} is missing END")));
    }
    let base_mva = base_mva.unwrap_or(100.0);
    if !(base_mva > 0.0) || !base_mva.is_finite() {
        return Err(CaseError::Semantic { record: "BASE_MVA".into(), message: format!("base {base_mva} must be positive") });
    }

    let mut net = Network::new(&name, PhaseDomain::PositiveSequence, base_mva);
    let mut bus_ix: BTreeMap<u32, usize> = BTreeMap::new();
    for (sec, r) in records.iter().filter(|(s, _)| *s == Section::Bus) {
        let _ = sec;
        let id = r.id(0)?;
        let kind = match r.cols[1] {
            "1" => BusKind::PQ,
            "2" => BusKind::PV,
            "3" => BusKind::Slack,
            other => return Err(CaseError::syntax(r.line, format!("unknown bus type code `{other}`"))),
        };
        let (pd, qd, kv, vm, va) = (r.num(2)?, r.num(3)?, r.num(4)?, r.num(5)?, r.num(6)?);
        if bus_ix.insert(id, net.buses.len()).is_some() {
            return Err(CaseError::Semantic { record: format!("bus {id}"), message: "duplicate bus id".into() });
        }
        net.buses.push(Bus {
            id,
            kind,
            base_kv: kv,
            v_set: if kind == BusKind::PQ { None } else { Some(vm) },
            angle: va.to_radians(),
        });
        if pd != 0.0 || qd != 0.0 {
            let s = Complex64::new(pd, qd) / base_mva;
            net.zip_loads.push(ZipLoad::constant_power(id, net.buses.len() - 1, &[s]));
        }
    }
    let bus = |rec: &str, id: u32| -> Result<usize, CaseError> {
        bus_ix
            .get(&id)
            .copied()
            .ok_or_else(|| CaseError::Semantic { record: rec.to_string(), message: format!("references undefined bus {id}") })
    };
    let impedance = |rec: &str, r: f64, x: f64| -> Result<Complex64, CaseError> {
        let z = Complex64::new(r, x);
        if z.norm() == 0.0 {
            return Err(CaseError::Semantic { record: rec.to_string(), message: "zero series impedance".into() });
        }
        Ok(z.inv())
    };

    for (sec, r) in &records {
        match sec {
            Section::Bus => {}
            Section::Gen => {
                let id = r.id(0)?;
                let rec = format!("generator {id}");
                let b = bus(&rec, r.id(1)?)?;
                let reg = match r.opts.get("reg") {
                    None => (net.buses[b].kind == BusKind::PV).then_some(b),
                    Some(&"none") => None,
                    Some(s) => {
                        let rid = s.parse::<u32>().map_err(|_| CaseError::syntax(r.line, format!("option reg: bad bus `{s}`")))?;
                        Some(bus(&rec, rid)?)
                    }
                };
                let to_pu = |v: f64| v / base_mva;
                net.generators.push(Generator {
                    id,
                    bus: b,
                    p: vec![to_pu(r.num(2)?)],
                    q: vec![to_pu(r.num(3)?)],
                    q_min: vec![to_pu(r.opt_num("qmin")?.unwrap_or(f64::NEG_INFINITY))],
                    q_max: vec![to_pu(r.opt_num("qmax")?.unwrap_or(f64::INFINITY))],
                    regulated_bus: reg,
                    in_service: r.status()?,
                });
            }
            Section::Branch => {
                let id = r.id(0)?;
                let rec = format!("branch {id}");
                let (f, t) = (bus(&rec, r.id(1)?)?, bus(&rec, r.id(2)?)?);
                let y = impedance(&rec, r.num(3)?, r.num(4)?)?;
                net.branches.push(Branch {
                    id,
                    from: f,
                    to: t,
                    series: PhaseMatrix::scalar(y),
                    charging: PhaseMatrix::scalar(Complex64::new(0.0, r.num(5)?)),
                    rating: r.opt_num("rate")?.unwrap_or(0.0) / base_mva,
                    in_service: r.status()?,
                });
            }
            Section::Transformer => {
                let id = r.id(0)?;
                let rec = format!("transformer {id}");
                let (f, t) = (bus(&rec, r.id(1)?)?, bus(&rec, r.id(2)?)?);
                let y = impedance(&rec, r.num(3)?, r.num(4)?)?;
                let tap = match r.num(5)? {
                    x if x == 0.0 => 1.0,
                    x => x,
                };
                let control = match r.opt_int("ctrl")? {
                    None => None,
                    Some(cid) => Some(TapControl {
                        bus: bus(&rec, cid as u32)?,
                        v_target: r.opt_num("vtarget")?.unwrap_or(1.0),
                        deadband: r.opt_num("deadband")?.unwrap_or(0.0),
                    }),
                };
                net.transformers.push(Transformer {
                    id,
                    from: f,
                    to: t,
                    series: vec![y],
                    tap: vec![tap],
                    shift: vec![r.num(6)?.to_radians()],
                    tap_min: r.opt_num("tap_min")?.unwrap_or(tap),
                    tap_max: r.opt_num("tap_max")?.unwrap_or(tap),
                    tap_step: r.opt_num("step")?.unwrap_or(0.0),
                    control,
                    rating: r.opt_num("rate")?.unwrap_or(0.0) / base_mva,
                    in_service: r.status()?,
                });
            }
            Section::Shunt => {
                let id = r.id(0)?;
                let rec = format!("shunt {id}");
                let b = bus(&rec, r.id(1)?)?;
                let y = Complex64::new(r.num(2)?, r.num(3)?) / base_mva;
                let switched = match r.opt_num("block")? {
                    None => None,
                    Some(blk) => Some(SwitchedShunt {
                        block: vec![Complex64::new(0.0, blk / base_mva)],
                        steps: r.opt_int("steps")?.unwrap_or(0) as i32,
                        min_steps: r.opt_int("min")?.unwrap_or(0) as i32,
                        max_steps: r.opt_int("max")?.unwrap_or(0) as i32,
                        v_target: r.opt_num("vtarget")?.unwrap_or(1.0),
                        deadband: r.opt_num("deadband")?.unwrap_or(0.0),
                    }),
                };
                net.shunts.push(Shunt { id, bus: b, y: vec![y], switched });
            }
        }
    }
    Ok(net)
}

fn num(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:?}")
    }
}

/// Writes `net` in the tabular format. Only positive-sequence networks whose
/// loads are one wye constant-power load per bus (with the bus id) can be
/// written.
pub fn write(net: &Network) -> Result<String, CaseError> {
    let unrep = |m: String| Err(CaseError::Unrepresentable(m));
    if net.domain != PhaseDomain::PositiveSequence {
        return unrep("three-phase networks need the JSON format".into());
    }
    if !net.big_loads.is_empty() {
        return unrep("linear loads have no tabular record".into());
    }
    let base = net.base_mva;
    let mut load = vec![Complex64::new(0.0, 0.0); net.buses.len()];
    for l in &net.zip_loads {
        let plain = l.connection == Connection::Wye
            && l.impedance[0].is_none()
            && l.current[0] == Complex64::new(0.0, 0.0)
            && l.id == net.buses[l.bus].id
            && load[l.bus] == Complex64::new(0.0, 0.0);
        if !plain {
            return unrep(format!("load {} is not a plain constant-power bus load", l.id));
        }
        load[l.bus] = l.power[0];
    }
    for s in &net.shunts {
        if let Some(sw) = &s.switched {
            if sw.block[0].re != 0.0 {
                return unrep(format!("shunt {} has a conductive switched block", s.id));
            }
        }
    }
    for b in &net.branches {
        if b.charging.get(0, 0).re != 0.0 {
            return unrep(format!("branch {} has conductive charging", b.id));
        }
    }

    let id = |b: usize| net.buses[b].id;
    let mut out = String::new();
    let _ = writeln!(out, "NAME {}", net.name);
    let _ = writeln!(out, "BASE_MVA {}", num(base));
    let _ = writeln!(out, "BUS\n# id type pd qd base_kv vm va");
    for (i, b) in net.buses.iter().enumerate() {
        let code = match b.kind {
            BusKind::PQ => 1,
            BusKind::PV => 2,
            BusKind::Slack => 3,
        };
        let s = load[i] * base;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            b.id,
            code,
            num(s.re),
            num(s.im),
            num(b.base_kv),
            num(b.v_set.unwrap_or(1.0)),
            num(b.angle.to_degrees())
        );
    }
    let _ = writeln!(out, "END\nGEN\n# id bus pg qg [qmin= qmax= status= reg=]");
    for g in &net.generators {
        let reg = match g.regulated_bus {
            Some(w) => id(w).to_string(),
            None => "none".into(),
        };
        let _ = writeln!(
            out,
            "{} {} {} {} qmin={} qmax={} status={} reg={}",
            g.id,
            id(g.bus),
            num(g.p[0] * base),
            num(g.q[0] * base),
            num(g.q_min[0] * base),
            num(g.q_max[0] * base),
            g.in_service as u8,
            reg
        );
    }
    let _ = writeln!(out, "END\nBRANCH\n# id from to r x b [rate= status=]");
    for b in &net.branches {
        let z = b.series.get(0, 0).inv();
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} rate={} status={}",
            b.id,
            id(b.from),
            id(b.to),
            num(z.re),
            num(z.im),
            num(b.charging.get(0, 0).im),
            num(b.rating * base),
            b.in_service as u8
        );
    }
    let _ = writeln!(out, "END\nTRANSFORMER\n# id from to r x tap shift [tap_min= tap_max= step= ctrl= vtarget= deadband= rate= status=]");
    for t in &net.transformers {
        let z = t.series[0].inv();
        let mut line = format!(
            "{} {} {} {} {} {} {} tap_min={} tap_max={} step={}",
            t.id,
            id(t.from),
            id(t.to),
            num(z.re),
            num(z.im),
            num(t.tap[0]),
            num(t.shift[0].to_degrees()),
            num(t.tap_min),
            num(t.tap_max),
            num(t.tap_step)
        );
        if let Some(c) = &t.control {
            let _ = write!(line, " ctrl={} vtarget={} deadband={}", id(c.bus), num(c.v_target), num(c.deadband));
        }
        let _ = writeln!(out, "{line} rate={} status={}", num(t.rating * base), t.in_service as u8);
    }
    let _ = writeln!(out, "END\nSHUNT\n# id bus gs bs [block= steps= min= max= vtarget= deadband=]");
    for s in &net.shunts {
        let y = s.y[0] * base;
        let mut line = format!("{} {} {} {}", s.id, id(s.bus), num(y.re), num(y.im));
        if let Some(sw) = &s.switched {
            let _ = write!(
                line,
                " block={} steps={} min={} max={} vtarget={} deadband={}",
                num(sw.block[0].im * base),
                sw.steps,
                sw.min_steps,
                sw.max_steps,
                num(sw.v_target),
                num(sw.deadband)
            );
        }
        let _ = writeln!(out, "{line}");
    }
    out.push_str("END\n");
    Ok(out)
}
