//! JSON case format, used for three-phase feeders and for any network the
//! tabular format cannot hold. All values are per-unit on `base_mva`
//! (per phase), angles in degrees, complex numbers as `[re, im]`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::CaseError;
use crate::network::{
    BigLoad, Branch, Bus, BusKind, Connection, Generator, Network, PhaseDomain, PhaseMatrix, Shunt,
    SwitchedShunt, TapControl, Transformer, ZipLoad,
};

type C = [f64; 2];

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum JsonDomain {
    PositiveSequence,
    ThreePhase,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum JsonKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCase {
    name: String,
    domain: JsonDomain,
    base_mva: f64,
    buses: Vec<JsonBus>,
    #[serde(default)]
    generators: Vec<JsonGen>,
    #[serde(default)]
    loads: Vec<JsonLoad>,
    #[serde(default)]
    branches: Vec<JsonBranch>,
    #[serde(default)]
    transformers: Vec<JsonTransformer>,
    #[serde(default)]
    shunts: Vec<JsonShunt>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBus {
    id: u32,
    #[serde(rename = "type")]
    kind: JsonKind,
    #[serde(default)]
    base_kv: f64,
    #[serde(default)]
    v_set: Option<f64>,
    #[serde(default)]
    angle_deg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGen {
    id: u32,
    bus: u32,
    p: Vec<f64>,
    #[serde(default)]
    q: Option<Vec<f64>>,
    #[serde(default)]
    q_min: Option<Vec<f64>>,
    #[serde(default)]
    q_max: Option<Vec<f64>>,
    #[serde(default)]
    regulated_bus: Option<u32>,
    #[serde(default = "yes")]
    in_service: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "model")]
enum JsonLoadModel {
    Zip {
        #[serde(default)]
        impedance: Option<Vec<Option<C>>>,
        #[serde(default)]
        current: Option<Vec<C>>,
        #[serde(default)]
        power: Option<Vec<C>>,
    },
    Big {
        alpha: Vec<C>,
        y: Vec<C>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonLoad {
    id: u32,
    bus: u32,
    #[serde(default = "wye")]
    connection: Connection,
    #[serde(flatten)]
    model: JsonLoadModel,
}

fn wye() -> Connection {
    Connection::Wye
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBranch {
    id: u32,
    from: u32,
    to: u32,
    /// Series admittance matrix rows.
    y: Vec<Vec<C>>,
    #[serde(default)]
    charging: Option<Vec<Vec<C>>>,
    #[serde(default)]
    rating: f64,
    #[serde(default = "yes")]
    in_service: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTapControl {
    bus: u32,
    v_target: f64,
    #[serde(default)]
    deadband: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTransformer {
    id: u32,
    from: u32,
    to: u32,
    y: Vec<C>,
    #[serde(default)]
    tap: Option<Vec<f64>>,
    #[serde(default)]
    shift_deg: Option<Vec<f64>>,
    #[serde(default)]
    tap_min: Option<f64>,
    #[serde(default)]
    tap_max: Option<f64>,
    #[serde(default)]
    tap_step: f64,
    #[serde(default)]
    control: Option<JsonTapControl>,
    #[serde(default)]
    rating: f64,
    #[serde(default = "yes")]
    in_service: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSwitched {
    block: Vec<C>,
    steps: i32,
    min_steps: i32,
    max_steps: i32,
    v_target: f64,
    #[serde(default)]
    deadband: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonShunt {
    id: u32,
    bus: u32,
    y: Vec<C>,
    #[serde(default)]
    switched: Option<JsonSwitched>,
}

fn cx(c: C) -> Complex64 {
    Complex64::new(c[0], c[1])
}

fn pair(c: Complex64) -> C {
    [c.re, c.im]
}

fn cvec(v: &[C]) -> Vec<Complex64> {
    v.iter().map(|&c| cx(c)).collect()
}

fn pvec(v: &[Complex64]) -> Vec<C> {
    v.iter().map(|&c| pair(c)).collect()
}

fn matrix(rows: &[Vec<C>]) -> PhaseMatrix {
    let rows: Vec<Vec<Complex64>> = rows.iter().map(|r| cvec(r)).collect();
    PhaseMatrix::from_rows(&rows)
}

fn rows(m: &PhaseMatrix) -> Vec<Vec<C>> {
    m.rows().iter().map(|r| pvec(r)).collect()
}

fn semantic(record: String, message: impl Into<String>) -> CaseError {
    CaseError::Semantic { record, message: message.into() }
}

/// Per-phase vectors must carry one entry per phase; matrices must be square
/// of that size. Phase counts are checked again by [`Network::validate`],
/// but a malformed matrix would be silently truncated by `PhaseMatrix`.
fn check_matrix(record: &str, rows: &[Vec<C>], n: usize) -> Result<(), CaseError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(semantic(record.to_string(), format!("admittance matrix must be {n}x{n}")));
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<Network, CaseError> {
    let case: JsonCase = serde_json::from_str(text).map_err(|e| CaseError::Json { line: e.line(), message: e.to_string() })?;
    let domain = match case.domain {
        JsonDomain::PositiveSequence => PhaseDomain::PositiveSequence,
        JsonDomain::ThreePhase => PhaseDomain::ThreePhase,
    };
    let n = domain.phases();
    let mut net = Network::new(&case.name, domain, case.base_mva);
    let mut ix = BTreeMap::new();
    for b in &case.buses {
        if ix.insert(b.id, net.buses.len()).is_some() {
            return Err(semantic(format!("bus {}", b.id), "duplicate bus id"));
        }
        net.buses.push(Bus {
            id: b.id,
            kind: match b.kind {
                JsonKind::Slack => BusKind::Slack,
                JsonKind::Pv => BusKind::PV,
                JsonKind::Pq => BusKind::PQ,
            },
            base_kv: b.base_kv,
            v_set: b.v_set,
            angle: b.angle_deg.to_radians(),
        });
    }
    let bus = |rec: &str, id: u32| {
        ix.get(&id).copied().ok_or_else(|| semantic(rec.to_string(), format!("references undefined bus {id}")))
    };
    let zero = Complex64::new(0.0, 0.0);

    for g in &case.generators {
        let rec = format!("generator {}", g.id);
        let b = bus(&rec, g.bus)?;
        net.generators.push(Generator {
            id: g.id,
            bus: b,
            p: g.p.clone(),
            q: g.q.clone().unwrap_or_else(|| vec![0.0; n]),
            q_min: g.q_min.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]),
            q_max: g.q_max.clone().unwrap_or_else(|| vec![f64::INFINITY; n]),
            regulated_bus: g.regulated_bus.map(|r| bus(&rec, r)).transpose()?,
            in_service: g.in_service,
        });
    }
    for l in &case.loads {
        let rec = format!("load {}", l.id);
        let b = bus(&rec, l.bus)?;
        match &l.model {
            JsonLoadModel::Zip { impedance, current, power } => net.zip_loads.push(ZipLoad {
                id: l.id,
                bus: b,
                connection: l.connection,
                impedance: impedance.as_ref().map(|v| v.iter().map(|z| z.map(cx)).collect()).unwrap_or_else(|| vec![None; n]),
                current: current.as_deref().map(cvec).unwrap_or_else(|| vec![zero; n]),
                power: power.as_deref().map(cvec).unwrap_or_else(|| vec![zero; n]),
            }),
            JsonLoadModel::Big { alpha, y } => net.big_loads.push(BigLoad {
                id: l.id,
                bus: b,
                connection: l.connection,
                alpha: cvec(alpha),
                y: cvec(y),
            }),
        }
    }
    for br in &case.branches {
        let rec = format!("branch {}", br.id);
        check_matrix(&rec, &br.y, n)?;
        let charging = match &br.charging {
            Some(c) => {
                check_matrix(&rec, c, n)?;
                matrix(c)
            }
            None => PhaseMatrix::zeros(n),
        };
        net.branches.push(Branch {
            id: br.id,
            from: bus(&rec, br.from)?,
            to: bus(&rec, br.to)?,
            series: matrix(&br.y),
            charging,
            rating: br.rating,
            in_service: br.in_service,
        });
    }
    for t in &case.transformers {
        let rec = format!("transformer {}", t.id);
        let tap = t.tap.clone().unwrap_or_else(|| vec![1.0; n]);
        let first = tap.first().copied().unwrap_or(1.0);
        net.transformers.push(Transformer {
            id: t.id,
            from: bus(&rec, t.from)?,
            to: bus(&rec, t.to)?,
            series: cvec(&t.y),
            shift: t.shift_deg.as_ref().map(|s| s.iter().map(|d| d.to_radians()).collect()).unwrap_or_else(|| vec![0.0; n]),
            tap_min: t.tap_min.unwrap_or(first),
            tap_max: t.tap_max.unwrap_or(first),
            tap,
            tap_step: t.tap_step,
            control: match &t.control {
                Some(c) => Some(TapControl { bus: bus(&rec, c.bus)?, v_target: c.v_target, deadband: c.deadband }),
                None => None,
            },
            rating: t.rating,
            in_service: t.in_service,
        });
    }
    for s in &case.shunts {
        let rec = format!("shunt {}", s.id);
        net.shunts.push(Shunt {
            id: s.id,
            bus: bus(&rec, s.bus)?,
            y: cvec(&s.y),
            switched: s.switched.as_ref().map(|w| SwitchedShunt {
                block: cvec(&w.block),
                steps: w.steps,
                min_steps: w.min_steps,
                max_steps: w.max_steps,
                v_target: w.v_target,
                deadband: w.deadband,
            }),
        });
    }
    Ok(net)
}

pub fn write(net: &Network) -> Result<String, CaseError> {
    let id = |b: usize| net.buses[b].id;
    let mut loads: Vec<JsonLoad> = net
        .zip_loads
        .iter()
        .map(|l| JsonLoad {
            id: l.id,
            bus: id(l.bus),
            connection: l.connection,
            model: JsonLoadModel::Zip {
                impedance: Some(l.impedance.iter().map(|z| z.map(pair)).collect()),
                current: Some(pvec(&l.current)),
                power: Some(pvec(&l.power)),
            },
        })
        .collect();
    loads.extend(net.big_loads.iter().map(|l| JsonLoad {
        id: l.id,
        bus: id(l.bus),
        connection: l.connection,
        model: JsonLoadModel::Big { alpha: pvec(&l.alpha), y: pvec(&l.y) },
    }));
    let case = JsonCase {
        name: net.name.clone(),
        domain: match net.domain {
            PhaseDomain::PositiveSequence => JsonDomain::PositiveSequence,
            PhaseDomain::ThreePhase => JsonDomain::ThreePhase,
        },
        base_mva: net.base_mva,
        buses: net
            .buses
            .iter()
            .map(|b| JsonBus {
                id: b.id,
                kind: match b.kind {
                    BusKind::Slack => JsonKind::Slack,
                    BusKind::PV => JsonKind::Pv,
                    BusKind::PQ => JsonKind::Pq,
                },
                base_kv: b.base_kv,
                v_set: b.v_set,
                angle_deg: b.angle.to_degrees(),
            })
            .collect(),
        generators: net
            .generators
            .iter()
            .map(|g| JsonGen {
                id: g.id,
                bus: id(g.bus),
                p: g.p.clone(),
                q: Some(g.q.clone()),
                // JSON has no infinities; absent limits mean unlimited.
                q_min: g.q_min.iter().all(|v| v.is_finite()).then(|| g.q_min.clone()),
                q_max: g.q_max.iter().all(|v| v.is_finite()).then(|| g.q_max.clone()),
                regulated_bus: g.regulated_bus.map(id),
                in_service: g.in_service,
            })
            .collect(),
        loads,
        branches: net
            .branches
            .iter()
            .map(|b| JsonBranch {
                id: b.id,
                from: id(b.from),
                to: id(b.to),
                y: rows(&b.series),
                charging: Some(rows(&b.charging)),
                rating: b.rating,
                in_service: b.in_service,
            })
            .collect(),
        transformers: net
            .transformers
            .iter()
            .map(|t| JsonTransformer {
                id: t.id,
                from: id(t.from),
                to: id(t.to),
                y: pvec(&t.series),
                tap: Some(t.tap.clone()),
                shift_deg: Some(t.shift.iter().map(|s| s.to_degrees()).collect()),
                tap_min: Some(t.tap_min),
                tap_max: Some(t.tap_max),
                tap_step: t.tap_step,
                control: t.control.as_ref().map(|c| JsonTapControl { bus: id(c.bus), v_target: c.v_target, deadband: c.deadband }),
                rating: t.rating,
                in_service: t.in_service,
            })
            .collect(),
        shunts: net
            .shunts
            .iter()
            .map(|s| JsonShunt {
                id: s.id,
                bus: id(s.bus),
                y: pvec(&s.y),
                switched: s.switched.as_ref().map(|w| JsonSwitched {
                    block: pvec(&w.block),
                    steps: w.steps,
                    min_steps: w.min_steps,
                    max_steps: w.max_steps,
                    v_target: w.v_target,
                    deadband: w.deadband,
                }),
            })
            .collect(),
    };
    let mixed = net.generators.iter().any(|g| {
        let fin = |v: &[f64]| v.iter().any(|x| x.is_finite()) && !v.iter().all(|x| x.is_finite());
        fin(&g.q_min) || fin(&g.q_max)
    });
    if mixed {
        return Err(CaseError::Unrepresentable("generator with some but not all Q limits finite".into()));
    }
    serde_json::to_string_pretty(&case).map_err(|e| CaseError::Json { line: 0, message: e.to_string() })
}
