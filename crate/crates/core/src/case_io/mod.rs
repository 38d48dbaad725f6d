//! Reading and writing cases and solutions.
//!
//! Two case formats are supported: a tabular text format for
//! positive-sequence cases ([`text`]) and JSON for everything, including
//! three-phase feeders ([`json`]). [`parse_case`] picks the format from the
//! first non-blank character. Parsed networks are not validated here; call
//! [`Network::validate`] before solving.

pub mod json;
pub mod text;

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::network::{Network, ValidationError};
use crate::solver::SolveReport;
use crate::state::StateVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{record}: {message}")]
    Semantic { record: String, message: String },
    #[error("JSON (line {line}): {message}")]
    Json { line: usize, message: String },
    #[error("invalid network: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error("cannot be written in this format: {0}")]
    Unrepresentable(String),
}

impl CaseError {
    fn syntax(line: usize, message: impl Into<String>) -> Self {
        CaseError::Syntax { line, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    Text,
    Json,
}

/// Parses a case in either format and refreshes bus kinds from the
/// generators' regulation targets.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let mut net = match text.trim_start().starts_with('{') {
        true => json::parse(text)?,
        false => text::parse(text)?,
    };
    net.refresh_kinds();
    Ok(net)
}

/// Parses and validates.
pub fn load_case(text: &str) -> Result<Network, CaseError> {
    let net = parse_case(text)?;
    let errs = net.validate();
    if errs.is_empty() {
        Ok(net)
    } else {
        Err(CaseError::Invalid(errs))
    }
}

pub fn write_case(net: &Network, format: CaseFormat) -> Result<String, CaseError> {
    match format {
        CaseFormat::Text => text::write(net),
        CaseFormat::Json => json::write(net),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionFormat {
    Csv,
    Json,
}

pub const SOLUTION_HEADER: &str = "bus,phase,vmag_pu,vang_deg,vr_pu,vi_pu";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusVoltage {
    pub bus: u32,
    pub phase: String,
    pub vmag_pu: f64,
    pub vang_deg: f64,
    pub vr_pu: f64,
    pub vi_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub case: String,
    pub voltages: Vec<BusVoltage>,
    /// Full solver state, so a JSON solution restarts exactly.
    pub state: StateVector,
    #[serde(default)]
    pub report: Option<SolveReport>,
}

pub fn bus_voltages(net: &Network, state: &StateVector) -> Vec<BusVoltage> {
    let labels = net.domain.labels();
    let mut out = Vec::with_capacity(net.buses.len() * net.phases());
    for (b, bus) in net.buses.iter().enumerate() {
        for (p, label) in labels.iter().enumerate() {
            let v = state.voltage(b, p);
            out.push(BusVoltage {
                bus: bus.id,
                phase: label.to_string(),
                vmag_pu: v.norm(),
                vang_deg: v.arg().to_degrees(),
                vr_pu: v.re,
                vi_pu: v.im,
            });
        }
    }
    out
}

pub fn write_solution(
    net: &Network,
    state: &StateVector,
    report: Option<&SolveReport>,
    format: SolutionFormat,
) -> String {
    let rows = bus_voltages(net, state);
    match format {
        SolutionFormat::Csv => {
            let mut s = String::from(SOLUTION_HEADER);
            s.push('\n');
            for r in &rows {
                let _ = writeln!(s, "{},{},{:?},{:?},{:?},{:?}", r.bus, r.phase, r.vmag_pu, r.vang_deg, r.vr_pu, r.vi_pu);
            }
            s
        }
        SolutionFormat::Json => {
            let file = SolutionFile { case: net.name.clone(), voltages: rows, state: state.clone(), report: report.cloned() };
            serde_json::to_string_pretty(&file).expect("solution serializes")
        }
    }
}

/// Reads a solution written by [`write_solution`] back into a state for
/// `net`. CSV solutions carry voltages only; reactive outputs come from the
/// network's generator records.
pub fn read_solution(text: &str, net: &Network) -> Result<StateVector, CaseError> {
    if text.trim_start().starts_with('{') {
        let file: SolutionFile =
            serde_json::from_str(text).map_err(|e| CaseError::Json { line: e.line(), message: e.to_string() })?;
        file.state
            .check_dims(net)
            .map_err(|e| CaseError::Semantic { record: "solution".into(), message: e.to_string() })?;
        return Ok(file.state);
    }
    let mut st = StateVector::uniform(net, 1.0, 0.0);
    let labels = net.domain.labels();
    let mut seen = vec![false; st.voltages.len()];
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == SOLUTION_HEADER => {}
        _ => return Err(CaseError::syntax(1, format!("expected header `{SOLUTION_HEADER}`"))),
    }
    for (i, line) in lines {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(CaseError::syntax(i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let id: u32 = f[0].parse().map_err(|_| CaseError::syntax(i + 1, format!("bad bus id `{}`", f[0])))?;
        let b = net
            .bus_index(id)
            .ok_or_else(|| CaseError::Semantic { record: "solution".into(), message: format!("unknown bus {id}") })?;
        let p = labels
            .iter()
            .position(|l| *l == f[1])
            .ok_or_else(|| CaseError::syntax(i + 1, format!("unknown phase `{}`", f[1])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| CaseError::syntax(i + 1, format!("bad number `{s}`")));
        st.set_voltage(b, p, Complex64::new(num(f[4])?, num(f[5])?));
        seen[p * net.buses.len() + b] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let (p, b) = (k / net.buses.len(), k % net.buses.len());
        return Err(CaseError::Semantic {
            record: "solution".into(),
            message: format!("no voltage for bus {} phase {}", net.buses[b].id, labels[p]),
        });
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BusKind, Connection, PhaseDomain};

    const SMALL: &str = "\
NAME small
BASE_MVA 100
BUS
1 3 0 0 230 1.02 0
2 2 20 10 230 1.01 0   # generator bus
3 1 90 30 230 1.0 0
END
GEN
1 1 0 0
2 2 60 0 qmin=-30 qmax=40
END
BRANCH
1 1 2 0.01 0.1 0.02
2 2 3 0.02 0.2 0.0 rate=150
END
TRANSFORMER
1 1 3 0 0.05 0.975 0 tap_min=0.9 tap_max=1.1 step=0.025 ctrl=3 vtarget=1.0 deadband=0.01
END
SHUNT
1 3 0 19 block=5 steps=1 min=0 max=4 vtarget=1.0 deadband=0.02
END
";

    #[test]
    fn parses_text_in_per_unit() {
        let net = load_case(SMALL).unwrap();
        assert_eq!(net.buses.len(), 3);
        assert_eq!(net.buses[1].kind, BusKind::PV);
        assert_eq!(net.generators[1].regulated_bus, Some(1));
        assert_eq!(net.generators[0].regulated_bus, None);
        assert!((net.generators[1].p[0] - 0.6).abs() < 1e-15);
        assert!((net.generators[1].q_min[0] + 0.3).abs() < 1e-15);
        assert_eq!(net.zip_loads.len(), 2);
        assert!((net.zip_loads[1].power[0] - Complex64::new(0.9, 0.3)).norm() < 1e-15);
        let y = net.branches[0].series.get(0, 0);
        assert!((y - Complex64::new(0.01, 0.1).inv()).norm() < 1e-12);
        assert!((net.branches[1].rating - 1.5).abs() < 1e-15);
        assert_eq!(net.transformers[0].control.as_ref().unwrap().bus, 2);
        assert!((net.shunts[0].admittance(0) - Complex64::new(0.0, 0.24)).norm() < 1e-15);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let bad = SMALL.replace("2 2 3 0.02 0.2 0.0 rate=150", "2 2 3 0.02 x 0.0");
        match parse_case(&bad) {
            Err(CaseError::Syntax { line, .. }) => assert_eq!(line, 14),
            other => panic!("{other:?}"),
        }
        let missing = SMALL.replace("1 1 2 0.01", "1 1 9 0.01");
        assert!(matches!(parse_case(&missing), Err(CaseError::Semantic { .. })));
        let opt = SMALL.replace("rate=150", "colour=red");
        assert!(matches!(parse_case(&opt), Err(CaseError::Syntax { line: 14, .. })));
        assert!(matches!(parse_case("BUS\n1 3 0 0 1 1 0\n"), Err(CaseError::Syntax { .. })));
        assert!(matches!(parse_case("BUS\n1 7 0 0 1 1 0\nEND\n"), Err(CaseError::Syntax { line: 2, .. })));
    }

    #[test]
    fn invalid_networks_are_rejected_by_load() {
        let two_slack = SMALL.replace("2 2 20 10 230 1.01 0", "2 3 20 10 230 1.01 0");
        assert!(matches!(load_case(&two_slack), Err(CaseError::Invalid(_))));
    }

    fn assert_close(a: &Network, b: &Network) {
        assert_eq!(a.buses, b.buses);
        assert_eq!(a.generators.len(), b.generators.len());
        for (x, y) in a.generators.iter().zip(&b.generators) {
            assert_eq!((x.id, x.bus, x.regulated_bus, x.in_service), (y.id, y.bus, y.regulated_bus, y.in_service));
            let near = |a: f64, b: f64| a == b || (a - b).abs() < 1e-12;
            assert!(near(x.p[0], y.p[0]) && near(x.q_max[0], y.q_max[0]) && near(x.q_min[0], y.q_min[0]));
        }
        for (x, y) in a.branches.iter().zip(&b.branches) {
            assert!((x.series.get(0, 0) - y.series.get(0, 0)).norm() < 1e-9);
        }
        for (x, y) in a.transformers.iter().zip(&b.transformers) {
            assert!((x.series[0] - y.series[0]).norm() < 1e-9);
            assert_eq!(x.control, y.control);
        }
        assert_eq!(a.shunts.len(), b.shunts.len());
        assert_eq!(a.zip_loads.len(), b.zip_loads.len());
    }

    #[test]
    fn text_round_trip() {
        let net = load_case(SMALL).unwrap();
        let again = load_case(&write_case(&net, CaseFormat::Text).unwrap()).unwrap();
        assert_close(&net, &again);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = load_case(SMALL).unwrap();
        let again = load_case(&write_case(&net, CaseFormat::Json).unwrap()).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn three_phase_needs_json() {
        let mut net = load_case(SMALL).unwrap();
        net.domain = PhaseDomain::ThreePhase;
        assert!(matches!(write_case(&net, CaseFormat::Text), Err(CaseError::Unrepresentable(_))));
        net.domain = PhaseDomain::PositiveSequence;
        net.zip_loads[0].connection = Connection::Delta;
        assert!(write_case(&net, CaseFormat::Text).is_err());
    }

    #[test]
    fn json_matrix_shape_checked() {
        let text = r#"{"name":"x","domain":"three_phase","base_mva":1,
            "buses":[{"id":1,"type":"slack","v_set":1.0},{"id":2,"type":"pq"}],
            "branches":[{"id":1,"from":1,"to":2,"y":[[[1,-10]]]}]}"#;
        assert!(matches!(parse_case(text), Err(CaseError::Semantic { .. })));
        assert!(matches!(parse_case("{\"name\": 3}"), Err(CaseError::Json { line: 1, .. })));
    }

    #[test]
    fn solution_round_trips() {
        let net = load_case(SMALL).unwrap();
        let mut st = StateVector::flat(&net);
        st.set_voltage(2, 0, Complex64::new(0.97, -0.081));
        let csv = write_solution(&net, &st, None, SolutionFormat::Csv);
        assert!(csv.starts_with(SOLUTION_HEADER));
        let back = read_solution(&csv, &net).unwrap();
        assert_eq!(back.voltages, st.voltages);
        let js = write_solution(&net, &st, None, SolutionFormat::Json);
        assert_eq!(read_solution(&js, &net).unwrap(), st);
        let short: String = csv.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(read_solution(&short, &net).is_err());
    }
}
