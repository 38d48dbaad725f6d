//! Command-line front end.
//!
//! Exit codes: 0 converged, 1 diverged, 2 infeasible (worst status over a
//! batch), 64 bad usage, 65 malformed or invalid case, 66 unreadable input,
//! 74 output could not be written.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::analyses::{
    all_single_outages, contingency_csv, run_contingencies, run_sweep, sample_contingencies, sweep_csv, warm_start_regressions,
    SweepSpec, Tally,
};
use crate::case_io::{load_case, read_solution, write_solution, CaseError, SolutionFormat};
use crate::homotopy::{lambda_trace_csv, HomotopyMethod};
use crate::network::Network;
use crate::solver::{infer_regulating_q, solve, validate_solution, InitialCondition, SolveStatus, SolverOptions};

pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Parser)]
#[command(name = "ecpf", version, about = "Equivalent-circuit power flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one case.
    Solve {
        case: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Solve from uniformly sampled initial voltages.
    Sweep {
        case: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Number of initial conditions.
        #[arg(long, default_value_t = 15)]
        samples: usize,
        #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
        vmag_min: f64,
        #[arg(long, default_value_t = 1.1, allow_negative_numbers = true)]
        vmag_max: f64,
        /// Degrees.
        #[arg(long, default_value_t = -40.0, allow_negative_numbers = true)]
        vang_min: f64,
        #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
        vang_max: f64,
    },
    /// Solve the base case, then each outage warm-started from it.
    Contingency {
        case: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Fraction of generators and of lines/transformers to drop.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        /// Every single outage instead of the sampled set.
        #[arg(long)]
        all: bool,
        /// Also solve each outage from flat start and log any case where
        /// the warm start did worse.
        #[arg(long)]
        compare_flat: bool,
    },
    /// Check a case, and optionally a solution against it.
    Validate {
        case: PathBuf,
        /// Solution CSV or JSON to check.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Largest acceptable mismatch, pu.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn on(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    Flat,
    Random,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    None,
    Tx,
    Power,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Continuation method.
    #[arg(long, value_enum, default_value_t = MethodArg::None)]
    pub homotopy: MethodArg,
    /// Current mismatch tolerance, pu [1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// NR iterations per solve [100].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Tx-stepping admittance scale [1e4].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Largest voltage component step, pu [0.1].
    #[arg(long)]
    pub dv_max: Option<f64>,
    /// Lower clamp on voltage components, pu [-2].
    #[arg(long)]
    pub v_min: Option<f64>,
    /// Upper clamp on voltage components, pu [2].
    #[arg(long)]
    pub v_max: Option<f64>,
    /// Starting damping factor [1].
    #[arg(long)]
    pub zeta_init: Option<f64>,
    /// Smallest damping factor [0.05].
    #[arg(long)]
    pub zeta_min: Option<f64>,
    /// Damping shrink factor after a large step [0.5].
    #[arg(long)]
    pub zeta_shrink: Option<f64>,
    /// Damping growth factor while errors fall [2].
    #[arg(long)]
    pub zeta_growth: Option<f64>,
    /// Step size counted as large, pu [0.5].
    #[arg(long)]
    pub large_step: Option<f64>,
    /// Cap on a regulating generator's current change per step, pu [off].
    #[arg(long)]
    pub q_current_cap: Option<f64>,
    /// Initial continuation step [0.1].
    #[arg(long)]
    pub lambda_step: Option<f64>,
    /// Smallest continuation step before giving up [1e-4].
    #[arg(long)]
    pub lambda_min_step: Option<f64>,
    /// Step factor after a failed sub-problem [0.5].
    #[arg(long)]
    pub lambda_backtrack: Option<f64>,
    /// Step factor after repeated successes [2].
    #[arg(long)]
    pub lambda_growth: Option<f64>,
    /// First-try successes needed before the step grows [2].
    #[arg(long)]
    pub grow_after: Option<usize>,
    /// Tolerance of intermediate sub-problems [1e-6].
    #[arg(long)]
    pub sub_tol: Option<f64>,
    /// Outer device-limit passes [10].
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Initial voltages.
    #[arg(long, value_enum, default_value_t = InitKind::Flat)]
    pub init: InitKind,
    /// Solution file for `--init file`.
    #[arg(long)]
    pub init_file: Option<PathBuf>,
    /// Enforce generator reactive limits.
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub q_limits: OnOff,
    /// Switch shunts toward their voltage targets.
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub shunts: OnOff,
    /// Step regulating transformer taps.
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub taps: OnOff,
    /// Seed for random starts and sweeps.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long, short = 'o', default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write trace.csv (NR iterations) and lambda.csv (continuation).
    #[arg(long)]
    pub trace: bool,
}

/// Failure that ends the program with a specific exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Exit { code, message: message.into() }
    }
}

impl SolverArgs {
    pub fn options(&self) -> Result<SolverOptions, Exit> {
        let mut o = SolverOptions::default();
        o.method = match self.homotopy {
            MethodArg::None => HomotopyMethod::None,
            MethodArg::Tx => HomotopyMethod::Tx,
            MethodArg::Power => HomotopyMethod::Power,
        };
        let nr = &mut o.nr;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(tol => nr.tol, max_iter => nr.max_iter, dv_max => nr.dv_max, v_min => nr.v_min, v_max => nr.v_max,
             zeta_init => nr.zeta_init, zeta_min => nr.zeta_min, zeta_shrink => nr.zeta_shrink,
             zeta_growth => nr.zeta_growth, large_step => nr.large_step, q_current_cap => nr.q_current_cap);
        let sc = &mut o.schedule;
        set!(gamma => sc.gamma, lambda_step => sc.initial_step, lambda_min_step => sc.min_step,
             lambda_backtrack => sc.backtrack, lambda_growth => sc.growth, grow_after => sc.grow_after,
             sub_tol => sc.sub_tol, max_outer => o.max_outer_passes);
        o.nr.check().map_err(|e| Exit::new(EXIT_USAGE, e.to_string()))?;
        let s = &o.schedule;
        let sched_ok = s.gamma >= 0.0
            && s.initial_step > 0.0
            && s.min_step > 0.0
            && s.min_step <= s.initial_step
            && s.backtrack > 0.0
            && s.backtrack < 1.0
            && s.growth >= 1.0
            && s.sub_tol > 0.0;
        if !sched_ok || o.max_outer_passes == 0 {
            return Err(Exit::new(EXIT_USAGE, "continuation settings out of range"));
        }
        o.q_limits = self.q_limits.on();
        o.adjust_shunts = self.shunts.on();
        o.adjust_taps = self.taps.on();
        o.init = match (self.init, &self.init_file) {
            (InitKind::Flat, _) => InitialCondition::Flat,
            (InitKind::Random, _) => InitialCondition::random(self.seed),
            (InitKind::File, Some(p)) => InitialCondition::File(p.clone()),
            (InitKind::File, None) => return Err(Exit::new(EXIT_USAGE, "--init file needs --init-file PATH")),
        };
        Ok(o)
    }
}

fn read_case(path: &Path) -> Result<Network, Exit> {
    let text = fs::read_to_string(path).map_err(|e| Exit::new(EXIT_NO_INPUT, format!("{}: {e}", path.display())))?;
    load_case(&text).map_err(|e: CaseError| Exit::new(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Exit> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Exit::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn prepare(out: &OutArgs) -> Result<(), Exit> {
    fs::create_dir_all(&out.out_dir).map_err(|e| Exit::new(EXIT_IO, format!("{}: {e}", out.out_dir.display())))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn worst<'a>(it: impl IntoIterator<Item = &'a SolveStatus>) -> SolveStatus {
    it.into_iter().copied().max().unwrap_or(SolveStatus::Converged)
}

fn init_error(e: crate::solver::SolveError) -> Exit {
    match e {
        crate::solver::SolveError::Init(m) if m.contains("No such file") || m.contains("denied") => Exit::new(EXIT_NO_INPUT, m),
        other => Exit::new(EXIT_DATA, other.to_string()),
    }
}

fn cmd_solve(case: &Path, solver: &SolverArgs, out: &OutArgs) -> Result<i32, Exit> {
    let opts = solver.options()?;
    let net = read_case(case)?;
    prepare(out)?;
    let sol = solve(&net, &opts).map_err(init_error)?;
    let r = &sol.report;
    write(&out.out_dir, "solution.csv", &write_solution(&sol.network, &sol.state, Some(r), SolutionFormat::Csv))?;
    let report = json!({
        "case": net.name,
        "report": r,
        "options": opts,
        "metadata": { "wall_time_s": r.wall_time_s, "version": env!("CARGO_PKG_VERSION") },
    });
    write(&out.out_dir, "report.json", &pretty(&report))?;
    if out.trace {
        write(&out.out_dir, "trace.csv", &sol.trace.to_csv())?;
        write(&out.out_dir, "lambda.csv", &lambda_trace_csv(&sol.lambda_steps))?;
    }
    eprintln!(
        "{}: {:?} after {} NR iterations, {} continuation steps, {} outer passes, max mismatch {:.3e}",
        net.name, r.status, r.inner_iterations, r.homotopy_steps, r.outer_passes, r.max_mismatch
    );
    if let Some(m) = &r.message {
        eprintln!("{m}");
    }
    Ok(r.status.exit_code())
}

fn cmd_sweep(case: &Path, solver: &SolverArgs, out: &OutArgs, spec: SweepSpec) -> Result<i32, Exit> {
    let opts = solver.options()?;
    let net = read_case(case)?;
    prepare(out)?;
    let res = run_sweep(&net, &spec, &opts).map_err(|e| Exit::new(EXIT_USAGE, e.to_string()))?;
    write(&out.out_dir, "sweep.csv", &sweep_csv(&res))?;
    let tally = res.tally();
    let report = json!({
        "case": net.name,
        "spec": spec,
        "tally": tally,
        "spread": res.spread(),
        "agreement": res.agreement,
        "samples": res.samples,
        "options": opts,
        "metadata": { "version": env!("CARGO_PKG_VERSION") },
    });
    write(&out.out_dir, "report.json", &pretty(&report))?;
    eprintln!(
        "{}: {} converged, {} diverged, {} infeasible; spread {:.3e}",
        net.name,
        tally.converged,
        tally.diverged,
        tally.infeasible,
        res.spread()
    );
    Ok(worst(res.samples.iter().map(|s| &s.report.status)).exit_code())
}

fn cmd_contingency(case: &Path, solver: &SolverArgs, out: &OutArgs, fraction: f64, all: bool, compare: bool) -> Result<i32, Exit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Exit::new(EXIT_USAGE, "--fraction must be in (0, 1]"));
    }
    let opts = solver.options()?;
    let net = read_case(case)?;
    prepare(out)?;
    let base = solve(&net, &opts).map_err(init_error)?;
    if base.report.status != SolveStatus::Converged {
        eprintln!("{}: base case {:?}; contingencies not run", net.name, base.report.status);
        return Ok(base.report.status.exit_code());
    }
    // Outages are taken on the solved network so adjusted taps and shunts
    // carry over from the base case.
    let set = if all { all_single_outages(&base.network) } else { sample_contingencies(&base.network, &base.state, fraction) };
    let results = run_contingencies(&base.network, &base.state, &set, &opts).map_err(|e| Exit::new(EXIT_DATA, e.to_string()))?;
    write(&out.out_dir, "contingency.csv", &contingency_csv(&results))?;
    let tally = Tally::of(results.iter().map(|r| &r.report.status));
    let regressions = if compare { warm_start_regressions(&base.network, &results, &opts) } else { Vec::new() };
    for r in &regressions {
        eprintln!("warm-start regression: {r}");
    }
    let report = json!({
        "case": net.name,
        "base": base.report,
        "tally": tally,
        "results": results,
        "warm_start_regressions": regressions,
        "options": opts,
        "metadata": { "version": env!("CARGO_PKG_VERSION") },
    });
    write(&out.out_dir, "report.json", &pretty(&report))?;
    eprintln!(
        "{}: {} contingencies: {} converged, {} diverged, {} infeasible",
        net.name,
        results.len(),
        tally.converged,
        tally.diverged,
        tally.infeasible
    );
    Ok(worst(results.iter().map(|r| &r.report.status)).exit_code())
}

fn cmd_validate(case: &Path, solution: Option<&Path>, tol: f64) -> Result<i32, Exit> {
    let net = read_case(case)?;
    println!(
        "{}: {} buses, {} generators, {} branches, {} transformers: valid",
        net.name,
        net.buses.len(),
        net.generators.len(),
        net.branches.len(),
        net.transformers.len()
    );
    let Some(path) = solution else { return Ok(0) };
    let text = fs::read_to_string(path).map_err(|e| Exit::new(EXIT_NO_INPUT, format!("{}: {e}", path.display())))?;
    let mut state = read_solution(&text, &net).map_err(|e| Exit::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
    if !text.trim_start().starts_with('{') {
        // CSV solutions hold voltages only.
        infer_regulating_q(&net, &mut state);
        println!("reactive output of regulating generators inferred from the bus balance");
    }
    let rep = validate_solution(&net, &state);
    let worst = rep.worst_node.map(|k| format!(" at node {k}")).unwrap_or_default();
    println!("max {:?} mismatch {:.3e}{worst}", rep.kind, rep.max);
    Ok(if rep.max <= tol { 0 } else { 1 })
}

/// Runs the program on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Solve { case, solver, out } => cmd_solve(case, solver, out),
        Command::Sweep { case, solver, out, samples, vmag_min, vmag_max, vang_min, vang_max } => {
            let spec = SweepSpec { samples: *samples, vmag: (*vmag_min, *vmag_max), vang: (*vang_min, *vang_max), seed: solver.seed };
            cmd_sweep(case, solver, out, spec)
        }
        Command::Contingency { case, solver, out, fraction, all, compare_flat } => {
            cmd_contingency(case, solver, out, *fraction, *all, *compare_flat)
        }
        Command::Validate { case, solution, tol } => cmd_validate(case, solution.as_deref(), *tol),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ecpf: {}", e.message);
            e.code
        }
    }
}
