mod common;

use common::*;
use ecpf::analyses::{run_sweep, uniform_start, SweepSpec};
use ecpf::case_io::{parse_case, read_solution, write_case, write_solution, CaseFormat, SolutionFormat};
use ecpf::homotopy::HomotopyMethod;
use ecpf::solver::{solve, validate_solution, InitialCondition, SolveStatus, SolverOptions};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 16, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn json_round_trip_is_exact(n in 3usize..40, seed in 0u64..1000) {
        let mut net = synthetic(n, seed);
        let mut back = parse_case(&write_case(&net, CaseFormat::Json).unwrap()).unwrap();
        // Phase shifts are stored in degrees.
        for (a, b) in net.transformers.iter_mut().zip(back.transformers.iter_mut()) {
            prop_assert!((a.shift[0] - b.shift[0]).abs() < 1e-14);
            a.shift[0] = 0.0;
            b.shift[0] = 0.0;
        }
        prop_assert_eq!(format!("{net:?}"), format!("{back:?}"));
    }

    #[test]
    fn text_round_trip_preserves_solution(n in 3usize..40, seed in 0u64..1000) {
        let net = synthetic(n, seed);
        let back = parse_case(&write_case(&net, CaseFormat::Text).unwrap()).unwrap();
        let (a, b) = (solve(&net, &SolverOptions::default()).unwrap(), solve(&back, &SolverOptions::default()).unwrap());
        prop_assert_eq!(a.report.status, b.report.status);
        prop_assert!(a.state.max_voltage_diff(&b.state) < 1e-9);
    }

    #[test]
    fn converged_solutions_pass_validator(n in 3usize..60, seed in 0u64..1000, tx in any::<bool>()) {
        let net = synthetic(n, seed);
        let mut opts = SolverOptions::default();
        if tx {
            opts.method = HomotopyMethod::Tx;
        }
        let sol = solve(&net, &opts).unwrap();
        if sol.report.status == SolveStatus::Converged {
            prop_assert!(validate_solution(&sol.network, &sol.state).max <= 10.0 * opts.nr.tol);
        }
    }

    #[test]
    fn solution_json_round_trip(n in 3usize..30, seed in 0u64..1000) {
        let net = synthetic(n, seed);
        let sol = solve(&net, &SolverOptions::default()).unwrap();
        let text = write_solution(&net, &sol.state, Some(&sol.report), SolutionFormat::Json);
        prop_assert_eq!(read_solution(&text, &net).unwrap(), sol.state);
    }

    #[test]
    fn warm_start_from_solution_is_fixed_point(n in 3usize..40, seed in 0u64..1000) {
        let net = synthetic(n, seed);
        let mut opts = SolverOptions::default();
        opts.nr.tol = 1e-10;
        let sol = solve(&net, &opts).unwrap();
        prop_assume!(sol.report.status == SolveStatus::Converged);
        opts.init = InitialCondition::WarmStart(sol.state.clone());
        let again = solve(&sol.network, &opts).unwrap();
        prop_assert_eq!(again.report.status, SolveStatus::Converged);
        prop_assert!(again.report.inner_iterations <= 1);
        prop_assert!(again.state.max_voltage_diff(&sol.state) < 1e-9);
    }

    #[test]
    fn tx_sweep_agrees_on_case14(seed in 0u64..1000) {
        let spec = SweepSpec { samples: 4, seed, ..SweepSpec::default() };
        let mut opts = SolverOptions::default();
        opts.method = HomotopyMethod::Tx;
        let res = run_sweep(&fixture("case14.net"), &spec, &opts).unwrap();
        prop_assert_eq!(res.tally().converged, 4);
        prop_assert!(res.spread() < 1e-6);
    }

    #[test]
    fn feeder_converges_under_load_scaling(k in 0.2f64..1.5) {
        let mut net = fixture("feeder8_unbalanced.json");
        for l in &mut net.zip_loads {
            for s in l.power.iter_mut().chain(l.current.iter_mut()) {
                *s *= k;
            }
        }
        let sol = solve(&net, &SolverOptions::default()).unwrap();
        prop_assert_eq!(sol.report.status, SolveStatus::Converged);
        prop_assert!(validate_solution(&sol.network, &sol.state).max <= 1e-5);
    }

    #[test]
    fn uniform_start_sets_every_phase(mag in 0.5f64..1.5, ang in -90.0f64..90.0) {
        let net = fixture("feeder8_unbalanced.json");
        let st = uniform_start(&net, mag, ang);
        for b in 0..net.buses.len() {
            for p in 0..3 {
                prop_assert!((st.voltage(b, p).norm() - mag).abs() < 1e-12);
            }
        }
    }
}
