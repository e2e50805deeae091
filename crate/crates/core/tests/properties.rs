use approx::assert_relative_eq;
use proptest::prelude::*;

use effdiff::cli::{parse_config, spec_from_options, ExperimentSpec, Kind, Noise};
use effdiff::ensemble::{simulate, CheckpointSchedule, MomentAccumulator, Workers};
use effdiff::eulerian::{eulerian_diffusivity, solve_cell_problem, TorusGrid2D};
use effdiff::flows::{CellularFlow, Flow, SeparableFlow2D, FLOW_NAMES};
use effdiff::integrators::{deterministic_jacobian_det, IntegratorConfig, Scheme};
use effdiff::kernel::{build_kernel, default_image_cutoff};
use effdiff::rng::{inverse_normal_cdf, NoiseSchedule};

fn flow_name() -> impl Strategy<Value = &'static str> {
    prop::sample::select(&FLOW_NAMES[..4])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splitting_has_unit_jacobian(name in flow_name(), u in prop::array::uniform3(0.0..1.0f64), dt in 0.001..0.5f64) {
        let flow = Flow::from_name(name).unwrap();
        let x: Vec<f64> = (0..flow.dim()).map(|i| u[i] * flow.field().period(i)).collect();
        let cfg = IntegratorConfig::new(dt, 0.0).unwrap();
        let det = deterministic_jacobian_det(Scheme::Symplectic, flow.field(), &x, &cfg, 1e-6).unwrap();
        prop_assert!((det - 1.0).abs() < 1e-6, "{name}: det {det}");
    }

    #[test]
    fn fields_are_periodic(name in flow_name(), u in prop::array::uniform3(-5.0..5.0f64), axis in 0usize..3, k in -3i32..4) {
        let flow = Flow::from_name(name).unwrap();
        let f = flow.field();
        let d = f.dim();
        let axis = axis % d;
        let x = &u[..d];
        let mut y = x.to_vec();
        y[axis] += k as f64 * f.period(axis);
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        f.drift(x, &mut a);
        f.drift(&y, &mut b);
        for i in 0..d {
            prop_assert!((a[i] - b[i]).abs() < 1e-9, "{name} axis {axis}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn merge_matches_streaming(disps in prop::collection::vec(prop::array::uniform3(-10.0..10.0f64), 1..60), cut in 0usize..60) {
        let cut = cut.min(disps.len());
        let mut whole = MomentAccumulator::empty(3, 1.0);
        let mut left = MomentAccumulator::empty(3, 1.0);
        let mut right = MomentAccumulator::empty(3, 1.0);
        for (k, d) in disps.iter().enumerate() {
            whole.push(d);
            if k < cut { left.push(d) } else { right.push(d) }
        }
        let merged = left.merge(&right).unwrap();
        prop_assert_eq!(merged.count, whole.count);
        let swapped = right.merge(&left).unwrap();
        prop_assert_eq!(&swapped.sum_prod, &merged.sum_prod);
        for (a, b) in merged.sum_prod.iter().zip(&whole.sum_prod) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn normals_are_odd_and_monotone(u in 1e-6..0.5f64, h in 1e-9..1e-3f64) {
        prop_assert!((inverse_normal_cdf(1.0 - u) + inverse_normal_cdf(u)).abs() < 1e-8);
        prop_assert!(inverse_normal_cdf(u + h) > inverse_normal_cdf(u));
    }

    #[test]
    fn log_schedule_ends_at_t_final(steps in 1u64..100_000, count in 1usize..40) {
        let dt = 0.01;
        let s = CheckpointSchedule::log_spaced(steps as f64 * dt, dt, count).unwrap();
        prop_assert_eq!(s.final_step(), steps);
        prop_assert!(s.steps().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.steps().len() <= count.max(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernel_rows_are_stochastic(sigma in 0.2..1.0f64, dt in 0.02..0.3f64, m in prop::sample::select(vec![8usize, 12, 16])) {
        let cfg = IntegratorConfig::new(dt, sigma).unwrap();
        let flow = CellularFlow;
        let k = build_kernel(&flow, &cfg, m, default_image_cutoff(sigma, dt, flow.periods())).unwrap();
        prop_assert!(k.max_row_sum_error() < 1e-12);
        prop_assert!(k.min_entry() > 0.0);
    }

    #[test]
    fn ensemble_ignores_worker_count(n in 2usize..2500, workers in 1usize..6, seed in any::<u64>(), name in flow_name()) {
        let flow = Flow::from_name(name).unwrap();
        let cfg = IntegratorConfig::new(0.05, 0.3).unwrap();
        let sched = CheckpointSchedule::from_steps(vec![3, 7], 0.05).unwrap();
        let run = |w| simulate(&flow, Scheme::Symplectic, &cfg, NoiseSchedule::plain(0.05), n, &flow.default_init_box(),
            seed, &sched, &Workers::new(w).unwrap()).unwrap();
        prop_assert_eq!(run(1), run(workers));
    }

    #[test]
    fn corrector_gauge_does_not_matter(shift in -5.0..5.0f64, d0 in 0.05..0.5f64) {
        let flow = CellularFlow;
        let mut chi = solve_cell_problem(&flow, d0, &TorusGrid2D::for_flow(&flow, 32).unwrap(), 1e-10).unwrap();
        let base = eulerian_diffusivity(&flow, &chi);
        chi.chi[0].iter_mut().for_each(|c| *c += shift);
        chi.chi[1].iter_mut().for_each(|c| *c -= 2.0 * shift);
        let moved = eulerian_diffusivity(&flow, &chi);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(base.cov[i][j], moved.cov[i][j], epsilon = 1e-9);
                assert_relative_eq!(base.grad[i][j], moved.grad[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn spec_survives_config_round_trip(
        kind in prop::sample::select(vec![Kind::Simulate, Kind::Converge, Kind::Enhance]),
        name in flow_name(),
        scheme in prop::sample::select(vec![Scheme::Symplectic, Scheme::VolumePreserving, Scheme::Euler]),
        steps in 1u64..500,
        d0 in 1e-6..1.0f64,
        by_sigma in any::<bool>(),
        seed in any::<u64>(),
        particles in 2usize..100_000,
        workers in prop::option::of(1usize..64),
    ) {
        let dt = 0.01;
        let spec = ExperimentSpec {
            kind,
            flow: name.to_string(),
            scheme,
            dt,
            noise: Some(if by_sigma { Noise::Sigma((2.0 * d0).sqrt()) } else { Noise::D0(d0) }),
            particles,
            t_final: Some(steps as f64 * 0.2),
            seed,
            checkpoints: 7,
            out: "out/run.csv".into(),
            workers,
            dt_list: if kind == Kind::Converge { vec![0.2, 0.1, 0.05] } else { vec![] },
            d0_list: if kind == Kind::Enhance { vec![d0, d0 / 3.0] } else { vec![] },
            grid: vec![],
            budget_seconds: Some(d0 * 1e4),
            dt_ref: None,
            tol: None,
            couple: !by_sigma,
        };
        let back = spec_from_options(&parse_config(&spec.to_config()).unwrap()).unwrap();
        prop_assert_eq!(back, spec);
    }
}
