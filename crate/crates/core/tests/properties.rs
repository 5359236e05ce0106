use dode_core::analysis::{cosine_similarity_matrix, sliced_wasserstein};
use dode_core::distill::{fit_lambda_closed_form, objective};
use dode_core::dode::{combine, d_step_outcome, run_d_sampler};
use dode_core::io::{lambda_schedule_from_json, lambda_schedule_to_json};
use dode_core::noise::initial_noise;
use dode_core::schedule::ScheduleKind;
use dode_core::solvers::{run_sampler, Solver};
use dode_core::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn setup(kind: SolverKind) -> (NoiseSchedule, DenoiserOracle, Spacing) {
    let oracle = presets::gmm_ring(kind.parameterization());
    match kind.required_schedule() {
        ScheduleKind::VpLinear => (NoiseSchedule::vp_linear(), oracle, Spacing::UniformT),
        ScheduleKind::VeKarras => (NoiseSchedule::ve_karras(), oracle, Spacing::KarrasRho),
    }
}

fn kind_strategy() -> impl Strategy<Value = SolverKind> {
    (0..SolverKind::ALL.len()).prop_map(|i| SolverKind::ALL[i])
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_schedule_is_bitwise_base(kind in kind_strategy(), steps in 1usize..9, seed in 0u64..1000, n in 1usize..6) {
        let (s, o, sp) = setup(kind);
        let g = make_grid(&s, steps, sp).unwrap();
        let x = initial_noise(&s, n, 2, seed);
        let base = run_sampler(kind, &o, &s, &g, x.clone(), true).unwrap();
        let zero = LambdaSchedule::zero(kind, steps);
        let d = run_d_sampler(&Solver::new(kind), &o, &s, &g, x, &zero, true).unwrap();
        prop_assert_eq!(base.states, d.states);
        prop_assert_eq!(base.nfe, d.nfe);
    }

    #[test]
    fn stage_state_is_affine_in_its_weight(
        kind in kind_strategy(),
        steps in 2usize..7,
        pick in 0usize..100,
        seed in 0u64..1000,
        l1 in -2.0f64..2.0,
        gap in 0.1f64..2.0,
        l3 in -2.0f64..2.0,
    ) {
        let (s, o, sp) = setup(kind);
        let g = make_grid(&s, steps, sp).unwrap();
        let x = initial_noise(&s, 4, 2, seed);
        let solver = Solver::new(kind);
        let step = pick % steps;
        let mut state = SolverState::new(x);
        for (i, (t, tp)) in g.intervals().enumerate().take(step) {
            let w = vec![0.3 * (i as f64 + 1.0).recip(); kind.stage_count(tp <= s.t_min())];
            state = d_step_outcome(&solver, &state, &o, &s, t, tp, &w).unwrap().state;
        }
        let (t, tp) = g.intervals().nth(step).unwrap();
        let k = kind.stage_count(tp <= s.t_min());
        let stage = pick % k;
        let at = |l: f64| {
            let mut w = vec![0.2; k];
            w[stage] = l;
            d_step_outcome(&solver, &state, &o, &s, t, tp, &w).unwrap().stage_states[stage].1.clone()
        };
        let l2 = l1 + gap;
        let (x1, x2, x3) = (at(l1), at(l2), at(l3));
        let predicted = &x1 + &((&x2 - &x1) * ((l3 - l1) / (l2 - l1)));
        let scale = 1.0 + x1.iter().chain(x3.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for (p, q) in predicted.iter().zip(x3.iter()) {
            prop_assert!((p - q).abs() <= 1e-9 * scale, "{} vs {}", p, q);
        }
    }

    #[test]
    fn closed_form_beats_probes(target in batch(5, 2), a in batch(5, 2), b in batch(5, 2)) {
        let f = fit_lambda_closed_form(target.view(), a.view(), b.view()).unwrap();
        prop_assert!(f.obj_star <= f.obj0 + 1e-12 * (1.0 + f.obj0));
        for probe in [0.0, 0.1, -0.1, 1.0, -1.0, f.lambda + 1e-3, f.lambda - 1e-3] {
            let o = objective(target.view(), a.view(), b.view(), probe);
            prop_assert!(f.obj_star <= o + 1e-12 * (1.0 + o));
        }
    }

    #[test]
    fn combine_shifts_mean_by_lambda_times_mean_difference(d in batch(6, 3), p in batch(6, 3), l in -3.0f64..3.0) {
        let o = combine(&d, &p, l).unwrap();
        let m = |x: &Array2<f64>| x.mean_axis(Axis(0)).unwrap();
        let lhs = m(&o) - m(&d);
        let rhs = (m(&d) - m(&p)) * l;
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_wasserstein_is_a_pseudometric(a in batch(7, 2), b in batch(7, 2), c in batch(9, 2), seed in 0u64..100) {
        let sw = |x: &Array2<f64>, y: &Array2<f64>| sliced_wasserstein(x.view(), y.view(), 16, seed).unwrap();
        prop_assert_eq!(sw(&a, &a), 0.0);
        prop_assert!((sw(&a, &b) - sw(&b, &a)).abs() < 1e-12);
        prop_assert!(sw(&a, &c) <= sw(&a, &b) + sw(&b, &c) + 1e-6);
    }

    #[test]
    fn cosine_matrix_shape(outputs in prop::collection::vec(batch(4, 3), 1..6)) {
        let m = cosine_similarity_matrix(&outputs).unwrap().matrix;
        let n = outputs.len();
        for i in 0..n {
            prop_assert_eq!(m[[i, i]], 1.0);
            for j in 0..n {
                prop_assert_eq!(m[[i, j]], m[[j, i]]);
                prop_assert!((-1.0..=1.0).contains(&m[[i, j]]));
            }
        }
    }

    #[test]
    fn log_snr_round_trip(u in 0.0f64..1.0) {
        for s in [NoiseSchedule::vp_linear(), NoiseSchedule::ve_karras()] {
            let t = s.t_min() + u * (s.t_max() - s.t_min());
            let back = s.inv_log_snr(s.log_snr(t).unwrap()).unwrap();
            prop_assert!((back - t).abs() <= 1e-10 * t.max(1.0));
        }
    }

    #[test]
    fn lambda_json_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..12)) {
        let mut s = LambdaSchedule::zero(SolverKind::DdimNoise, values.len());
        s.mode = LambdaMode::Fitted;
        s.values = values.iter().map(|&v| vec![v]).collect();
        let back = lambda_schedule_from_json(&lambda_schedule_to_json(&s).unwrap()).unwrap();
        for (x, y) in s.values.iter().flatten().zip(back.values.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
