use dode_core::analysis::mean_row_distance;
use dode_core::distill::{evaluate, evaluate_base, sample_batches, sample_with_schedule, teacher_targets, EvalConfig};
use dode_core::presets::benchmark_setting;
use dode_core::schedule::ScheduleKind;
use dode_core::*;

fn ring(student: SolverKind, steps: usize) -> DistillConfig {
    let schedule = match student.required_schedule() {
        ScheduleKind::VpLinear => NoiseSchedule::vp_linear(),
        ScheduleKind::VeKarras => NoiseSchedule::ve_karras(),
    };
    DistillConfig::new(schedule, presets::gmm_ring(Parameterization::NoisePrediction), student, steps)
}

#[test]
fn unit_scale_fits_zero() {
    for kind in [
        SolverKind::DdimNoise,
        SolverKind::DdimData,
        SolverKind::Ipndm,
        SolverKind::Deis(1),
        SolverKind::Deis(3),
    ] {
        let mut c = ring(kind, 8);
        c.scale = 1;
        let (lambdas, report) = distill(&c).unwrap();
        assert_eq!(report.teacher, kind);
        assert!(report.max_lambda_abs() <= 1e-10, "{kind}: {}", report.max_lambda_abs());
        assert!(lambdas.values.iter().flatten().all(|v| v.abs() <= 1e-10));
    }
}

#[test]
fn fitted_objective_never_exceeds_base() {
    for (kind, steps, scale) in [
        (SolverKind::DdimNoise, 10, 10),
        (SolverKind::DdimData, 10, 10),
        (SolverKind::Ipndm, 10, 10),
        (SolverKind::Deis(2), 10, 10),
        (SolverKind::Dpm2, 5, 10),
        (SolverKind::Dpm3, 4, 12),
        (SolverKind::EdmHeun, 5, 10),
    ] {
        let mut c = ring(kind, steps);
        c.scale = scale;
        let (_, report) = distill(&c).unwrap();
        assert!(report.optimality_violations().is_empty(), "{kind}");
    }
}

#[test]
fn fitted_student_lands_closer_to_teacher() {
    let c = ring(SolverKind::DdimNoise, 10);
    let (lambdas, report) = distill(&c).unwrap();
    let teacher = teacher_targets(&c).unwrap();
    let target = teacher.final_state();
    let fitted = report.student_states.last().unwrap();
    let zero = sample_with_schedule(&c, &LambdaSchedule::zero(c.student, c.steps), &[c.seed], c.batch).unwrap();
    let sq = |x: &ndarray::Array2<f64>| (target - x).mapv(|v| v * v).sum() / x.nrows() as f64;
    assert!(sq(fitted) < sq(&zero[0]));
    let again = sample_with_schedule(&c, &lambdas, &[c.seed], c.batch).unwrap();
    assert_eq!(&again[0], fitted);
}

#[test]
fn teacher_endpoint_matches_exact_flow() {
    let (schedule, spacing) = benchmark_setting(SolverKind::DdimNoise);
    let oracle = presets::gaussian_1d(Parameterization::NoisePrediction);
    let mut c = DistillConfig::new(schedule.clone(), oracle.clone(), SolverKind::DdimNoise, 10);
    c.scale = 100;
    c.spacing = Some(spacing);
    let tr = teacher_targets(&c).unwrap();
    assert_eq!(tr.times.len(), 1001);
    let exact = oracle
        .exact_flow_map(c.initial_batch().view(), schedule.t_max(), schedule.t_min(), &schedule)
        .unwrap();
    let err = mean_row_distance(tr.final_state().view(), exact.view()).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn held_out_batches_are_deterministic_and_distinct() {
    let mut c = ring(SolverKind::DdimNoise, 6);
    c.scale = 4;
    c.batch = 16;
    let (lambdas, _) = distill(&c).unwrap();
    let a = sample_batches(&c, &lambdas, 3).unwrap();
    let b = sample_batches(&c, &lambdas, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
}

#[test]
fn arity_mismatch_is_rejected() {
    let c = ring(SolverKind::Dpm2, 4);
    let wrong = LambdaSchedule::zero(SolverKind::Dpm2, 5);
    assert!(sample_with_schedule(&c, &wrong, &[0], 4).unwrap_err().is_config());
}

#[test]
fn distilled_ddim_improves_sample_quality() {
    let c = ring(SolverKind::DdimNoise, 10);
    let eval = EvalConfig::default();
    let (lambdas, _) = distill(&c).unwrap();
    let fitted = evaluate(&c, &lambdas, &eval).unwrap();
    let base = evaluate_base(&c, &eval).unwrap();
    let wins = fitted.iter().zip(&base).filter(|(f, b)| f <= b).count();
    assert!(wins >= 4, "{fitted:?} vs {base:?}");
}
