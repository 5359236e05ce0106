//! Values frozen from independent 40-digit evaluations (mpmath quadrature and root finding)
//! and from exact rational arithmetic.

use dode_core::solvers::{deis_coefficients, dpm_solver2_step, ipndm_combination, IPNDM_COEFFICIENTS};
use dode_core::*;
use ndarray::array;
use num_rational::Rational64;

#[test]
fn vp_schedule_values() {
    let s = NoiseSchedule::vp_linear();
    let (a, sg) = s.alpha_sigma(0.5).unwrap();
    assert!((a - 0.281_182_880_796_752_4).abs() < 1e-15);
    assert!((sg - 0.959_654_202_068_036_2).abs() < 1e-15);
    assert!((s.log_snr(0.5).unwrap() + 1.227_567_734_410_787_3).abs() < 1e-14);
    assert!((s.inv_log_snr(0.0).unwrap() - 0.258_960_262_432_796_6).abs() < 1e-12);
}

#[test]
fn karras_grid_values() {
    let s = NoiseSchedule::ve_karras();
    let g = make_grid(&s, 3, Spacing::KarrasRho).unwrap();
    let want = [80.0, 9.723_201_355_260_127, 0.469_979_057_997_746_8, 0.002];
    for (p, w) in g.points().iter().zip(want) {
        assert!((p - w).abs() <= 1e-12 * w.max(1.0), "{p} vs {w}");
    }
}

#[test]
fn ring_mixture_posterior_mean() {
    let o = presets::gmm_ring(Parameterization::DataPrediction);
    let m = o.posterior_mean(array![[0.3, -0.2]].view(), 0.8, 0.6).unwrap();
    assert!((m[[0, 0]] - 0.305_738_956_136_129_8).abs() < 1e-13);
    assert!((m[[0, 1]] + 0.203_826_271_300_923_5).abs() < 1e-13);
}

#[test]
fn deis_first_order_coefficients() {
    let s = NoiseSchedule::vp_linear();
    let c = deis_coefficients(&s, 0.5, 0.4, &[0.5, 0.6], 256).unwrap();
    // second-order trapezoid on 256 panels
    assert!((c[0] + 0.887_555_944_043_643_1).abs() < 1e-5, "{}", c[0]);
    assert!((c[1] - 0.275_292_013_193_550_4).abs() < 1e-5, "{}", c[1]);
    let fine = deis_coefficients(&s, 0.5, 0.4, &[0.5, 0.6], 8192).unwrap();
    assert!((fine[0] + 0.887_555_944_043_643_1).abs() < 1e-8);
    assert!((fine[1] - 0.275_292_013_193_550_4).abs() < 1e-8);
}

#[test]
fn dpm2_single_step_on_gaussian() {
    let s = NoiseSchedule::vp_linear();
    let o = presets::gaussian_1d(Parameterization::NoisePrediction);
    let st = SolverState::new(array![[0.7]]);
    let next = dpm_solver2_step(&st, &o, &s, 0.8, 0.6).unwrap();
    assert!((next.x[[0, 0]] - 0.755_159_694_231_948_1).abs() < 1e-12);
    let mid = s.log_snr_fraction_time(0.8, 0.6, 0.5).unwrap();
    assert!((mid - 0.706_523_234_949_427_6).abs() < 1e-12);
}

#[test]
fn ve_gaussian_flow_map() {
    let s = NoiseSchedule::ve_karras();
    let o = presets::gaussian_1d(Parameterization::DataPrediction);
    let y = o.exact_flow_map(array![[10.0]].view(), 80.0, 0.002, &s).unwrap();
    assert!((y[[0, 0]] - 0.559_374_315_354_827_8).abs() < 1e-14);
}

#[test]
fn ipndm_weights_sum_to_one_exactly() {
    let published: [&[(i64, i64)]; 4] = [
        &[(1, 1)],
        &[(3, 2), (-1, 2)],
        &[(23, 12), (-16, 12), (5, 12)],
        &[(55, 24), (-59, 24), (37, 24), (-9, 24)],
    ];
    for ((nums, den), want) in IPNDM_COEFFICIENTS.iter().zip(published) {
        let got: Vec<Rational64> = nums.iter().map(|&n| Rational64::new(n, *den)).collect();
        let expected: Vec<Rational64> = want.iter().map(|&(n, d)| Rational64::new(n, d)).collect();
        assert_eq!(got, expected);
        assert_eq!(got.iter().sum::<Rational64>(), Rational64::from_integer(1));
    }
}

#[test]
fn ipndm_combination_of_equal_outputs_is_identity() {
    let d = array![[0.25, -1.5], [3.0, 0.125]];
    for k in 0..4 {
        let past: Vec<&ndarray::Array2<f64>> = (0..k).map(|_| &d).collect();
        let c = ipndm_combination(&d, &past);
        assert!(c.iter().zip(d.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
