//! Exact denoisers for known data distributions.
//!
//! Every backend returns the posterior mean `E[x_0 | x_t]` under the forward kernel
//! `x_t ~ N(alpha_t x_0, sigma_t^2 I)`. That is the optimal data-prediction network for
//! the distribution, so samplers can be checked against ground truth without training.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DodeError, Result};
use crate::schedule::NoiseSchedule;

/// Rows below this count are denoised on the calling thread.
const PAR_MIN_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    NoisePrediction,
    DataPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backend {
    GaussianAnalytic { mean: Vec<f64>, std: f64 },
    /// Uniform distribution over a finite point cloud (one point per row).
    EmpiricalBayes { points: Array2<f64> },
    Gmm { components: Vec<GmmComponent> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOracle {
    parameterization: Parameterization,
    backend: Backend,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingOutput {
    pub value: Array2<f64>,
    pub parameterization: Parameterization,
    pub t: f64,
}

impl DenoiserOracle {
    pub fn gaussian(parameterization: Parameterization, mean: Vec<f64>, std: f64) -> Result<Self> {
        if mean.is_empty() || !(std > 0.0) || mean.iter().any(|m| !m.is_finite()) {
            return Err(DodeError::Config("gaussian oracle needs a mean and std > 0".into()));
        }
        Ok(Self {
            parameterization,
            backend: Backend::GaussianAnalytic { mean, std },
        })
    }

    pub fn empirical(parameterization: Parameterization, points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(DodeError::Empty("empirical dataset".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(DodeError::Config("empirical dataset has non-finite entries".into()));
        }
        Ok(Self {
            parameterization,
            backend: Backend::EmpiricalBayes { points },
        })
    }

    /// Weights are normalized to sum to one.
    pub fn gmm(parameterization: Parameterization, mut components: Vec<GmmComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(DodeError::Empty("gmm components".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(DodeError::Config("gmm component mean is empty".into()));
        }
        for c in &components {
            if c.mean.len() != dim {
                return Err(DodeError::ShapeMismatch {
                    expected: vec![dim],
                    got: vec![c.mean.len()],
                });
            }
            if !(c.weight > 0.0) || !(c.std > 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(DodeError::Config(
                    "gmm components need positive weight and std".into(),
                ));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self {
            parameterization,
            backend: Backend::Gmm { components },
        })
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Same data distribution seen through the other parameterization.
    pub fn with_parameterization(&self, parameterization: Parameterization) -> Self {
        Self {
            parameterization,
            backend: self.backend.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.backend {
            Backend::GaussianAnalytic { mean, .. } => mean.len(),
            Backend::EmpiricalBayes { points } => points.ncols(),
            Backend::Gmm { components } => components[0].mean.len(),
        }
    }

    fn check_shape(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(DodeError::ShapeMismatch {
                expected: vec![x.nrows(), self.dim()],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `E[x_0 | x_t]` for explicit `(alpha, sigma)`.
    pub fn posterior_mean(&self, x: ArrayView2<f64>, alpha: f64, sigma: f64) -> Result<Array2<f64>> {
        self.check_shape(&x)?;
        let d = self.dim();
        let x = x.as_standard_layout();
        let input = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; input.len()];
        let row = |(xi, oi): (&[f64], &mut [f64])| self.posterior_mean_row(xi, alpha, sigma, oi);
        if x.nrows() >= PAR_MIN_ROWS {
            input.par_chunks(d).zip(out.par_chunks_mut(d)).for_each(row);
        } else {
            input.chunks(d).zip(out.chunks_mut(d)).for_each(row);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DodeError::Domain("denoiser produced non-finite values".into()));
        }
        Ok(Array2::from_shape_vec((x.nrows(), d), out).expect("shape"))
    }

    fn posterior_mean_row(&self, x: &[f64], alpha: f64, sigma: f64, out: &mut [f64]) {
        match &self.backend {
            Backend::GaussianAnalytic { mean, std } => {
                let s2 = std * std;
                let gain = alpha * s2 / (alpha * alpha * s2 + sigma * sigma);
                for ((o, &xi), &m) in out.iter_mut().zip(x).zip(mean) {
                    *o = m + gain * (xi - alpha * m);
                }
            }
            Backend::Gmm { components } => {
                let d = x.len() as f64;
                let logits: Vec<f64> = components
                    .iter()
                    .map(|c| {
                        let g2 = alpha * alpha * c.std * c.std + sigma * sigma;
                        let dist2: f64 = x
                            .iter()
                            .zip(&c.mean)
                            .map(|(&xi, &m)| (xi - alpha * m).powi(2))
                            .sum();
                        c.weight.ln() - 0.5 * d * g2.ln() - dist2 / (2.0 * g2)
                    })
                    .collect();
                let weights = softmax(&logits);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (c, w) in components.iter().zip(weights) {
                    let s2 = c.std * c.std;
                    let gain = alpha * s2 / (alpha * alpha * s2 + sigma * sigma);
                    for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&c.mean) {
                        *o += w * (m + gain * (xi - alpha * m));
                    }
                }
            }
            Backend::EmpiricalBayes { points } => {
                let dist2: Vec<f64> = points
                    .rows()
                    .into_iter()
                    .map(|p| {
                        p.iter()
                            .zip(x)
                            .map(|(&pi, &xi)| (xi - alpha * pi).powi(2))
                            .sum()
                    })
                    .collect();
                let weights = if sigma > 0.0 {
                    let s2 = 2.0 * sigma * sigma;
                    softmax(&dist2.iter().map(|d| -d / s2).collect::<Vec<_>>())
                } else {
                    nearest_weights(&dist2)
                };
                out.iter_mut().for_each(|o| *o = 0.0);
                for (p, w) in points.rows().into_iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &pi) in out.iter_mut().zip(p.iter()) {
                        *o += w * pi;
                    }
                }
            }
        }
    }

    /// Evaluates the oracle in its own parameterization.
    pub fn denoise(&self, x: ArrayView2<f64>, t: f64, schedule: &NoiseSchedule) -> Result<DenoisingOutput> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let x_hat = self.posterior_mean(x, alpha, sigma)?;
        let value = match self.parameterization {
            Parameterization::DataPrediction => x_hat,
            Parameterization::NoisePrediction => noise_from_data(x, &x_hat, alpha, sigma)?,
        };
        Ok(DenoisingOutput {
            value,
            parameterization: self.parameterization,
            t,
        })
    }

    /// Both views at once: `(x_hat, eps_hat)`.
    pub fn both_views(&self, x: ArrayView2<f64>, t: f64, schedule: &NoiseSchedule) -> Result<(Array2<f64>, Array2<f64>)> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let x_hat = self.posterior_mean(x, alpha, sigma)?;
        let eps = noise_from_data(x, &x_hat, alpha, sigma)?;
        Ok((x_hat, eps))
    }

    /// `grad log q_t(x_t) = (alpha x_hat - x_t) / sigma^2`.
    pub fn score(&self, x: ArrayView2<f64>, t: f64, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        if sigma == 0.0 {
            return Err(DodeError::DivisionGuard("score at sigma_t = 0".into()));
        }
        let x_hat = self.posterior_mean(x, alpha, sigma)?;
        Ok((&x_hat * alpha - x) / (sigma * sigma))
    }

    /// Score through the noise view, `-eps_hat / sigma`.
    pub fn score_via_noise(&self, x: ArrayView2<f64>, t: f64, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
        let (_, eps) = self.both_views(x, t, schedule)?;
        let (_, sigma) = schedule.alpha_sigma(t)?;
        Ok(eps * (-1.0 / sigma))
    }

    /// Closed-form probability-flow transport for Gaussian data.
    pub fn exact_flow_map(
        &self,
        x_from: ArrayView2<f64>,
        t_from: f64,
        t_to: f64,
        schedule: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        let Backend::GaussianAnalytic { mean, std } = &self.backend else {
            return Err(DodeError::Unsupported(
                "exact flow map requires a gaussian-analytic backend".into(),
            ));
        };
        self.check_shape(&x_from)?;
        let (a_from, s_from) = schedule.alpha_sigma(t_from)?;
        let (a_to, s_to) = schedule.alpha_sigma(t_to)?;
        let gamma = |a: f64, s: f64| (a * a * std * std + s * s).sqrt();
        let ratio = gamma(a_to, s_to) / gamma(a_from, s_from);
        let mut out = x_from.to_owned();
        for mut row in out.rows_mut() {
            for (v, &m) in row.iter_mut().zip(mean) {
                *v = a_to * m + ratio * (*v - a_from * m);
            }
        }
        Ok(out)
    }

    /// Draws `n` points from the clean data distribution.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        match &self.backend {
            Backend::GaussianAnalytic { mean, std } => {
                for mut row in out.rows_mut() {
                    for (v, &m) in row.iter_mut().zip(mean) {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = m + std * z;
                    }
                }
            }
            Backend::Gmm { components } => {
                let pick = WeightedIndex::new(components.iter().map(|c| c.weight)).expect("weights");
                for mut row in out.rows_mut() {
                    let c = &components[pick.sample(rng)];
                    for (v, &m) in row.iter_mut().zip(&c.mean) {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = m + c.std * z;
                    }
                }
            }
            Backend::EmpiricalBayes { points } => {
                for mut row in out.rows_mut() {
                    let i = rng.random_range(0..points.nrows());
                    row.assign(&points.row(i));
                }
            }
        }
        out
    }
}

fn noise_from_data(x: ArrayView2<f64>, x_hat: &Array2<f64>, alpha: f64, sigma: f64) -> Result<Array2<f64>> {
    if sigma == 0.0 {
        return Err(DodeError::DivisionGuard(
            "noise prediction at sigma_t = 0".into(),
        ));
    }
    Ok((&x - &(x_hat * alpha)) / sigma)
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Zero-noise limit of the softmax: equal weight on every nearest point.
fn nearest_weights(dist2: &[f64]) -> Vec<f64> {
    let min = dist2.iter().copied().fold(f64::INFINITY, f64::min);
    let ties = dist2.iter().filter(|&&d| d == min).count() as f64;
    dist2
        .iter()
        .map(|&d| if d == min { 1.0 / ties } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    }

    fn two_point() -> DenoiserOracle {
        DenoiserOracle::empirical(Parameterization::DataPrediction, array![[-1.0], [1.0]]).unwrap()
    }

    #[test]
    fn gaussian_conjugate_mean() {
        let o = DenoiserOracle::gaussian(Parameterization::DataPrediction, vec![0.0], 1.0).unwrap();
        let x = array![[2.0]];
        let m = o.posterior_mean(x.view(), 1.0, 1.0).unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        // VE schedule gives alpha = 1, sigma = t.
        let s = NoiseSchedule::ve_karras();
        let sc = o.score(x.view(), 1.0, &s).unwrap();
        assert!((sc[[0, 0]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_symmetry_and_tanh() {
        let o = two_point();
        for sigma in [0.1, 0.5, 2.0] {
            let m = o.posterior_mean(array![[0.0]].view(), 1.0, sigma).unwrap();
            assert_eq!(m[[0, 0]], 0.0);
        }
        let m = o.posterior_mean(array![[0.3]].view(), 1.0, 0.5).unwrap();
        // hand-evaluated tanh(1.2)
        assert!((m[[0, 0]] - 0.833_654_607_012_155).abs() < 1e-12);
    }

    #[test]
    fn empirical_weights_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_batch(&mut rng, 20, 3, 1.0);
        let o = DenoiserOracle::empirical(Parameterization::DataPrediction, pts.clone()).unwrap();
        let x = random_batch(&mut rng, 10, 3, 1.0);
        // small sigma: nearest point
        let m = o.posterior_mean(x.view(), 0.9, 1e-4).unwrap();
        for (xr, mr) in x.rows().into_iter().zip(m.rows()) {
            let best = pts
                .rows()
                .into_iter()
                .min_by(|a, b| {
                    let da: f64 = a.iter().zip(xr.iter()).map(|(p, q)| (q - 0.9 * p).powi(2)).sum();
                    let db: f64 = b.iter().zip(xr.iter()).map(|(p, q)| (q - 0.9 * p).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            for (a, b) in best.iter().zip(mr.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        // huge sigma: dataset mean
        let mean = pts.mean_axis(ndarray::Axis(0)).unwrap();
        let m = o.posterior_mean(x.view(), 1.0, 1e4).unwrap();
        for mr in m.rows() {
            for (a, b) in mr.iter().zip(mean.iter()) {
                assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0));
            }
        }
        // zero sigma on data view: exact nearest, ties split
        let m = two_point().posterior_mean(array![[0.0], [0.7]].view(), 1.0, 0.0).unwrap();
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[1, 0]], 1.0);
        let w = softmax(&[3.0, -1.0, 1000.0, 999.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empirical_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_batch(&mut rng, 15, 2, 1.0);
        let mut rev = pts.clone();
        for i in 0..15 {
            rev.row_mut(i).assign(&pts.row(14 - i));
        }
        let a = DenoiserOracle::empirical(Parameterization::DataPrediction, pts).unwrap();
        let b = DenoiserOracle::empirical(Parameterization::DataPrediction, rev).unwrap();
        let x = random_batch(&mut rng, 30, 2, 1.5);
        let ma = a.posterior_mean(x.view(), 0.8, 0.4).unwrap();
        let mb = b.posterior_mean(x.view(), 0.8, 0.4).unwrap();
        assert!(ma.iter().zip(mb.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn parameterizations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NoiseSchedule::vp_linear();
        let o = crate::presets::gmm_ring(Parameterization::NoisePrediction);
        for _ in 0..20 {
            let t = rng.random_range(0.01..1.0);
            let x = random_batch(&mut rng, 5, 2, 1.0);
            let (a, sig) = s.alpha_sigma(t).unwrap();
            let (xh, eps) = o.both_views(x.view(), t, &s).unwrap();
            let recon = &xh * a + &eps * sig;
            assert!(recon.iter().zip(x.iter()).all(|(p, q)| (p - q).abs() < 1e-10));
            let s1 = o.score(x.view(), t, &s).unwrap();
            let s2 = o.score_via_noise(x.view(), t, &s).unwrap();
            assert!(s1.iter().zip(s2.iter()).all(|(p, q)| (p - q).abs() <= 1e-10 * p.abs().max(1.0)));
        }
    }

    #[test]
    fn single_component_gmm_is_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DenoiserOracle::gaussian(Parameterization::DataPrediction, vec![0.4, -1.0], 0.7).unwrap();
        let m = DenoiserOracle::gmm(
            Parameterization::DataPrediction,
            vec![GmmComponent { weight: 3.0, mean: vec![0.4, -1.0], std: 0.7 }],
        )
        .unwrap();
        let s = NoiseSchedule::vp_linear();
        for _ in 0..100 {
            let t = rng.random_range(s.t_min()..1.0);
            let x = random_batch(&mut rng, 1, 2, 1.0);
            let a = g.denoise(x.view(), t, &s).unwrap().value;
            let b = m.denoise(x.view(), t, &s).unwrap().value;
            assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn division_guard() {
        let o = two_point().with_parameterization(Parameterization::NoisePrediction);
        assert!(matches!(
            noise_from_data(array![[0.0]].view(), &array![[0.0]], 1.0, 0.0),
            Err(DodeError::DivisionGuard(_))
        ));
        // within the schedule domain sigma never vanishes
        let s = NoiseSchedule::ve_karras();
        assert!(o.denoise(array![[0.0]].view(), 0.002, &s).is_ok());
    }

    #[test]
    fn flow_map() {
        let o = DenoiserOracle::gaussian(Parameterization::DataPrediction, vec![0.0], 1.0).unwrap();
        let s = NoiseSchedule::ve_karras();
        let x = array![[1.3], [-0.2]];
        assert_eq!(o.exact_flow_map(x.view(), 1.0, 1.0, &s).unwrap(), x);
        let y = o.exact_flow_map(x.view(), 1.0, 0.002, &s).unwrap();
        let g0 = (1.0f64 + 0.002 * 0.002).sqrt();
        assert!((y[[0, 0]] - 1.3 * g0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((y[[0, 0]] - 1.3 / 2f64.sqrt()).abs() < 2e-6);
        let gm = crate::presets::gmm_ring(Parameterization::DataPrediction);
        assert!(matches!(
            gm.exact_flow_map(array![[0.0, 0.0]].view(), 1.0, 0.5, &NoiseSchedule::vp_linear()),
            Err(DodeError::Unsupported(_))
        ));
    }

    #[test]
    fn shape_checked() {
        let o = two_point();
        assert!(matches!(
            o.posterior_mean(array![[0.0, 1.0]].view(), 1.0, 1.0),
            Err(DodeError::ShapeMismatch { .. })
        ));
    }
}
