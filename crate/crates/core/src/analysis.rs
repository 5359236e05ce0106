//! Trajectory diagnostics and sample-quality metrics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DodeError, Result};
use crate::noise::rng;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Pairwise similarity of denoising outputs across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineMatrix {
    pub matrix: Array2<f64>,
    /// Set when some sample had a zero-norm output; those pairs count as 0.
    pub zero_norm: bool,
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Entry `(i, j)` is the batch mean of the per-sample cosine between outputs `i` and `j`.
pub fn cosine_similarity_matrix(outputs: &[Array2<f64>]) -> Result<CosineMatrix> {
    let n = outputs.len();
    if n == 0 {
        return Err(DodeError::Empty("no denoising outputs recorded".into()));
    }
    let shape = outputs[0].shape();
    if let Some(bad) = outputs.iter().find(|o| o.shape() != shape) {
        return Err(DodeError::ShapeMismatch {
            expected: shape.to_vec(),
            got: bad.shape().to_vec(),
        });
    }
    let rows = outputs[0].nrows();
    if rows == 0 {
        return Err(DodeError::Empty("denoising outputs have no samples".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let entries: Vec<(f64, bool)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut acc = 0.0;
            let mut flagged = false;
            for (a, b) in outputs[i].rows().into_iter().zip(outputs[j].rows()) {
                match cosine(a, b) {
                    Some(c) => acc += c,
                    None => flagged = true,
                }
            }
            (acc / rows as f64, flagged)
        })
        .collect();
    let mut matrix = Array2::eye(n);
    let mut zero_norm = false;
    for (&(i, j), &(v, f)) in pairs.iter().zip(&entries) {
        matrix[[i, j]] = v;
        matrix[[j, i]] = v;
        zero_norm |= f;
    }
    if n == 1 {
        zero_norm = outputs[0].rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0));
    }
    Ok(CosineMatrix { matrix, zero_norm })
}

/// Batch-mean Euclidean norm of each state.
pub fn norm_trace(states: &[Array2<f64>]) -> Vec<f64> {
    states
        .iter()
        .map(|s| {
            if s.nrows() == 0 {
                return 0.0;
            }
            s.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / s.nrows() as f64
        })
        .collect()
}

/// Path of two coordinates of one sample through the trajectory.
pub fn coordinate_trace(states: &[Array2<f64>], sample: usize, coords: (usize, usize)) -> Result<Vec<(f64, f64)>> {
    states
        .iter()
        .map(|s| {
            let (r, c) = s.dim();
            if sample >= r || coords.0 >= c || coords.1 >= c {
                return Err(DodeError::Domain(format!(
                    "coordinate ({sample}, {}, {}) outside a {r}x{c} state",
                    coords.0, coords.1
                )));
            }
            Ok((s[[sample, coords.0]], s[[sample, coords.1]]))
        })
        .collect()
}

/// Exact 2-Wasserstein distance between two empirical measures on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DodeError::Empty("wasserstein needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((s / n as f64).sqrt());
    }
    // walk the merged quantile breakpoints k/n and l/m, in integer units of 1/(n m)
    let (mut i, mut j) = (0usize, 0usize);
    let (mut pos, total) = (0u128, (n as u128) * (m as u128));
    let mut acc = 0.0;
    while pos < total {
        let next_a = (i as u128 + 1) * m as u128;
        let next_b = (j as u128 + 1) * n as u128;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += d * d * (next - pos) as f64;
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    Ok((acc / total as f64).sqrt())
}

/// Random unit directions, one per row, from a seeded generator.
pub fn projection_directions(dim: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let mut out = Array2::zeros((n, dim));
    for mut row in out.rows_mut() {
        loop {
            row.mapv_inplace(|_: f64| StandardNormal.sample(&mut r));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

/// Average over random projections of the 1D 2-Wasserstein distance.
pub fn sliced_wasserstein(a: ArrayView2<f64>, b: ArrayView2<f64>, n_projections: usize, seed: u64) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(DodeError::Empty("sliced wasserstein needs non-empty batches".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(DodeError::ShapeMismatch {
            expected: vec![b.nrows(), a.ncols()],
            got: b.shape().to_vec(),
        });
    }
    if n_projections == 0 {
        return Err(DodeError::Config("n_projections must be at least 1".into()));
    }
    let dirs = projection_directions(a.ncols(), n_projections, seed);
    let per: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|k| {
            let d = dirs.row(k);
            let pa: Array1<f64> = a.dot(&d);
            let pb: Array1<f64> = b.dot(&d);
            wasserstein_1d(pa.as_slice().unwrap(), pb.as_slice().unwrap())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / n_projections as f64)
}

/// Least-squares slope of `log(error)` against `log(1 / steps)`.
pub fn convergence_order(errors: &[(usize, f64)]) -> Result<f64> {
    if errors.len() < 2 {
        return Err(DodeError::Config("convergence order needs at least two points".into()));
    }
    if errors.iter().any(|&(n, e)| n == 0 || !(e > 0.0) || !e.is_finite()) {
        return Err(DodeError::Domain("convergence order needs positive steps and errors".into()));
    }
    let xs: Vec<f64> = errors.iter().map(|&(n, _)| -(n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|&(_, e)| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DodeError::Domain("convergence order needs distinct step counts".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Mean Euclidean distance between paired rows.
pub fn mean_row_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DodeError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if a.nrows() == 0 {
        return Err(DodeError::Empty("no rows".into()));
    }
    let diff = &a - &b;
    Ok(diff.map_axis(Axis(1), |r| r.dot(&r).sqrt()).sum() / a.nrows() as f64)
}

/// Fraction of rows where `candidate` is strictly closer to `reference` than `baseline` is.
pub fn closer_fraction(candidate: ArrayView2<f64>, baseline: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    if candidate.shape() != reference.shape() || baseline.shape() != reference.shape() {
        return Err(DodeError::ShapeMismatch {
            expected: reference.shape().to_vec(),
            got: candidate.shape().to_vec(),
        });
    }
    if reference.nrows() == 0 {
        return Err(DodeError::Empty("no rows".into()));
    }
    let dist = |x: ArrayView1<f64>, y: ArrayView1<f64>| (&x - &y).mapv(|v| v * v).sum();
    let wins = (0..reference.nrows())
        .filter(|&i| dist(candidate.row(i), reference.row(i)) < dist(baseline.row(i), reference.row(i)))
        .count();
    Ok(wins as f64 / reference.nrows() as f64)
}

/// Largest pointwise relative deviation `|x_i - r_i| / |r_i|`.
pub fn max_relative_deviation(series: &[f64], reference: &[f64]) -> Result<f64> {
    if series.len() != reference.len() {
        return Err(DodeError::ShapeMismatch {
            expected: vec![reference.len()],
            got: vec![series.len()],
        });
    }
    Ok(series
        .iter()
        .zip(reference)
        .map(|(x, r)| if *r == 0.0 { (x - r).abs() } else { ((x - r) / r).abs() })
        .fold(0.0, f64::max))
}

/// A named scalar with enough metadata to re-run it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(DodeError::NonFinite {
                step: 0,
                what: format!("metric {name}"),
            });
        }
        Ok(Self {
            name,
            value,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_matrix_basics() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let m = cosine_similarity_matrix(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(m.matrix.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(!m.zero_norm);
        let b = array![[0.0, 1.0], [0.0, -3.0]];
        let m = cosine_similarity_matrix(&[a.clone(), b]).unwrap();
        // sample 0 orthogonal, sample 1 opposite: mean (0 - 1) / 2
        assert!((m.matrix[[0, 1]] + 0.5).abs() < 1e-15);
        assert_eq!(m.matrix[[0, 1]], m.matrix[[1, 0]]);
        let z = array![[0.0, 0.0], [0.0, 1.0]];
        let m = cosine_similarity_matrix(&[a, z]).unwrap();
        assert!(m.zero_norm);
        assert_eq!(m.matrix[[0, 0]], 1.0);
        assert!((m.matrix[[0, 1]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn traces() {
        let z = Array2::<f64>::zeros((3, 2));
        assert_eq!(norm_trace(&[z.clone(), z.clone()]), vec![0.0, 0.0]);
        assert_eq!(norm_trace(&[array![[3.0, 4.0], [0.0, 1.0]]]), vec![3.0]);
        let s = array![[1.0, 2.0, 3.0]];
        assert_eq!(coordinate_trace(&[s.clone(), s.clone()], 0, (2, 0)).unwrap(), vec![(3.0, 1.0); 2]);
        assert!(coordinate_trace(std::slice::from_ref(&s), 0, (0, 3)).is_err());
        assert!(coordinate_trace(&[s], 1, (0, 1)).is_err());
    }

    #[test]
    fn wasserstein_small_cases() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), 0.0);
        // {0} against {0, 2}: half the mass moves by 2, W2^2 = 2
        assert!((wasserstein_1d(&[0.0], &[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        // {0, 1} against {0, 1, 2} by quantiles: W2^2 = (1/3)(0) + (1/6)(1) + (1/6)(0) + (1/3)(1) = 1/2
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0, 2.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn sliced_matches_exact_in_one_dimension() {
        let a = array![[0.3], [-1.2], [2.0]];
        let b = array![[0.0], [1.0], [5.0]];
        let sw = sliced_wasserstein(a.view(), b.view(), 7, 3).unwrap();
        let w = wasserstein_1d(&[0.3, -1.2, 2.0], &[0.0, 1.0, 5.0]).unwrap();
        assert!((sw - w).abs() < 1e-14);
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 16, 0).unwrap(), 0.0);
        assert!(sliced_wasserstein(a.view(), Array2::zeros((0, 1)).view(), 4, 0).is_err());
        assert!(sliced_wasserstein(a.view(), b.view(), 0, 0).is_err());
    }

    #[test]
    fn convergence_slope() {
        let s = convergence_order(&[(10, 0.1), (20, 0.025)]).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(convergence_order(&[(10, 0.1)]).is_err());
        assert!(convergence_order(&[(10, 0.1), (10, 0.2)]).is_err());
    }

    #[test]
    fn metric_report_rejects_non_finite() {
        assert!(MetricReport::new("x", f64::NAN).is_err());
        let m = MetricReport::new("sw", 0.5).unwrap().with("steps", 10);
        assert_eq!(m.metadata["steps"], "10");
    }
}
