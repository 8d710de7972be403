//! Distances between embedding sets: Fréchet distance between Gaussian fits
//! (FID) and the unbiased squared maximum mean discrepancy with a Gaussian
//! kernel (the CMMD estimator), plus relative-difference reporting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_CLIP_RELATIVE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistanceError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding set '{0}' contains a non-finite value")]
    NonFinite(String),
    #[error("embedding set '{label}' has {n} samples, at least {required} needed")]
    TooFewSamples { label: String, n: usize, required: usize },
    #[error("embedding buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("baseline '{0}' is missing from the values")]
    MissingBaseline(String),
    #[error("baseline '{0}' is zero")]
    ZeroBaseline(String),
}

/// `n` row-major vectors of dimension `d`.
#[derive(Clone, PartialEq, Debug)]
pub struct EmbeddingSet {
    label: String,
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(label: impl Into<String>, n: usize, d: usize, data: Vec<f64>) -> Result<Self, DistanceError> {
        let label = label.into();
        if data.len() != n * d {
            return Err(DistanceError::BufferSize {
                expected: n * d,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DistanceError::NonFinite(label));
        }
        Ok(EmbeddingSet { label, n, d, data })
    }

    pub fn from_rows(label: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, DistanceError> {
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(DistanceError::DimensionMismatch(d, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(label, rows.len(), d, data)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn require(&self, required: usize) -> Result<(), DistanceError> {
        if self.n < required {
            return Err(DistanceError::TooFewSamples {
                label: self.label.clone(),
                n: self.n,
                required,
            });
        }
        Ok(())
    }

    /// Sample mean and unbiased (n - 1) covariance.
    pub fn mean_and_covariance(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(self.n, self.d, &self.data);
        let mean = x.row_mean().transpose();
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (self.n as f64 - 1.0);
        (mean, cov)
    }
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn clipped_eigenvalues(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetric_part(m));
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = EIGEN_CLIP_RELATIVE * max;
    let values = eig.eigenvalues.map(|v| if v < floor { 0.0 } else { v });
    (values, eig.eigenvectors)
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = clipped_eigenvalues(m);
    let roots = DMatrix::from_diagonal(&values.map(libm::sqrt));
    &vectors * roots * vectors.transpose()
}

/// Trace of (A B)^(1/2) for symmetric PSD A, B, via the symmetric product
/// A^(1/2) B A^(1/2), which has the same eigenvalues.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let root_a = psd_sqrt(a);
    let inner = &root_a * b * &root_a;
    let (values, _) = clipped_eigenvalues(&inner);
    values.iter().map(|&v| libm::sqrt(v)).sum()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, DistanceError> {
    if a.d != b.d {
        return Err(DistanceError::DimensionMismatch(a.d, b.d));
    }
    a.require(2)?;
    b.require(2)?;
    let (mu_a, cov_a) = a.mean_and_covariance();
    let (mu_b, cov_b) = b.mean_and_covariance();
    Ok(frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}

pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let mean_term = (mu_a - mu_b).norm_squared();
    mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b)
}

fn squared_norms(set: &EmbeddingSet) -> Vec<f64> {
    (0..set.n)
        .map(|i| set.row(i).iter().map(|v| v * v).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unbiased U-statistic estimate of MMD^2 with kernel
/// `exp(-||x - y||^2 / (2 h^2))`. May be slightly negative.
pub fn mmd_squared(a: &EmbeddingSet, b: &EmbeddingSet, bandwidth: f64) -> Result<f64, DistanceError> {
    if bandwidth.partial_cmp(&0.0) != Some(core::cmp::Ordering::Greater) || !bandwidth.is_finite() {
        return Err(DistanceError::InvalidBandwidth(bandwidth));
    }
    if a.d != b.d {
        return Err(DistanceError::DimensionMismatch(a.d, b.d));
    }
    a.require(2)?;
    b.require(2)?;
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let norms_a = squared_norms(a);
    let norms_b = squared_norms(b);
    let kernel = |x: &[f64], nx: f64, y: &[f64], ny: f64| {
        let d2 = (nx + ny - 2.0 * dot(x, y)).max(0.0);
        libm::exp(-gamma * d2)
    };

    let within = |set: &EmbeddingSet, norms: &[f64]| {
        let mut sum = 0.0;
        for i in 0..set.n {
            for j in i + 1..set.n {
                sum += kernel(set.row(i), norms[i], set.row(j), norms[j]);
            }
        }
        2.0 * sum / (set.n as f64 * (set.n as f64 - 1.0))
    };
    let mut cross = 0.0;
    for (i, &na) in norms_a.iter().enumerate() {
        for (j, &nb) in norms_b.iter().enumerate() {
            cross += kernel(a.row(i), na, b.row(j), nb);
        }
    }
    let cross = cross / (a.n as f64 * b.n as f64);
    Ok(within(a, &norms_a) + within(b, &norms_b) - 2.0 * cross)
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RelativeDelta {
    pub label: String,
    pub value: f64,
    /// 100 * (value - baseline) / baseline.
    pub percent: f64,
}

impl RelativeDelta {
    pub fn formatted(&self) -> String {
        format_pp(self.percent)
    }
}

/// Percent difference of every labelled value against `baseline_label`.
/// The baseline itself is left out of the output.
pub fn relative_report(values: &[(String, f64)], baseline_label: &str) -> Result<Vec<RelativeDelta>, DistanceError> {
    let baseline = values
        .iter()
        .find(|(label, _)| label == baseline_label)
        .map(|(_, v)| *v)
        .ok_or_else(|| DistanceError::MissingBaseline(baseline_label.into()))?;
    if baseline == 0.0 {
        return Err(DistanceError::ZeroBaseline(baseline_label.into()));
    }
    Ok(values
        .iter()
        .filter(|(label, _)| label != baseline_label)
        .map(|(label, value)| RelativeDelta {
            label: label.clone(),
            value: *value,
            percent: 100.0 * (value - baseline) / baseline,
        })
        .collect())
}

/// Signed whole percentage points, e.g. `+126 pp`.
pub fn format_pp(percent: f64) -> String {
    let rounded = libm::round(percent);
    if rounded >= 0.0 {
        format!("+{} pp", rounded.abs() as i64)
    } else {
        format!("-{} pp", (-rounded) as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(label: &str, n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingSet::new(label, n, d, data).unwrap()
    }

    /// Direct double loop over ordered pairs i != j.
    fn mmd_oracle(a: &EmbeddingSet, b: &EmbeddingSet, h: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            libm::exp(-d2 / (2.0 * h * h))
        };
        let (m, n) = (a.len() as f64, b.len() as f64);
        let mut xx = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    xx += k(a.row(i), a.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..b.len() {
            for j in 0..b.len() {
                if i != j {
                    yy += k(b.row(i), b.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                xy += k(a.row(i), b.row(j));
            }
        }
        xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let a = random_set("a", 200, 6, 1);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn scalar_fid_matches_closed_form() {
        // d = 1, equal means: FID = (sigma_a - sigma_b)^2.
        let a = EmbeddingSet::new("a", 4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let b = EmbeddingSet::new("b", 4, 1, vec![-3.0, 3.0, -3.0, 3.0]).unwrap();
        // Unbiased variances: 4/3 and 36/3.
        let expected = (libm::sqrt(4.0 / 3.0) - libm::sqrt(12.0)).powi(2);
        assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn fid_is_symmetric() {
        let a = random_set("a", 120, 5, 2);
        let b = random_set("b", 90, 5, 3);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn fid_input_errors() {
        let a = random_set("a", 10, 3, 4);
        let b = random_set("b", 10, 4, 5);
        assert_eq!(fid(&a, &b), Err(DistanceError::DimensionMismatch(3, 4)));
        let one = random_set("one", 1, 3, 6);
        assert!(matches!(fid(&a, &one), Err(DistanceError::TooFewSamples { .. })));
        assert!(matches!(
            EmbeddingSet::new("nan", 1, 1, vec![f64::NAN]),
            Err(DistanceError::NonFinite(_))
        ));
    }

    #[test]
    fn mmd_matches_brute_force() {
        let a = random_set("a", 60, 4, 7);
        let b = random_set("b", 45, 4, 8);
        let fast = mmd_squared(&a, &b, 0.8).unwrap();
        assert!((fast - mmd_oracle(&a, &b, 0.8)).abs() < 1e-10);
    }

    #[test]
    fn mmd_of_two_point_clusters() {
        // n copies at 0 and n copies at r: within-set kernels are 1, cross
        // kernels exp(-r^2 / 2h^2) -> MMD^2 = 2 (1 - exp(-r^2 / 2h^2)).
        let n = 50;
        let r = 1.5;
        let h = 1.0;
        let a = EmbeddingSet::new("a", n, 2, vec![0.0; 2 * n]).unwrap();
        let b = EmbeddingSet::new("b", n, 2, (0..n).flat_map(|_| [r, 0.0]).collect()).unwrap();
        let expected = 2.0 * (1.0 - libm::exp(-r * r / (2.0 * h * h)));
        assert!((mmd_squared(&a, &b, h).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mmd_rejects_bad_bandwidth() {
        let a = random_set("a", 5, 2, 9);
        assert_eq!(mmd_squared(&a, &a, 0.0), Err(DistanceError::InvalidBandwidth(0.0)));
        assert!(mmd_squared(&a, &a, -1.0).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let a = random_set("a", 40, 3, 10);
        let b = random_set("b", 30, 3, 11);
        let mut rows: Vec<Vec<f64>> = (0..a.len()).map(|i| a.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let a2 = EmbeddingSet::from_rows("a2", &rows).unwrap();
        assert!((fid(&a, &b).unwrap() - fid(&a2, &b).unwrap()).abs() < 1e-9);
        assert!((mmd_squared(&a, &b, 1.0).unwrap() - mmd_squared(&a2, &b, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn relative_report_formats_percentage_points() {
        let values = vec![("U".into(), 74.48), ("G".into(), 168.45), ("I".into(), 186.42)];
        let deltas = relative_report(&values, "U").unwrap();
        assert_eq!(deltas.len(), 2);
        assert_eq!(deltas[0].formatted(), "+126 pp");
        assert_eq!(deltas[1].formatted(), "+150 pp");
        let same = relative_report(&[("U".into(), 2.0), ("V".into(), 2.0)], "U").unwrap();
        assert_eq!(same[0].formatted(), "+0 pp");
        assert_eq!(format_pp(-12.4), "-12 pp");
        assert_eq!(format_pp(-0.2), "+0 pp");
    }

    #[test]
    fn relative_report_errors() {
        assert!(matches!(
            relative_report(&[("U".into(), 0.0)], "U"),
            Err(DistanceError::ZeroBaseline(_))
        ));
        assert!(matches!(
            relative_report(&[("U".into(), 1.0)], "X"),
            Err(DistanceError::MissingBaseline(_))
        ));
    }

    fn gaussian_set(label: &str, n: usize, mean: &[f64], seed: u64) -> EmbeddingSet {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * mean.len());
        for _ in 0..n {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + z);
            }
        }
        EmbeddingSet::new(label, n, mean.len(), data).unwrap()
    }

    #[test]
    fn fid_of_shifted_isotropic_gaussians_is_squared_shift() {
        let zero = [0.0; 8];
        let shift = [1.0, -0.5, 0.5, 0.0, 1.0, 0.0, -1.0, 0.5];
        let delta2: f64 = shift.iter().map(|v| v * v).sum();
        let a = gaussian_set("a", 50_000, &zero, 21);
        let b = gaussian_set("b", 50_000, &shift, 22);
        let value = fid(&a, &b).unwrap();
        assert!((value - delta2).abs() / delta2 < 0.02, "fid {value} vs {delta2}");
    }

    #[test]
    fn fid_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for trial in 0..5 {
            let d = 5;
            let raw = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let q = raw.qr().q();
            let a = random_set("a", 80, d, 31 + trial);
            let b = gaussian_set("b", 70, &[0.3, 0.0, -0.2, 0.1, 0.0], 41 + trial);
            let rotate = |set: &EmbeddingSet| {
                let x = DMatrix::from_row_slice(set.len(), d, &set.data);
                let y = x * q.transpose();
                let mut data = Vec::with_capacity(set.len() * d);
                for row in y.row_iter() {
                    data.extend(row.iter().copied());
                }
                EmbeddingSet::new(set.label(), set.len(), d, data).unwrap()
            };
            let before = fid(&a, &b).unwrap();
            let after = fid(&rotate(&a), &rotate(&b)).unwrap();
            assert!((before - after).abs() < 1e-6, "{before} vs {after}");
        }
    }

    #[test]
    fn self_mmd_is_unbiased() {
        // Split draws from one distribution; the mean over resamples should sit
        // within three standard errors of zero.
        let mut values = Vec::new();
        for seed in 0..100 {
            let a = gaussian_set("a", 40, &[0.0; 3], 1000 + seed);
            let b = gaussian_set("b", 40, &[0.0; 3], 5000 + seed);
            values.push(mmd_squared(&a, &b, 1.0).unwrap());
        }
        let (mean, std) = crate::mean_std(&values).unwrap();
        let stderr = std / libm::sqrt(values.len() as f64);
        assert!(mean.abs() <= 3.0 * stderr, "mean {mean}, stderr {stderr}");
    }

    #[test]
    fn mmd_matches_brute_force_at_n_200() {
        let a = random_set("a", 200, 6, 50);
        let b = random_set("b", 200, 6, 51);
        let fast = mmd_squared(&a, &b, 1.3).unwrap();
        assert!((fast - mmd_oracle(&a, &b, 1.3)).abs() < 1e-10);
    }
}
