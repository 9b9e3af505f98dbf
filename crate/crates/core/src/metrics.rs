//! Gaussian feature fits and the Fréchet distance between them, plus a
//! fixed video featurizer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::VideoTensor;

/// Negative eigenvalues down to `-EIGEN_CLIP · max(1, ‖λ‖∞)` are treated as
/// round-off and clipped to zero.
pub const EIGEN_CLIP: f64 = 1e-6;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_samples: usize,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianFit, MetricsError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(MetricsError::DimensionMismatch { expected: d, got: bad.len() });
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NumericalFailure("non-finite sample".into()));
    }
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(d, n);
    for (j, s) in samples.iter().enumerate() {
        for i in 0..d {
            centered[(i, j)] = s[i] - mean[i];
        }
    }
    let mut cov = &centered * centered.transpose() / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(GaussianFit { mean, cov, n_samples: n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    SymmetricEigen::try_new(m, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| MetricsError::NumericalFailure(format!("eigendecomposition of {what} did not converge")))
}

fn clipped(values: &DVector<f64>, what: &str) -> Result<Vec<f64>, MetricsError> {
    let scale = values.amax().max(1.0);
    values
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l >= -EIGEN_CLIP * scale {
                Ok(0.0)
            } else {
                Err(MetricsError::NumericalFailure(format!("{what} has eigenvalue {l}")))
            }
        })
        .collect()
}

/// Principal square root of a symmetric positive-semidefinite matrix.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, MetricsError> {
    let e = eigen(m.clone(), what)?;
    let roots = DVector::from_vec(clipped(&e.eigenvalues, what)?.into_iter().map(f64::sqrt).collect());
    let v = &e.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, with the trace of the
/// square root taken as `Tr √(√Σ_a Σ_b √Σ_a)`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let diff = &a.mean - &b.mean;
    let sqrt_a = sqrt_psd(&a.cov, "first covariance")?;
    let mut inner = &sqrt_a * &b.cov * &sqrt_a;
    symmetrize(&mut inner);
    let e = eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = clipped(&e.eigenvalues, "covariance product")?.into_iter().map(f64::sqrt).sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(MetricsError::NumericalFailure(format!("distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Per-frame channel means, then per-frame channel variances, then the mean
/// squared difference between consecutive frames. Length `2·c·f + f − 1`.
pub fn feature_extract(video: &VideoTensor) -> Vec<f64> {
    let s = video.shape();
    let (c, pixels) = (s.channels, (s.height * s.width) as f64);
    let mut means = Vec::with_capacity(s.frames * c);
    let mut vars = Vec::with_capacity(s.frames * c);
    for f in 0..s.frames {
        let frame = video.frame(f);
        for ch in 0..c {
            let m = frame.iter().skip(ch).step_by(c).sum::<f64>() / pixels;
            let v = frame.iter().skip(ch).step_by(c).map(|x| (x - m).powi(2)).sum::<f64>() / pixels;
            means.push(m);
            vars.push(v);
        }
    }
    let energy = (1..s.frames).map(|f| {
        let (prev, cur) = (video.frame(f - 1), video.frame(f));
        prev.iter().zip(cur).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / cur.len() as f64
    });
    means.into_iter().chain(vars).chain(energy).collect()
}

pub fn feature_dim(frames: usize, channels: usize) -> usize {
    2 * channels * frames + frames.saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::VideoShape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn diag_fit(mean: &[f64], var: &[f64]) -> GaussianFit {
        GaussianFit {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            n_samples: 100,
        }
    }

    #[test]
    fn equal_samples_have_zero_covariance() {
        let fit = fit_gaussian(&vec![vec![1.5, -2.0]; 5]).unwrap();
        assert_eq!(fit.mean.as_slice(), &[1.5, -2.0]);
        assert!(fit.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_fit_is_unbiased() {
        let fit = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(fit.mean[0], 1.0);
        assert_eq!(fit.cov[(0, 0)], 2.0);
        assert_eq!(fit_gaussian(&[vec![0.0]]), Err(MetricsError::TooFewSamples(1)));
        assert!(matches!(
            fit_gaussian(&[vec![0.0], vec![1.0, 2.0]]),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn standard_normal_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<f64>> = (0..100_000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let fit = fit_gaussian(&samples).unwrap();
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((fit.cov - id).amax() < 0.05);
    }

    #[test]
    fn unit_shift_in_one_dimension() {
        let d = frechet_distance(&diag_fit(&[0.0], &[1.0]), &diag_fit(&[1.0], &[1.0])).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!(matches!(
            frechet_distance(&diag_fit(&[0.0], &[1.0]), &diag_fit(&[0.0, 0.0], &[1.0, 1.0])),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    fn random_diag(rng: &mut ChaCha8Rng, d: usize) -> GaussianFit {
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..4.0)).collect();
        diag_fit(&mean, &var)
    }

    #[test]
    fn diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = rng.random_range(1..8);
            let (a, b) = (random_diag(&mut rng, d), random_diag(&mut rng, d));
            let expected: f64 = (0..d)
                .map(|i| (a.mean[i] - b.mean[i]).powi(2) + (a.cov[(i, i)].sqrt() - b.cov[(i, i)].sqrt()).powi(2))
                .sum();
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
            assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        }
    }

    fn random_fit(seed: u64, d: usize, n: usize, shift: f64) -> GaussianFit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                (&mix * z).iter().map(|v| v + shift).collect()
            })
            .collect();
        fit_gaussian(&samples).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, d in 1usize..6, shift in -2.0f64..2.0) {
            let a = random_fit(s1, d, 40, 0.0);
            let b = random_fit(s2, d, 40, shift);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-9 * a.cov.trace().max(1.0));
        }

        #[test]
        fn scaling_samples_scales_distance(s1 in 0u64..1000, s2 in 0u64..1000, k in 0.1f64..5.0) {
            let a = random_fit(s1, 3, 30, 0.0);
            let b = random_fit(s2, 3, 30, 1.0);
            let scale = |f: &GaussianFit| GaussianFit { mean: &f.mean * k, cov: &f.cov * (k * k), n_samples: f.n_samples };
            let d = frechet_distance(&a, &b).unwrap();
            let dk = frechet_distance(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((dk - k * k * d).abs() < 1e-8 * dk.max(1.0));
        }
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let bad = GaussianFit {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
            n_samples: 2,
        };
        assert!(matches!(
            frechet_distance(&bad, &diag_fit(&[0.0, 0.0], &[1.0, 1.0])),
            Err(MetricsError::NumericalFailure(_))
        ));
    }

    fn ramp_video(shape: VideoShape, offset: f64) -> VideoTensor {
        let data = (0..shape.len()).map(|i| ((i * 37) % 11) as f64 * 0.1 + offset).collect();
        VideoTensor::new(shape, data, 24.0).unwrap()
    }

    #[test]
    fn features_of_constant_video() {
        let shape = VideoShape::new(4, 3, 5, 2);
        let v = VideoTensor::new(shape, vec![0.7; shape.len()], 24.0).unwrap();
        let f = feature_extract(&v);
        assert_eq!(f.len(), 2 * 2 * 4 + 3);
        assert_eq!(f.len(), feature_dim(4, 2));
        assert!(f[..8].iter().all(|&m| (m - 0.7).abs() < 1e-12));
        assert!(f[8..].iter().all(|&x| x.abs() < 1e-24));
    }

    #[test]
    fn feature_shift_property() {
        let shape = VideoShape::new(3, 4, 4, 3);
        let (a, b) = (ramp_video(shape, 0.0), ramp_video(shape, 0.25));
        let (fa, fb) = (feature_extract(&a), feature_extract(&b));
        let nm = 3 * 3;
        for i in 0..nm {
            assert!((fb[i] - fa[i] - 0.25).abs() < 1e-12);
        }
        for i in nm..fa.len() {
            assert!((fb[i] - fa[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn report_json_fields() {
        let r = MetricReport { metric: "frechet".into(), value: 0.5, n_samples: 10, config_hash: "ab".into() };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["metric"], "frechet");
        assert_eq!(v["n_samples"], 10);
        assert_eq!(v["config_hash"], "ab");
    }
}
