//! EDM diffusion: variance-exploding corruption, the preconditioned
//! denoiser `D(x; σ) = c_out(σ)·F(c_in(σ)·x) + c_skip(σ)·x`, the weighted
//! denoising loss, and a toy trainable network standing in for `F`.

mod checkpoint;
mod denoiser;
mod train;
mod video;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use denoiser::{DenoiserConfig, Dense, Gradients, ToyDenoiser};
pub use train::{cosine_lr, train_toy, Optimizer, TrainConfig, TrainExample, TrainReport};
pub use video::{VideoShape, VideoTensor, VIDEO_MAGIC, VIDEO_VERSION};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Log-normal training noise: `ln σ ~ N(p_mean, p_std²)`.
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let ok = self.sigma_data > 0.0
            && self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.sigma_max.is_finite()
            && self.rho > 0.0
            && self.p_std >= 0.0
            && self.p_mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Preconditioning coefficients for one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalings {
    pub c_in: f64,
    pub c_out: f64,
    pub c_skip: f64,
}

pub fn scalings(sigma: f64, sigma_data: f64) -> Scalings {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let norm = (s2 + d2).sqrt();
    Scalings {
        c_in: 1.0 / norm,
        c_out: sigma * sigma_data / norm,
        c_skip: d2 / (s2 + d2),
    }
}

/// Loss weight `λ(σ) = (σ² + σ_d²) / (σ·σ_d)²`, which makes `λ·c_out² = 1`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Noise-level input to the network, `ln(σ)/4`.
pub fn noise_embedding(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// `x_σ = x + σ·ε`.
pub fn perturb(x: &VideoTensor, sigma: f64, noise: &VideoTensor) -> Result<VideoTensor, DiffusionError> {
    if x.shape() != noise.shape() {
        return Err(DiffusionError::ShapeMismatch {
            expected: x.shape().to_string(),
            got: noise.shape().to_string(),
        });
    }
    let data = x.data().iter().zip(noise.data()).map(|(a, e)| a + sigma * e).collect();
    x.with_data(data)
}

/// Draws a training noise level, clamped to `[σ_min, σ_max]`.
pub fn sample_sigma<R: Rng + ?Sized>(config: &DiffusionConfig, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (config.p_mean + config.p_std * z).exp().clamp(config.sigma_min, config.sigma_max)
}

/// Unit Gaussian noise with the given shape.
pub fn gaussian_noise<R: Rng + ?Sized>(shape: VideoShape, framerate: f64, rng: &mut R) -> VideoTensor {
    let data: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
    VideoTensor::new(shape, data, framerate).expect("gaussian noise is finite")
}

/// Posterior mean `E[x | x_σ]` for data drawn elementwise from
/// `N(μ_d, σ_d²)`: `(σ_d²·x_σ + σ²·μ_d) / (σ_d² + σ²)`.
pub fn gaussian_oracle_denoiser(mu_d: &[f64], sigma_d: f64, x_sigma: &[f64], sigma: f64) -> Vec<f64> {
    let d2 = sigma_d * sigma_d;
    let s2 = sigma * sigma;
    x_sigma
        .iter()
        .zip(mu_d.iter().cycle())
        .map(|(&x, &mu)| (d2 * x + s2 * mu) / (d2 + s2))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn log_spaced(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
    }

    #[test]
    fn zero_sigma_limits() {
        let s = scalings(0.0, 0.5);
        assert_eq!(s.c_in, 2.0);
        assert_eq!(s.c_out, 0.0);
        assert_eq!(s.c_skip, 1.0);
    }

    #[test]
    fn sigma_equals_sigma_data() {
        let s = scalings(0.5, 0.5);
        assert!((s.c_skip - 0.5).abs() < 1e-15);
        assert!((s.c_out - 0.25 / 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.c_in - 1.0 / 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn algebraic_identities() {
        let cfg = DiffusionConfig::default();
        for sigma in log_spaced(cfg.sigma_min, cfg.sigma_max, 1000) {
            let d = cfg.sigma_data;
            let s = scalings(sigma, d);
            let v = sigma * sigma + d * d;
            assert!((s.c_in * s.c_in * v - 1.0).abs() < 1e-12);
            assert!((loss_weight(sigma, d) * s.c_out * s.c_out - 1.0).abs() < 1e-12);
            assert!((s.c_skip * v - d * d).abs() < 1e-12);
        }
    }

    #[test]
    fn perturb_edge_cases_and_variance() {
        let shape = VideoShape::new(10, 100, 100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_noise(shape, 24.0, &mut rng);
        let eps = gaussian_noise(shape, 24.0, &mut rng);
        assert_eq!(perturb(&x, 0.0, &eps).unwrap(), x);
        assert_eq!(perturb(&x, 3.0, &VideoTensor::zeros(shape, 24.0)).unwrap(), x);

        let sigma = 1.7;
        let xs = perturb(&x, sigma, &eps).unwrap();
        let diffs: Vec<f64> = xs.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = sigma * sigma * (2.0 / (n - 1.0)).sqrt();
        assert!((var - sigma * sigma).abs() < 3.0 * se, "var {var}");

        let wrong = VideoTensor::zeros(VideoShape::new(1, 1, 1, 1), 24.0);
        assert!(perturb(&x, 1.0, &wrong).is_err());
    }

    #[test]
    fn unit_variance_network_input() {
        let sigma_d = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        for sigma in [0.01, 0.5, 3.0, 40.0] {
            let s = scalings(sigma, sigma_d);
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = sigma_d * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    let e: f64 = StandardNormal.sample(&mut rng);
                    s.c_in * (x + sigma * e)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "sigma {sigma} var {var}");
        }
    }

    #[test]
    fn sigma_sampling() {
        let mut cfg = DiffusionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_sigma(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|&s| s >= cfg.sigma_min && s <= cfg.sigma_max));
        draws.sort_by(f64::total_cmp);
        let median = draws[draws.len() / 2];
        assert!((median / cfg.p_mean.exp() - 1.0).abs() < 0.02, "median {median}");

        cfg.p_std = 0.0;
        for _ in 0..10 {
            assert_eq!(sample_sigma(&cfg, &mut rng), cfg.p_mean.exp());
        }
    }

    #[test]
    fn oracle_limits() {
        let mu = [0.3, -0.2];
        let x = [1.0, 2.0];
        assert_eq!(gaussian_oracle_denoiser(&mu, 0.5, &x, 0.0), x.to_vec());
        let far = gaussian_oracle_denoiser(&mu, 0.5, &x, 1e6);
        for (f, m) in far.iter().zip(mu) {
            assert!(((f - m) / m).abs() < 1e-6);
        }
    }

    // Empirical loss of a candidate denoiser on Gaussian data at one sigma.
    fn empirical_loss(
        denoise: impl Fn(f64) -> f64,
        mu: f64,
        sigma_d: f64,
        sigma: f64,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> f64 {
        let lambda = loss_weight(sigma, sigma_d);
        (0..n)
            .map(|_| {
                let x: f64 = mu + sigma_d * Distribution::<f64>::sample(&StandardNormal, rng);
                let e: f64 = StandardNormal.sample(rng);
                let d = denoise(x + sigma * e);
                lambda * (d - x).powi(2)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn oracle_is_optimal_among_perturbations() {
        let (mu, sd) = (0.3, 0.5);
        for sigma in [0.1, 0.5, 2.0] {
            let oracle = |x: f64| gaussian_oracle_denoiser(&[mu], sd, &[x], sigma)[0];
            let base = empirical_loss(oracle, mu, sd, sigma, &mut ChaCha8Rng::seed_from_u64(1), 10_000);
            for delta in [-0.05, 0.05] {
                let shifted = |x: f64| oracle(x) + delta;
                let scaled = |x: f64| oracle(x) * (1.0 + delta);
                // Common random numbers: the same seed for every candidate.
                let l1 = empirical_loss(shifted, mu, sd, sigma, &mut ChaCha8Rng::seed_from_u64(1), 10_000);
                let l2 = empirical_loss(scaled, mu, sd, sigma, &mut ChaCha8Rng::seed_from_u64(1), 10_000);
                assert!(base < l1 && base < l2, "sigma {sigma} delta {delta}: {base} {l1} {l2}");
            }
        }
    }

    #[test]
    fn oracle_loss_is_irreducible_floor() {
        // With λ·c_out² = 1 the Bayes-optimal per-element loss on Gaussian data is exactly 1.
        let (mu, sd) = (0.3, 0.5);
        for sigma in [0.2, 1.0, 5.0] {
            let n = 100_000;
            let oracle = |x: f64| gaussian_oracle_denoiser(&[mu], sd, &[x], sigma)[0];
            let s = scalings(sigma, sd);
            let zero_net = |x: f64| s.c_skip * x;
            let lo = empirical_loss(oracle, mu, sd, sigma, &mut ChaCha8Rng::seed_from_u64(4), n);
            let hi = empirical_loss(zero_net, mu, sd, sigma, &mut ChaCha8Rng::seed_from_u64(4), n);
            assert!((lo - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "sigma {sigma}: {lo}");
            assert!(lo < hi, "sigma {sigma}: {lo} !< {hi}");
        }
    }
}
