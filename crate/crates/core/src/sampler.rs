//! Deterministic Heun sampling of the probability-flow ODE, classifier-free
//! guidance, and the two-stage cascade.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::Conditioning;
use crate::diffusion::{DiffusionConfig, DiffusionError, ToyDenoiser, VideoShape, VideoTensor};

pub const DEFAULT_STAGE1_STEPS: usize = 256;
pub const DEFAULT_STAGE2_STEPS: usize = 40;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
const DEFAULT_FRAMERATE: f64 = 24.0;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid step count {0}: need at least 1")]
    InvalidN(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite state at step {step} (sigma {sigma})")]
    NonFiniteState { step: usize, sigma: f64 },
    #[error("invalid guidance scale {0}")]
    InvalidGuidance(f64),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Noise levels `σ_0 > σ_1 > … > σ_N = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// Karras ρ-schedule: uniform steps in `σ^{1/ρ}` from `σ_max` to `σ_min`,
/// then a final step to zero.
pub fn build_schedule(config: &DiffusionConfig, n: usize) -> Result<SigmaSchedule, SampleError> {
    if n == 0 {
        return Err(SampleError::InvalidN(n));
    }
    config.validate()?;
    let inv_rho = 1.0 / config.rho;
    let (hi, lo) = (config.sigma_max.powf(inv_rho), config.sigma_min.powf(inv_rho));
    let mut sigmas: Vec<f64> = if n == 1 {
        vec![config.sigma_max]
    } else {
        (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(config.rho))
            .collect()
    };
    sigmas[0] = config.sigma_max;
    if n > 1 {
        sigmas[n - 1] = config.sigma_min;
    }
    sigmas.push(0.0);
    Ok(SigmaSchedule { sigmas })
}

/// A denoiser `D(x; σ)` over flat state vectors.
pub trait Denoise {
    fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64>;
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> Denoise for F {
    fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        self(x, sigma)
    }
}

/// One Heun step from `sigma` to `sigma_next`, falling back to Euler when
/// `sigma_next` is zero.
pub fn heun_step<D: Denoise + ?Sized>(denoiser: &D, x: &[f64], sigma: f64, sigma_next: f64) -> Vec<f64> {
    let h = sigma_next - sigma;
    let d: Vec<f64> = x
        .iter()
        .zip(denoiser.denoise(x, sigma))
        .map(|(xi, di)| (xi - di) / sigma)
        .collect();
    let euler: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + h * di).collect();
    if sigma_next == 0.0 {
        return euler;
    }
    let denoised = denoiser.denoise(&euler, sigma_next);
    x.iter()
        .zip(&d)
        .zip(euler.iter().zip(denoised))
        .map(|((xi, di), (ei, dn))| xi + h * 0.5 * (di + (ei - dn) / sigma_next))
        .collect()
}

/// Integrates the probability-flow ODE along `schedule` starting from `x`
/// at `σ_0`.
pub fn integrate<D: Denoise + ?Sized>(denoiser: &D, mut x: Vec<f64>, schedule: &SigmaSchedule) -> Result<Vec<f64>, SampleError> {
    for (step, pair) in schedule.sigmas.windows(2).enumerate() {
        x = heun_step(denoiser, &x, pair[0], pair[1]);
        if x.iter().any(|v| !v.is_finite()) {
            log::error!("sampler state became non-finite at step {step}, sigma {} -> {}", pair[0], pair[1]);
            return Err(SampleError::NonFiniteState { step, sigma: pair[1] });
        }
    }
    Ok(x)
}

/// Draws `x_N ∼ 𝒩(0, σ_0²I)` from `seed` and integrates to `σ = 0`.
pub fn sample_flat<D: Denoise + ?Sized>(denoiser: &D, len: usize, schedule: &SigmaSchedule, seed: u64) -> Result<Vec<f64>, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = schedule.sigma_max();
    let x = (0..len)
        .map(|_| s0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    integrate(denoiser, x, schedule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub null: Conditioning,
}

impl GuidanceConfig {
    pub fn new(scale: f64, d_cond: usize) -> Result<Self, SampleError> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(SampleError::InvalidGuidance(scale));
        }
        Ok(Self {
            scale,
            null: Conditioning::null_with_width(d_cond),
        })
    }
}

/// `D_null + w·(D_cond − D_null)`. At `w = 0` and `w = 1` only the selected
/// branch is evaluated, so the result is that branch exactly.
pub fn combine_guidance(d_null: &[f64], d_cond: &[f64], w: f64) -> Vec<f64> {
    d_null.iter().zip(d_cond).map(|(n, c)| n + w * (c - n)).collect()
}

/// The conditional model `D(x; σ | C)` with optional clean auxiliary channels.
pub struct ConditionedModel<'a> {
    pub model: &'a ToyDenoiser,
    pub cond: &'a Conditioning,
    pub aux: Option<&'a [f64]>,
}

impl Denoise for ConditionedModel<'_> {
    fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let pooled = self.cond.at_sigma(sigma).pooled();
        self.model.denoise_flat(x, sigma, &pooled, self.aux)
    }
}

/// Classifier-free guided model.
pub struct GuidedModel<'a> {
    pub model: &'a ToyDenoiser,
    pub cond: &'a Conditioning,
    pub guidance: &'a GuidanceConfig,
    pub aux: Option<&'a [f64]>,
}

impl Denoise for GuidedModel<'_> {
    fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let branch = |cond| ConditionedModel { model: self.model, cond, aux: self.aux }.denoise(x, sigma);
        let w = self.guidance.scale;
        if w == 0.0 {
            branch(&self.guidance.null)
        } else if w == 1.0 {
            branch(self.cond)
        } else {
            combine_guidance(&branch(&self.guidance.null), &branch(self.cond), w)
        }
    }
}

pub fn guided_denoise(
    model: &ToyDenoiser,
    x_sigma: &VideoTensor,
    sigma: f64,
    cond: &Conditioning,
    guidance: &GuidanceConfig,
) -> Result<VideoTensor, SampleError> {
    check_model_input(model, x_sigma.shape())?;
    let g = GuidedModel { model, cond, guidance, aux: None };
    Ok(x_sigma.with_data(g.denoise(x_sigma.data(), sigma))?)
}

fn check_model_input(model: &ToyDenoiser, shape: VideoShape) -> Result<(), SampleError> {
    if model.config().video != shape {
        return Err(SampleError::ShapeMismatch {
            expected: model.config().video.to_string(),
            got: shape.to_string(),
        });
    }
    Ok(())
}

fn to_video(shape: VideoShape, data: Vec<f64>, cond: &Conditioning) -> Result<VideoTensor, SampleError> {
    Ok(VideoTensor::new(shape, data, cond.framerate().unwrap_or(DEFAULT_FRAMERATE))?)
}

/// Samples one video from a base model. Deterministic in all arguments.
pub fn sample(
    model: &ToyDenoiser,
    cond: &Conditioning,
    schedule: &SigmaSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<VideoTensor, SampleError> {
    let shape = model.config().video;
    if model.config().aux_channels != 0 {
        return Err(SampleError::ShapeMismatch {
            expected: "a model without auxiliary channels".into(),
            got: format!("{} auxiliary channels", model.config().aux_channels),
        });
    }
    let g = GuidedModel { model, cond, guidance, aux: None };
    to_video(shape, sample_flat(&g, shape.len(), schedule, seed)?, cond)
}

/// Independent samples for each seed, computed in parallel. The output
/// order follows `seeds` and does not depend on the thread count.
pub fn sample_many(
    model: &ToyDenoiser,
    cond: &Conditioning,
    schedule: &SigmaSchedule,
    guidance: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<VideoTensor>, SampleError> {
    seeds
        .par_iter()
        .map(|&seed| sample(model, cond, schedule, guidance, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub stage1_shape: VideoShape,
    pub stage2_shape: VideoShape,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

impl Default for CascadeConfig {
    /// 9×16 → 36×64: a 4× linear upsampling, half the 8× of a
    /// 36×64 → 288×512 cascade.
    fn default() -> Self {
        Self {
            stage1_shape: VideoShape::new(8, 9, 16, 3),
            stage2_shape: VideoShape::new(8, 36, 64, 3),
            stage1_steps: DEFAULT_STAGE1_STEPS,
            stage2_steps: DEFAULT_STAGE2_STEPS,
        }
    }
}

impl CascadeConfig {
    /// Integer spatial upsampling factors `(fy, fx)`.
    pub fn factors(&self) -> Result<(usize, usize), SampleError> {
        let (a, b) = (self.stage1_shape, self.stage2_shape);
        let ok = a.frames == b.frames
            && a.channels == b.channels
            && a.height > 0
            && a.width > 0
            && b.height % a.height == 0
            && b.width % a.width == 0
            && b.height >= a.height
            && b.width >= a.width;
        if !ok {
            return Err(SampleError::ShapeMismatch {
                expected: format!("integer spatial multiple of {a}"),
                got: b.to_string(),
            });
        }
        Ok((b.height / a.height, b.width / a.width))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub low: VideoTensor,
    pub high: VideoTensor,
}

/// Stage-1 sample, nearest upsampling, then a stage-2 sample whose model
/// sees the upsampled video as extra input channels. The stage-2
/// conditioning carries the stage-2 resolution.
pub fn cascade_sample(
    stage1: &ToyDenoiser,
    stage2: &ToyDenoiser,
    cond: &Conditioning,
    cascade: &CascadeConfig,
    diffusion: &DiffusionConfig,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<CascadeOutput, SampleError> {
    let (fy, fx) = cascade.factors()?;
    check_model_input(stage1, cascade.stage1_shape)?;
    check_model_input(stage2, cascade.stage2_shape)?;
    if stage2.config().aux_channels != cascade.stage1_shape.channels {
        return Err(SampleError::ShapeMismatch {
            expected: format!("{} auxiliary channels", cascade.stage1_shape.channels),
            got: stage2.config().aux_channels.to_string(),
        });
    }
    let low = sample(stage1, cond, &build_schedule(diffusion, cascade.stage1_steps)?, guidance, seed)?;
    let up = low.upsample_nearest(fy, fx);
    let s2 = cascade.stage2_shape;
    let cond2 = cond.with_resolution((s2.height as u32, s2.width as u32));
    let g = GuidedModel {
        model: stage2,
        cond: &cond2,
        guidance,
        aux: Some(up.data()),
    };
    let schedule = build_schedule(diffusion, cascade.stage2_steps)?;
    let high = sample_flat(&g, cascade.stage2_shape.len(), &schedule, seed.wrapping_add(1))?;
    let high = to_video(cascade.stage2_shape, high, cond)?;
    Ok(CascadeOutput { low, high })
}
