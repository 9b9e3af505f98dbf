use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::Conditioning;

use super::denoiser::LossInput;
use super::{sample_sigma, DiffusionConfig, DiffusionError, Gradients, ToyDenoiser, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate, decayed to zero on a cosine schedule.
    pub lr: f64,
    pub batch_size: usize,
    /// Leading steps during which only the conditioning input weights train.
    pub freeze_steps: usize,
    /// Probability of swapping an example's conditioning for the null
    /// conditioning, so the model also learns the unconditional branch.
    pub cond_drop_prob: f64,
    pub optimizer: Optimizer,
    /// Examples per gradient chunk. Chunks run in parallel and are reduced
    /// in a fixed order, so results do not depend on the thread count.
    pub chunk_size: usize,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            lr: 5e-3,
            batch_size: 256,
            freeze_steps: 0,
            cond_drop_prob: 0.1,
            optimizer: Optimizer::Adam,
            chunk_size: 32,
            seed: 0,
            diffusion: DiffusionConfig::default(),
        }
    }
}

/// A clean video, its encoded prompt, and (for upsamplers) the clean
/// auxiliary input.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video: VideoTensor,
    pub cond: Conditioning,
    pub aux: Option<VideoTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-step loss, averaged over batch and elements.
    pub losses: Vec<f64>,
}

impl TrainReport {
    fn window(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }

    pub fn initial_window(&self, n: usize) -> f64 {
        self.window(0..n.min(self.losses.len()))
    }

    pub fn final_window(&self, n: usize) -> f64 {
        let len = self.losses.len();
        self.window(len.saturating_sub(n)..len)
    }
}

pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn validate(model: &ToyDenoiser, data: &[TrainExample], cfg: &TrainConfig) -> Result<(), DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    cfg.diffusion.validate()?;
    if cfg.batch_size == 0 || cfg.chunk_size == 0 || !(0.0..=1.0).contains(&cfg.cond_drop_prob) || cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(DiffusionError::InvalidConfig(format!("{cfg:?}")));
    }
    let mc = model.config();
    for ex in data {
        if ex.video.shape() != mc.video {
            return Err(DiffusionError::ShapeMismatch {
                expected: mc.video.to_string(),
                got: ex.video.shape().to_string(),
            });
        }
        if ex.cond.content().cols() != mc.d_cond {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("{} conditioning columns", mc.d_cond),
                got: ex.cond.content().cols().to_string(),
            });
        }
        if mc.aux_shape() != ex.aux.as_ref().map(VideoTensor::shape) {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("auxiliary input {:?}", mc.aux_shape()),
                got: format!("{:?}", ex.aux.as_ref().map(VideoTensor::shape)),
            });
        }
    }
    Ok(())
}

/// Trains `model` in place by minibatch gradient descent on the weighted
/// denoising loss.
pub fn train_toy(model: &mut ToyDenoiser, data: &[TrainExample], cfg: &TrainConfig) -> Result<TrainReport, DiffusionError> {
    validate(model, data, cfg)?;
    let mc = *model.config();
    let n_out = mc.output_len();
    let null = Conditioning::null_with_width(mc.d_cond);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam {
        m: vec![0.0; model.num_params()],
        v: vec![0.0; model.num_params()],
        t: 0,
    };
    // Layer-0 weights are column-major; conditioning inputs occupy a contiguous run of columns.
    let cond_cols = mc.video_input_len() * mc.hidden..(mc.video_input_len() + mc.d_cond) * mc.hidden;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            let sigma = sample_sigma(&cfg.diffusion, &mut rng);
            let noise: Vec<f64> = (0..n_out).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cond = if rng.random::<f64>() < cfg.cond_drop_prob { &null } else { &ex.cond };
            picks.push((ex, sigma, noise, cond.at_sigma(sigma).pooled()));
        }
        let batch: Vec<LossInput<'_>> = picks
            .iter()
            .map(|(ex, sigma, noise, pooled)| LossInput {
                x: ex.video.data(),
                noise,
                sigma: *sigma,
                pooled: pooled.clone(),
                aux: ex.aux.as_ref().map(VideoTensor::data),
            })
            .collect();

        let model_ref: &ToyDenoiser = model;
        let partials: Vec<(f64, Gradients)> = batch
            .par_chunks(cfg.chunk_size)
            .map(|chunk| model_ref.loss_batch(chunk))
            .collect();
        let mut total = 0.0;
        let mut grad = Gradients::zeros_like(model);
        for (l, g) in &partials {
            total += l;
            grad.add_assign(g);
        }
        let norm = 1.0 / (cfg.batch_size * n_out) as f64;
        let loss = total * norm;
        if !loss.is_finite() {
            return Err(DiffusionError::DivergedLoss { step, loss });
        }
        grad.scale(norm);
        losses.push(loss);

        let frozen = step < cfg.freeze_steps;
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.t += 1;
        let mut offset = 0;
        let grads = grad.slices();
        for (slot, params) in model.param_slices_mut().into_iter().enumerate() {
            let g = grads[slot];
            for (i, p) in params.iter_mut().enumerate() {
                if frozen && !(slot == 0 && cond_cols.contains(&i)) {
                    continue;
                }
                let k = offset + i;
                match cfg.optimizer {
                    Optimizer::Sgd => *p -= lr * g[i],
                    Optimizer::Adam => {
                        adam.m[k] = BETA1 * adam.m[k] + (1.0 - BETA1) * g[i];
                        adam.v[k] = BETA2 * adam.v[k] + (1.0 - BETA2) * g[i] * g[i];
                        let m_hat = adam.m[k] / (1.0 - BETA1.powi(adam.t));
                        let v_hat = adam.v[k] / (1.0 - BETA2.powi(adam.t));
                        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
            offset += params.len();
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(DiffusionError::DivergedLoss { step, loss: f64::NAN });
        }
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    Ok(TrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{ConditioningEncoder, EncoderSpec};
    use crate::diffusion::{DenoiserConfig, VideoShape};
    use crate::prompt::{MultimodalPrompt, PromptUnit};

    fn setup() -> (ToyDenoiser, Vec<TrainExample>) {
        let spec = EncoderSpec { d_model: 8, d_feature: 4, ..EncoderSpec::default() };
        let enc = ConditioningEncoder::new(spec, 1).unwrap();
        let shape = VideoShape::new(2, 2, 2, 1);
        let mk = |caption: &str, level: f64| {
            let prompt = MultimodalPrompt::new(None, vec![PromptUnit::text(caption)]).unwrap();
            TrainExample {
                video: VideoTensor::new(shape, vec![level; shape.len()], 24.0).unwrap(),
                cond: enc.conditioning(&prompt, 24.0, (2, 2)).unwrap(),
                aux: None,
            }
        };
        let data = vec![mk("bright", 0.6), mk("dark", -0.6)];
        let model = ToyDenoiser::new(
            DenoiserConfig { video: shape, aux_channels: 0, d_cond: 8, hidden: 16, sigma_data: 0.5 },
            2,
        );
        (model, data)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(5e-3, 0, 100), 5e-3);
        assert!((cosine_lr(5e-3, 50, 100) - 2.5e-3).abs() < 1e-15);
        assert!(cosine_lr(5e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(TrainConfig::default().lr, 5e-3);
        assert_eq!(TrainConfig::default().batch_size, 256);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (mut model, data) = setup();
        let before = model.params();
        for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
            let cfg = TrainConfig { steps: 5, lr: 0.0, batch_size: 4, optimizer, ..TrainConfig::default() };
            train_toy(&mut model, &data, &cfg).unwrap();
            assert_eq!(model.params(), before);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, _) = setup();
        assert!(matches!(
            train_toy(&mut model, &[], &TrainConfig::default()),
            Err(DiffusionError::EmptyDataset)
        ));
    }

    #[test]
    fn divergence_is_detected() {
        let (mut model, data) = setup();
        let cfg = TrainConfig { steps: 50, lr: 1e200, batch_size: 4, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        assert!(matches!(train_toy(&mut model, &data, &cfg), Err(DiffusionError::DivergedLoss { .. })));
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (model, data) = setup();
        let cfg = TrainConfig { steps: 2_000, batch_size: 16, seed: 3, ..TrainConfig::default() };
        let mut a = model.clone();
        let report = train_toy(&mut a, &data, &cfg).unwrap();
        assert!(report.final_window(200) < report.initial_window(200));
        let mut b = model.clone();
        let again = train_toy(&mut b, &data, &cfg).unwrap();
        assert_eq!(report, again);
        assert_eq!(a, b);
    }

    #[test]
    fn chunking_does_not_change_the_result_beyond_rounding() {
        let (model, data) = setup();
        let base = TrainConfig { steps: 20, batch_size: 16, seed: 4, ..TrainConfig::default() };
        let mut a = model.clone();
        train_toy(&mut a, &data, &TrainConfig { chunk_size: 1, ..base }).unwrap();
        let mut b = model.clone();
        train_toy(&mut b, &data, &TrainConfig { chunk_size: 16, ..base }).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn freeze_only_touches_conditioning_columns() {
        let (model, data) = setup();
        let cfg = TrainConfig { steps: 3, batch_size: 4, freeze_steps: 3, ..TrainConfig::default() };
        let mut m = model.clone();
        train_toy(&mut m, &data, &cfg).unwrap();
        let mc = *model.config();
        for l in 1..3 {
            assert_eq!(m.layers()[l], model.layers()[l]);
        }
        assert_eq!(m.layers()[0].bias, model.layers()[0].bias);
        let w0 = &model.layers()[0].weight;
        let w1 = &m.layers()[0].weight;
        for col in 0..w0.ncols() {
            let is_cond = (mc.video_input_len()..mc.video_input_len() + mc.d_cond).contains(&col);
            assert_eq!(w0.column(col) != w1.column(col), is_cond, "column {col}");
        }
    }
}
