//! Toy stand-in for the denoising backbone: three dense layers with tanh
//! between them. The network sees the `c_in`-scaled noisy video (with any
//! auxiliary channels concatenated channel-wise), the mean-pooled
//! conditioning matrix, and `ln(σ)/4`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::TokenEmbeddingMatrix;

use super::video::interleave_channels;
use super::{loss_weight, noise_embedding, scalings, DiffusionError, VideoShape, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Shape of the video being denoised (and of the output).
    pub video: VideoShape,
    /// Extra clean input channels, e.g. the upsampled low-resolution video
    /// for a cascade upsampler. Zero for a base model.
    pub aux_channels: usize,
    /// Width of the conditioning rows.
    pub d_cond: usize,
    pub hidden: usize,
    pub sigma_data: f64,
}

impl DenoiserConfig {
    pub fn video_input_len(&self) -> usize {
        self.video.len() + self.video.with_channels(self.aux_channels).len()
    }

    pub fn input_len(&self) -> usize {
        self.video_input_len() + self.d_cond + 1
    }

    pub fn output_len(&self) -> usize {
        self.video.len()
    }

    pub fn aux_shape(&self) -> Option<VideoShape> {
        (self.aux_channels > 0).then(|| self.video.with_channels(self.aux_channels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(d_out, d_in),
            bias: DVector::zeros(d_out),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

/// Parameter-shaped gradient (or optimizer state) for a [`ToyDenoiser`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: [Dense; 3],
}

impl Gradients {
    pub fn zeros_like(model: &ToyDenoiser) -> Self {
        Self {
            layers: model
                .layers
                .each_ref()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows())),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    /// Weight then bias for each layer; weights in column-major order.
    pub fn slices(&self) -> [&[f64]; 6] {
        let [a, b, c] = &self.layers;
        [
            a.weight.as_slice(),
            a.bias.as_slice(),
            b.weight.as_slice(),
            b.bias.as_slice(),
            c.weight.as_slice(),
            c.bias.as_slice(),
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// One training example in flat form.
pub(crate) struct LossInput<'a> {
    pub x: &'a [f64],
    pub noise: &'a [f64],
    pub sigma: f64,
    pub pooled: Vec<f64>,
    pub aux: Option<&'a [f64]>,
}

struct Forward {
    input: DMatrix<f64>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    pub(crate) layers: [Dense; 3],
}

impl ToyDenoiser {
    /// Gaussian init with variance `1/fan_in`; the output layer is scaled
    /// down so an untrained model starts close to `c_skip·x`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [config.input_len(), config.hidden, config.hidden, config.output_len()];
        let layers = [0usize, 1, 2].map(|i| {
            let (d_in, d_out) = (dims[i], dims[i + 1]);
            let gain = if i == 2 { 0.1 } else { 1.0 };
            let std = gain / (d_in as f64).sqrt();
            Dense {
                weight: DMatrix::from_fn(d_out, d_in, |_, _| {
                    std * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                }),
                bias: DVector::zeros(d_out),
            }
        });
        Self { config, layers }
    }

    /// The network that outputs zero everywhere.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let dims = [config.input_len(), config.hidden, config.hidden, config.output_len()];
        Self {
            config,
            layers: [0usize, 1, 2].map(|i| Dense::zeros(dims[i], dims[i + 1])),
        }
    }

    pub fn from_layers(config: DenoiserConfig, layers: [Dense; 3]) -> Result<Self, DiffusionError> {
        let dims = [config.input_len(), config.hidden, config.hidden, config.output_len()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape() != (dims[i + 1], dims[i]) || l.bias.len() != dims[i + 1] {
                return Err(DiffusionError::ShapeMismatch {
                    expected: format!("layer {i}: {}x{}", dims[i + 1], dims[i]),
                    got: format!("{:?}", l.weight.shape()),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(DiffusionError::NonFinite);
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Same ordering as [`Gradients::flat`].
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count");
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
    }

    pub(crate) fn param_slices_mut(&mut self) -> [&mut [f64]; 6] {
        let [a, b, c] = &mut self.layers;
        [
            a.weight.as_mut_slice(),
            a.bias.as_mut_slice(),
            b.weight.as_mut_slice(),
            b.bias.as_mut_slice(),
            c.weight.as_mut_slice(),
            c.bias.as_mut_slice(),
        ]
    }

    /// Network input column for one noisy sample: the `c_in`-scaled video
    /// (with auxiliary channels interleaved per pixel), the pooled
    /// conditioning rescaled to unit RMS, and `c_noise`.
    pub fn network_input(&self, x_sigma: &[f64], sigma: f64, pooled: &[f64], aux: Option<&[f64]>) -> Vec<f64> {
        let cfg = &self.config;
        let c_in = scalings(sigma, cfg.sigma_data).c_in;
        let scaled: Vec<f64> = x_sigma.iter().map(|v| c_in * v).collect();
        let mut input = if cfg.aux_channels > 0 {
            let zeros;
            let aux = match aux {
                Some(a) => a,
                None => {
                    zeros = vec![0.0; cfg.video.with_channels(cfg.aux_channels).len()];
                    &zeros
                }
            };
            interleave_channels(&scaled, cfg.video.channels, aux, cfg.aux_channels)
        } else {
            scaled
        };
        let rms = (pooled.iter().map(|v| v * v).sum::<f64>() / pooled.len().max(1) as f64).sqrt();
        let gain = if rms > 0.0 { 1.0 / rms } else { 0.0 };
        input.extend(pooled.iter().map(|v| v * gain));
        input.push(noise_embedding(sigma));
        input
    }

    fn forward(&self, input: DMatrix<f64>) -> Forward {
        let a1 = self.layers[0].apply(&input).map(f64::tanh);
        let a2 = self.layers[1].apply(&a1).map(f64::tanh);
        let out = self.layers[2].apply(&a2);
        Forward { input, a1, a2, out }
    }

    /// Raw network output `F(input)` for a single input column.
    pub fn network(&self, input: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        self.forward(x).out.as_slice().to_vec()
    }

    fn check_inputs(&self, x_sigma: &VideoTensor, cond: &TokenEmbeddingMatrix, aux: Option<&VideoTensor>) -> Result<(), DiffusionError> {
        let cfg = &self.config;
        if x_sigma.shape() != cfg.video {
            return Err(DiffusionError::ShapeMismatch {
                expected: cfg.video.to_string(),
                got: x_sigma.shape().to_string(),
            });
        }
        if cond.cols() != cfg.d_cond {
            return Err(DiffusionError::ShapeMismatch {
                expected: format!("{} conditioning columns", cfg.d_cond),
                got: cond.cols().to_string(),
            });
        }
        match (cfg.aux_shape(), aux.map(VideoTensor::shape)) {
            (None, None) => Ok(()),
            (Some(a), Some(b)) if a == b => Ok(()),
            (want, got) => Err(DiffusionError::ShapeMismatch {
                expected: format!("auxiliary input {want:?}"),
                got: format!("{got:?}"),
            }),
        }
    }

    /// `D(x_σ) = c_out·F(c_in·x_σ, C) + c_skip·x_σ`.
    pub fn denoise(&self, x_sigma: &VideoTensor, sigma: f64, cond: &TokenEmbeddingMatrix) -> Result<VideoTensor, DiffusionError> {
        self.denoise_with_aux(x_sigma, sigma, cond, None)
    }

    pub fn denoise_with_aux(
        &self,
        x_sigma: &VideoTensor,
        sigma: f64,
        cond: &TokenEmbeddingMatrix,
        aux: Option<&VideoTensor>,
    ) -> Result<VideoTensor, DiffusionError> {
        self.check_inputs(x_sigma, cond, aux)?;
        let out = self.denoise_flat(x_sigma.data(), sigma, &cond.pooled(), aux.map(VideoTensor::data));
        x_sigma.with_data(out)
    }

    pub(crate) fn denoise_flat(&self, x_sigma: &[f64], sigma: f64, pooled: &[f64], aux: Option<&[f64]>) -> Vec<f64> {
        let s = scalings(sigma, self.config.sigma_data);
        let f = self.network(&self.network_input(x_sigma, sigma, pooled, aux));
        f.iter().zip(x_sigma).map(|(fv, xv)| s.c_out * fv + s.c_skip * xv).collect()
    }

    /// Weighted denoising loss `λ(σ)·‖D(x + σ·ε) − x‖²` for one example and
    /// its exact gradient with respect to every parameter.
    pub fn loss(
        &self,
        x: &VideoTensor,
        sigma: f64,
        noise: &VideoTensor,
        cond: &TokenEmbeddingMatrix,
        aux: Option<&VideoTensor>,
    ) -> Result<(f64, Gradients), DiffusionError> {
        self.check_inputs(x, cond, aux)?;
        if noise.shape() != x.shape() {
            return Err(DiffusionError::ShapeMismatch {
                expected: x.shape().to_string(),
                got: noise.shape().to_string(),
            });
        }
        let input = LossInput {
            x: x.data(),
            noise: noise.data(),
            sigma,
            pooled: cond.pooled(),
            aux: aux.map(VideoTensor::data),
        };
        Ok(self.loss_batch(std::slice::from_ref(&input)))
    }

    /// Sum of per-example losses and the summed gradient.
    pub(crate) fn loss_batch(&self, batch: &[LossInput<'_>]) -> (f64, Gradients) {
        let cfg = &self.config;
        let n_in = cfg.input_len();
        let n_out = cfg.output_len();
        let mut cols = Vec::with_capacity(n_in * batch.len());
        let mut noisy: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
        for ex in batch {
            let xs: Vec<f64> = ex.x.iter().zip(ex.noise).map(|(a, e)| a + ex.sigma * e).collect();
            cols.extend(self.network_input(&xs, ex.sigma, &ex.pooled, ex.aux));
            noisy.push(xs);
        }
        let fwd = self.forward(DMatrix::from_vec(n_in, batch.len(), cols));

        let mut total = 0.0;
        let mut d_out = DMatrix::zeros(n_out, batch.len());
        for (j, ex) in batch.iter().enumerate() {
            let s = scalings(ex.sigma, cfg.sigma_data);
            let lambda = loss_weight(ex.sigma, cfg.sigma_data);
            let f = fwd.out.column(j);
            let mut g = d_out.column_mut(j);
            for i in 0..n_out {
                let r = s.c_out * f[i] + s.c_skip * noisy[j][i] - ex.x[i];
                total += lambda * r * r;
                g[i] = 2.0 * lambda * r * s.c_out;
            }
        }
        (total, self.backward(&fwd, d_out))
    }

    fn backward(&self, fwd: &Forward, d_out: DMatrix<f64>) -> Gradients {
        let [_, l2, l3] = &self.layers;
        let g3 = Dense {
            weight: &d_out * fwd.a2.transpose(),
            bias: d_out.column_sum(),
        };
        let d_z2 = (l3.weight.transpose() * &d_out).component_mul(&fwd.a2.map(|a| 1.0 - a * a));
        let g2 = Dense {
            weight: &d_z2 * fwd.a1.transpose(),
            bias: d_z2.column_sum(),
        };
        let d_z1 = (l2.weight.transpose() * &d_z2).component_mul(&fwd.a1.map(|a| 1.0 - a * a));
        let g1 = Dense {
            weight: &d_z1 * fwd.input.transpose(),
            bias: d_z1.column_sum(),
        };
        Gradients { layers: [g1, g2, g3] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(aux: usize) -> DenoiserConfig {
        DenoiserConfig {
            video: VideoShape::new(2, 2, 2, 2),
            aux_channels: aux,
            d_cond: 4,
            hidden: 5,
            sigma_data: 0.5,
        }
    }

    fn random_video(shape: VideoShape, rng: &mut ChaCha8Rng, scale: f64) -> VideoTensor {
        let data = (0..shape.len()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        VideoTensor::new(shape, data, 24.0).unwrap()
    }

    fn random_cond(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TokenEmbeddingMatrix {
        TokenEmbeddingMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_network_gives_skip_only() {
        let c = cfg(0);
        let m = ToyDenoiser::zeros(c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_video(c.video, &mut rng, 2.0);
        let cond = random_cond(3, 4, &mut rng);
        let sigma = 0.8;
        let d = m.denoise(&x, sigma, &cond).unwrap();
        let skip = scalings(sigma, 0.5).c_skip;
        for (a, b) in d.data().iter().zip(x.data()) {
            assert_eq!(*a, skip * b);
        }
    }

    #[test]
    fn small_sigma_returns_input() {
        let c = cfg(0);
        let m = ToyDenoiser::new(c, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_video(c.video, &mut rng, 1.0);
        let cond = random_cond(2, 4, &mut rng);
        let d = m.denoise(&x, 1e-9, &cond).unwrap();
        for (a, b) in d.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn denoise_recomposes_network_output() {
        let c = cfg(2);
        let m = ToyDenoiser::new(c, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_video(c.video, &mut rng, 1.5);
        let aux = random_video(c.aux_shape().unwrap(), &mut rng, 1.0);
        let cond = random_cond(3, 4, &mut rng);
        let sigma = 2.3;
        let d = m.denoise_with_aux(&x, sigma, &cond, Some(&aux)).unwrap();

        // Hand composition: build the input column explicitly.
        let s = scalings(sigma, 0.5);
        let mut input = Vec::new();
        for p in 0..8 {
            input.push(s.c_in * x.data()[2 * p]);
            input.push(s.c_in * x.data()[2 * p + 1]);
            input.push(aux.data()[2 * p]);
            input.push(aux.data()[2 * p + 1]);
        }
        let pooled = cond.pooled();
        let rms = (pooled.iter().map(|v| v * v).sum::<f64>() / pooled.len() as f64).sqrt();
        input.extend(pooled.iter().map(|v| v / rms));
        input.push(sigma.ln() / 4.0);
        let f = m.network(&input);
        for i in 0..x.data().len() {
            let want = s.c_out * f[i] + s.c_skip * x.data()[i];
            assert!((d.data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let c = cfg(0);
        let m = ToyDenoiser::new(c, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wrong = random_video(VideoShape::new(1, 2, 2, 2), &mut rng, 1.0);
        let cond = random_cond(2, 4, &mut rng);
        assert!(m.denoise(&wrong, 1.0, &cond).is_err());
        let x = random_video(c.video, &mut rng, 1.0);
        assert!(m.denoise(&x, 1.0, &random_cond(2, 3, &mut rng)).is_err());
        assert!(m.denoise_with_aux(&x, 1.0, &cond, Some(&x)).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let mut m = ToyDenoiser::new(cfg(0), 9);
        let p = m.params();
        assert_eq!(p.len(), m.num_params());
        let doubled: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        m.set_params(&doubled);
        assert_eq!(m.params(), doubled);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for aux in [0, 1] {
            let c = cfg(aux);
            let mut m = ToyDenoiser::new(c, 10 + aux as u64);
            // Nonzero biases so their gradients are exercised away from init.
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let p: Vec<f64> = m.params().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
            m.set_params(&p);
            let x = random_video(c.video, &mut rng, 1.0);
            let noise = random_video(c.video, &mut rng, 1.0);
            let cond = random_cond(3, 4, &mut rng);
            let aux_v = c.aux_shape().map(|s| random_video(s, &mut rng, 1.0));
            let sigma = 0.7;
            let (_, grad) = m.loss(&x, sigma, &noise, &cond, aux_v.as_ref()).unwrap();
            let g = grad.flat();
            let h = 1e-5;
            for i in 0..p.len() {
                let mut probe = m.clone();
                let mut q = p.clone();
                q[i] += h;
                probe.set_params(&q);
                let up = probe.loss(&x, sigma, &noise, &cond, aux_v.as_ref()).unwrap().0;
                q[i] -= 2.0 * h;
                probe.set_params(&q);
                let down = probe.loss(&x, sigma, &noise, &cond, aux_v.as_ref()).unwrap().0;
                let fd = (up - down) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "aux {aux} param {i}: {} vs {fd}", g[i]);
            }
        }
    }
}
