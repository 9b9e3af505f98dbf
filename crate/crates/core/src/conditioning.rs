//! Conditioning matrix **C**: one row per instruction token, then one row per
//! text token or image patch in prompt order, then three metadata rows
//! (noise level, framerate, resolution).
//!
//! The multimodal language model is replaced by a deterministic stand-in:
//! text tokens and images are hashed into seeded pseudo-random rows. The
//! [`ImageEmbedder`] trait is the plug-in point for a real visual encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{MultimodalPrompt, PromptUnit};
use crate::retrieval::tokenize;

/// Rows appended after the prompt rows.
pub const METADATA_ROWS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("cannot resolve image {0:?}")]
    UnresolvableImage(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("prompt needs {got} tokens, limit is {max}")]
    PromptTooLong { got: usize, max: usize },
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("unknown image encoder {0:?}")]
    UnknownEncoder(String),
    #[error("non-finite value in embedding")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub d_model: usize,
    /// Width of the image feature rows before projection.
    pub d_feature: usize,
    pub max_tokens: usize,
    pub image_patch_tokens: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_feature: 48,
            max_tokens: 256,
            image_patch_tokens: 4,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.d_model == 0 || self.d_feature == 0 || self.max_tokens == 0 || self.image_patch_tokens == 0 {
            return Err(EncodeError::InvalidSpec("all sizes must be positive".into()));
        }
        if self.max_tokens < 1 + self.image_patch_tokens {
            return Err(EncodeError::InvalidSpec(
                "max_tokens must be at least 1 + image_patch_tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major matrix of conditioning tokens with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl TokenEmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EncodeError> {
        if data.len() != rows * cols {
            return Err(EncodeError::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(Self {
            rows,
            cols,
            data,
            mask: vec![true; rows],
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            mask: vec![true; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Extends to `rows` rows with masked-out zero padding.
    pub fn padded_to(&self, rows: usize) -> Self {
        let mut out = self.clone();
        if rows > self.rows {
            out.data.resize(rows * self.cols, 0.0);
            out.mask.resize(rows, false);
            out.rows = rows;
        }
        out
    }

    /// Mean over valid rows; zeros when no row is valid.
    pub fn pooled(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        let mut n = 0usize;
        for i in (0..self.rows).filter(|&i| self.mask[i]) {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.mask.push(true);
        self.rows += 1;
    }
}

/// Noise level, framerate and original resolution of the current input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetadataTokens {
    pub sigma: f64,
    pub framerate: f64,
    pub resolution: (u32, u32),
}

impl MetadataTokens {
    fn validate(&self) -> Result<(), EncodeError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(EncodeError::InvalidMetadata(format!("sigma {}", self.sigma)));
        }
        if !(self.framerate > 0.0 && self.framerate.is_finite()) {
            return Err(EncodeError::InvalidMetadata(format!("framerate {}", self.framerate)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(EncodeError::InvalidMetadata("zero resolution".into()));
        }
        Ok(())
    }

    /// The three metadata rows, each a sinusoidal featurization.
    pub fn rows(&self, d_model: usize) -> [Vec<f64>; 3] {
        let mut sigma = vec![0.0; d_model];
        sinusoid(self.sigma.ln() / 4.0, &mut sigma);
        let mut fps = vec![0.0; d_model];
        sinusoid(self.framerate, &mut fps);
        let mut res = vec![0.0; d_model];
        let half = d_model / 2;
        sinusoid(self.resolution.0 as f64, &mut res[..half]);
        sinusoid(self.resolution.1 as f64, &mut res[half..]);
        [sigma, fps, res]
    }
}

/// Alternating sin/cos at geometrically spaced frequencies.
fn sinusoid(value: f64, out: &mut [f64]) {
    let n_freq = out.len().div_ceil(2).max(1) as f64;
    for (j, o) in out.iter_mut().enumerate() {
        let freq = (-(10_000f64.ln()) * (j / 2) as f64 / n_freq).exp();
        *o = if j % 2 == 0 { (value * freq).sin() } else { (value * freq).cos() };
    }
}

/// Row-major `f32` feature rows for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Visual encoder plug-in. Implementations must be immutable once built.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image_ref: &str) -> Result<FeatureMatrix, EncodeError>;
}

fn hash_seed(seed: u64, domain: &str, bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Gaussian rows normalized to unit length, seeded by a hash.
fn unit_rows(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

/// Stand-in visual encoder: hashes the reference bytes into a seeded
/// pseudo-random matrix with unit-norm rows.
#[derive(Debug, Clone)]
pub struct HashedImageEmbedder {
    pub patch_tokens: usize,
    pub d_feature: usize,
    pub seed: u64,
}

impl ImageEmbedder for HashedImageEmbedder {
    fn name(&self) -> &str {
        "hashed"
    }

    fn embed(&self, image_ref: &str) -> Result<FeatureMatrix, EncodeError> {
        if image_ref.trim().is_empty() {
            return Err(EncodeError::UnresolvableImage(image_ref.to_owned()));
        }
        let seed = hash_seed(self.seed, "image", image_ref.as_bytes());
        let data = unit_rows(seed, self.patch_tokens, self.d_feature)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Ok(FeatureMatrix {
            rows: self.patch_tokens,
            cols: self.d_feature,
            data,
        })
    }
}

/// Looks up a registered image encoder by name.
pub fn embedder_by_name(name: &str, spec: &EncoderSpec, seed: u64) -> Result<Box<dyn ImageEmbedder>, EncodeError> {
    match name {
        "hashed" => Ok(Box::new(HashedImageEmbedder {
            patch_tokens: spec.image_patch_tokens,
            d_feature: spec.d_feature,
            seed,
        })),
        other => Err(EncodeError::UnknownEncoder(other.to_owned())),
    }
}

/// Affine map from image feature rows into the token embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    d_in: usize,
    d_out: usize,
    /// `d_in x d_out`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Projection {
    pub fn new(d_in: usize, d_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, EncodeError> {
        if weights.len() != d_in * d_out || bias.len() != d_out {
            return Err(EncodeError::ShapeMismatch {
                expected: format!("{d_in}x{d_out} weights and {d_out} bias"),
                got: format!("{} weights and {} bias", weights.len(), bias.len()),
            });
        }
        Ok(Self { d_in, d_out, weights, bias })
    }

    pub fn identity(d: usize) -> Self {
        let mut weights = vec![0.0; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
        }
        Self {
            d_in: d,
            d_out: d,
            weights,
            bias: vec![0.0; d],
        }
    }

    pub fn seeded(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(seed, "projection", &[]));
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights = (0..d_in * d_out)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let bias = (0..d_out)
            .map(|_| 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Self { d_in, d_out, weights, bias }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// `features · W + b`, row by row.
    pub fn project(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>, EncodeError> {
        if features.cols != self.d_in || features.data.len() != features.rows * features.cols {
            return Err(EncodeError::ShapeMismatch {
                expected: format!("{} feature columns", self.d_in),
                got: format!("{}x{}", features.rows, features.cols),
            });
        }
        Ok((0..features.rows)
            .map(|r| {
                let mut out = self.bias.clone();
                for (i, &f) in features.row(r).iter().enumerate() {
                    let w = &self.weights[i * self.d_out..(i + 1) * self.d_out];
                    for (o, wv) in out.iter_mut().zip(w) {
                        *o += f as f64 * wv;
                    }
                }
                out
            })
            .collect())
    }
}

/// Prompt rows plus the metadata that does not change during sampling.
/// The noise-level row is produced per `sigma` by [`Conditioning::at_sigma`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    content: TokenEmbeddingMatrix,
    meta: Option<(f64, (u32, u32))>,
}

impl Conditioning {
    /// The unconditional branch: one zero content row and zero metadata rows.
    pub fn null(spec: &EncoderSpec) -> Self {
        Self::null_with_width(spec.d_model)
    }

    pub fn null_with_width(d_model: usize) -> Self {
        Self {
            content: TokenEmbeddingMatrix::zeros(1, d_model),
            meta: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.meta.is_none()
    }

    pub fn content(&self) -> &TokenEmbeddingMatrix {
        &self.content
    }

    pub fn framerate(&self) -> Option<f64> {
        self.meta.map(|(fps, _)| fps)
    }

    /// The same prompt at another output resolution. Null stays null.
    pub fn with_resolution(&self, resolution: (u32, u32)) -> Self {
        Self {
            content: self.content.clone(),
            meta: self.meta.map(|(fps, _)| (fps, resolution)),
        }
    }

    pub fn at_sigma(&self, sigma: f64) -> TokenEmbeddingMatrix {
        let mut c = self.content.clone();
        match self.meta {
            Some((framerate, resolution)) => {
                let meta = MetadataTokens { sigma, framerate, resolution };
                for row in meta.rows(c.cols) {
                    c.push_row(&row);
                }
            }
            None => {
                let zero = vec![0.0; c.cols];
                for _ in 0..METADATA_ROWS {
                    c.push_row(&zero);
                }
            }
        }
        c
    }
}

/// All-zero conditioning used for the unconditional guidance branch.
pub fn null_conditioning(spec: &EncoderSpec) -> TokenEmbeddingMatrix {
    TokenEmbeddingMatrix::zeros(1 + METADATA_ROWS, spec.d_model)
}

pub struct ConditioningEncoder {
    spec: EncoderSpec,
    seed: u64,
    embedder: Box<dyn ImageEmbedder>,
    projection: Projection,
}

impl std::fmt::Debug for ConditioningEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConditioningEncoder")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .field("embedder", &self.embedder.name())
            .finish()
    }
}

impl ConditioningEncoder {
    /// Hashed stand-in encoder with a seeded projection.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self, EncodeError> {
        spec.validate()?;
        let embedder = embedder_by_name("hashed", &spec, seed)?;
        let projection = Projection::seeded(spec.d_feature, spec.d_model, seed);
        Self::with_parts(spec, seed, embedder, projection)
    }

    pub fn with_parts(
        spec: EncoderSpec,
        seed: u64,
        embedder: Box<dyn ImageEmbedder>,
        projection: Projection,
    ) -> Result<Self, EncodeError> {
        spec.validate()?;
        if projection.d_in != spec.d_feature || projection.d_out != spec.d_model {
            return Err(EncodeError::ShapeMismatch {
                expected: format!("{}x{} projection", spec.d_feature, spec.d_model),
                got: format!("{}x{}", projection.d_in, projection.d_out),
            });
        }
        Ok(Self {
            spec,
            seed,
            embedder,
            projection,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embed_image(&self, image_ref: &str) -> Result<FeatureMatrix, EncodeError> {
        let f = self.embedder.embed(image_ref)?;
        if f.rows != self.spec.image_patch_tokens || f.cols != self.spec.d_feature {
            return Err(EncodeError::ShapeMismatch {
                expected: format!("{}x{}", self.spec.image_patch_tokens, self.spec.d_feature),
                got: format!("{}x{}", f.rows, f.cols),
            });
        }
        Ok(f)
    }

    pub fn project(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>, EncodeError> {
        self.projection.project(features)
    }

    pub fn text_token_row(&self, term: &str) -> Vec<f64> {
        unit_rows(hash_seed(self.seed, "text", term.as_bytes()), 1, self.spec.d_model)
    }

    /// Number of rows the prompt contributes, excluding metadata.
    pub fn prompt_token_count(&self, prompt: &MultimodalPrompt) -> usize {
        let instr = prompt.instruction().map_or(0, |s| tokenize(s).len());
        instr
            + prompt
                .units()
                .iter()
                .map(|u| match u {
                    PromptUnit::Text { text } => tokenize(text).len(),
                    PromptUnit::Image { .. } => self.spec.image_patch_tokens,
                })
                .sum::<usize>()
    }

    fn content_rows(&self, prompt: &MultimodalPrompt) -> Result<TokenEmbeddingMatrix, EncodeError> {
        let got = self.prompt_token_count(prompt) + METADATA_ROWS;
        if got > self.spec.max_tokens {
            return Err(EncodeError::PromptTooLong {
                got,
                max: self.spec.max_tokens,
            });
        }
        let mut c = TokenEmbeddingMatrix::zeros(0, self.spec.d_model);
        if let Some(instr) = prompt.instruction() {
            for t in tokenize(instr) {
                c.push_row(&self.text_token_row(&t));
            }
        }
        for unit in prompt.units() {
            match unit {
                PromptUnit::Text { text } => {
                    for t in tokenize(text) {
                        c.push_row(&self.text_token_row(&t));
                    }
                }
                PromptUnit::Image { image_ref, .. } => {
                    let feats = self.embed_image(image_ref)?;
                    for row in self.project(&feats)? {
                        c.push_row(&row);
                    }
                }
            }
        }
        Ok(c)
    }

    /// Full conditioning matrix for one noise level.
    pub fn encode(&self, prompt: &MultimodalPrompt, meta: &MetadataTokens) -> Result<TokenEmbeddingMatrix, EncodeError> {
        meta.validate()?;
        Ok(self.conditioning(prompt, meta.framerate, meta.resolution)?.at_sigma(meta.sigma))
    }

    /// Encodes the prompt once; the noise-level row is filled in per sigma.
    pub fn conditioning(
        &self,
        prompt: &MultimodalPrompt,
        framerate: f64,
        resolution: (u32, u32),
    ) -> Result<Conditioning, EncodeError> {
        MetadataTokens { sigma: 1.0, framerate, resolution }.validate()?;
        Ok(Conditioning {
            content: self.content_rows(prompt)?,
            meta: Some((framerate, resolution)),
        })
    }
}
