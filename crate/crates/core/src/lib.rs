//! Grounded video diffusion toolkit at desk scale.
//!
//! The crate covers the full conditioning path: BM25 retrieval over an
//! image-text memory ([`retrieval`]), multimodal prompt assembly and
//! instruction templates ([`prompt`]), the conditioning matrix encoder
//! ([`conditioning`]), EDM preconditioning and a toy trainable denoiser
//! ([`diffusion`]), Heun sampling with classifier-free guidance and a
//! two-stage cascade ([`sampler`]), and Fréchet-distance evaluation
//! ([`metrics`]).

pub mod codec;
pub mod retrieval;
pub mod conditioning;
pub mod prompt;
pub mod diffusion;
pub mod sampler;
pub mod metrics;
pub mod synth;
