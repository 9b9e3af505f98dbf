use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vimi_core::conditioning::EncoderSpec;
use vimi_core::diffusion::{DiffusionConfig, Optimizer};
use vimi_core::prompt::InstructionTask;
use vimi_core::retrieval::{Bm25Params, DEFAULT_TOP_K};
use vimi_core::sampler::{CascadeConfig, DEFAULT_GUIDANCE_SCALE};

use crate::CliError;

pub const SEED_ENV: &str = "VIMI_SEED";

/// How a caption is turned into a prompt at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    /// Retrieved pairs then the caption, no instruction.
    Pretrain,
    TextToVideo,
    VideoPrediction,
    SubjectDriven,
}

impl PromptTask {
    pub fn instruction(self) -> Option<InstructionTask> {
        match self {
            PromptTask::Pretrain => None,
            PromptTask::TextToVideo => Some(InstructionTask::TextToVideo),
            PromptTask::VideoPrediction => Some(InstructionTask::VideoPrediction),
            PromptTask::SubjectDriven => Some(InstructionTask::SubjectDriven),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

/// Relative sampling weights of the instruction-tuning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub subject_driven: f64,
    pub video_prediction: f64,
    pub text_to_video: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            subject_driven: 1.0,
            video_prediction: 1.0,
            text_to_video: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn as_array(&self) -> [(InstructionTask, f64); 3] {
        [
            (InstructionTask::SubjectDriven, self.subject_driven),
            (InstructionTask::VideoPrediction, self.video_prediction),
            (InstructionTask::TextToVideo, self.text_to_video),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stage-1 steps with the backbone frozen; unset means 10% of `stage1_steps`.
    pub freeze_steps: Option<usize>,
    pub cond_drop_prob: f64,
    pub hidden: usize,
    pub upsampler_hidden: usize,
    pub chunk_size: usize,
    pub optimizer: Optimizer,
    pub task_weights: TaskWeights,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            stage1_steps: 2_000,
            stage2_steps: 500,
            batch_size: 256,
            lr: 5e-3,
            freeze_steps: None,
            cond_drop_prob: 0.1,
            hidden: 64,
            upsampler_hidden: 16,
            chunk_size: 32,
            optimizer: Optimizer::Adam,
            task_weights: TaskWeights::default(),
        }
    }
}

impl TrainSettings {
    pub fn freeze_steps(&self) -> usize {
        self.freeze_steps.unwrap_or(self.stage1_steps / 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub cfg_scale: f64,
    pub num_samples: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self {
            cfg_scale: DEFAULT_GUIDANCE_SCALE,
            num_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub top_k: usize,
    pub task: PromptTask,
    pub framerate: f64,
    /// Subject dictionary used for subject-driven prompts.
    pub entities: Vec<String>,
    pub paths: Paths,
    pub bm25: Bm25Params,
    pub diffusion: DiffusionConfig,
    pub encoder: EncoderSpec,
    pub cascade: CascadeConfig,
    pub train: TrainSettings,
    pub sample: SampleSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            top_k: DEFAULT_TOP_K,
            task: PromptTask::TextToVideo,
            framerate: 24.0,
            entities: Vec::new(),
            paths: Paths::default(),
            bm25: Bm25Params::default(),
            diffusion: DiffusionConfig::default(),
            encoder: EncoderSpec::default(),
            cascade: CascadeConfig::default(),
            train: TrainSettings::default(),
            sample: SampleSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Explicit seed, else `VIMI_SEED`, else 0.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::input(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.seed = Some(seed);
            }
        }
        Ok(*self.seed.get_or_insert(0))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// SHA-256 over the settings that affect results. File locations are
    /// excluded, so the same experiment in another directory hashes equal.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
        path.clone()
            .ok_or_else(|| CliError::input(format!("no {what} path given (flag or [paths] {what} in the config file)")))
    }
}
