//! Multimodal prompts: interleaved text and image units, optionally
//! prefixed by one of three task instructions.

mod curate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievalResult;

pub use curate::{
    curate_subject_prompt, extract_entities, DictionaryExtractor, EntityExtractor, EntitySpan,
    Segment, SegmentError, Segmenter, SyntheticCropSegmenter,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt has no units")]
    EmptyPrompt,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("first frame reference is missing")]
    MissingFrame,
    #[error("instruction {0:?} is not a registered template")]
    UnknownInstruction(String),
}

/// Pixel box inside the referenced image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PromptUnit {
    Text {
        text: String,
    },
    Image {
        image_ref: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<Region>,
    },
}

impl PromptUnit {
    pub fn text(text: impl Into<String>) -> Self {
        PromptUnit::Text { text: text.into() }
    }

    pub fn image(image_ref: impl Into<String>) -> Self {
        PromptUnit::Image {
            image_ref: image_ref.into(),
            region: None,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, PromptUnit::Image { .. })
    }
}

/// The three instruction-tuning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstructionTask {
    SubjectDriven,
    VideoPrediction,
    TextToVideo,
}

impl InstructionTask {
    pub const ALL: [InstructionTask; 3] = [
        InstructionTask::SubjectDriven,
        InstructionTask::VideoPrediction,
        InstructionTask::TextToVideo,
    ];

    pub fn template(self) -> &'static str {
        match self {
            InstructionTask::SubjectDriven => {
                "Generate a video with the text and image interleaved prompt."
            }
            InstructionTask::VideoPrediction => {
                "Generate a video with the following text and first frame."
            }
            InstructionTask::TextToVideo => {
                "Generate a video with the retrieved text-image examples and text prompt."
            }
        }
    }

    pub fn from_template(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.template() == s)
    }
}

#[derive(Serialize, Deserialize)]
struct RawPrompt {
    instruction: Option<String>,
    units: Vec<PromptUnit>,
}

/// Ordered sequence of prompt units. Never empty; the instruction, when
/// present, is always one of the registered templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPrompt", into = "RawPrompt")]
pub struct MultimodalPrompt {
    instruction: Option<InstructionTask>,
    units: Vec<PromptUnit>,
}

impl TryFrom<RawPrompt> for MultimodalPrompt {
    type Error = PromptError;

    fn try_from(raw: RawPrompt) -> Result<Self, PromptError> {
        let instruction = raw
            .instruction
            .map(|s| InstructionTask::from_template(&s).ok_or(PromptError::UnknownInstruction(s)))
            .transpose()?;
        MultimodalPrompt::new(instruction, raw.units)
    }
}

impl From<MultimodalPrompt> for RawPrompt {
    fn from(p: MultimodalPrompt) -> Self {
        RawPrompt {
            instruction: p.instruction.map(|t| t.template().to_owned()),
            units: p.units,
        }
    }
}

impl MultimodalPrompt {
    pub fn new(instruction: Option<InstructionTask>, units: Vec<PromptUnit>) -> Result<Self, PromptError> {
        if units.is_empty() {
            return Err(PromptError::EmptyPrompt);
        }
        Ok(Self { instruction, units })
    }

    pub fn task(&self) -> Option<InstructionTask> {
        self.instruction
    }

    pub fn instruction(&self) -> Option<&'static str> {
        self.instruction.map(InstructionTask::template)
    }

    pub fn units(&self) -> &[PromptUnit] {
        &self.units
    }

    pub fn image_count(&self) -> usize {
        self.units.iter().filter(|u| u.is_image()).count()
    }

    /// Concatenation of all text units, in order.
    pub fn text_content(&self) -> String {
        self.units
            .iter()
            .filter_map(|u| match u {
                PromptUnit::Text { text } => Some(text.as_str()),
                PromptUnit::Image { .. } => None,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prompt serialization is infallible")
    }
}

fn retrieval_units(caption: &str, retrieved: &RetrievalResult) -> Vec<PromptUnit> {
    let mut units = Vec::with_capacity(2 * retrieved.len() + 1);
    for hit in &retrieved.pairs {
        units.push(PromptUnit::text(hit.pair.caption.clone()));
        units.push(PromptUnit::image(hit.pair.image_ref.clone()));
    }
    units.push(PromptUnit::text(caption));
    units
}

/// Stage-one prompt: each retrieved pair as caption then image, in score
/// order, followed by the query caption. No instruction.
pub fn build_pretraining_prompt(caption: &str, retrieved: &RetrievalResult) -> MultimodalPrompt {
    MultimodalPrompt {
        instruction: None,
        units: retrieval_units(caption, retrieved),
    }
}

/// Same layout as [`build_pretraining_prompt`] under the text-to-video instruction.
pub fn build_instructed_t2v_prompt(caption: &str, retrieved: &RetrievalResult) -> MultimodalPrompt {
    MultimodalPrompt {
        instruction: Some(InstructionTask::TextToVideo),
        units: retrieval_units(caption, retrieved),
    }
}

/// Caption followed by the first frame, under the video-prediction instruction.
pub fn build_prediction_prompt(caption: &str, first_frame: &str) -> Result<MultimodalPrompt, PromptError> {
    if caption.is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    if first_frame.trim().is_empty() {
        return Err(PromptError::MissingFrame);
    }
    Ok(MultimodalPrompt {
        instruction: Some(InstructionTask::VideoPrediction),
        units: vec![PromptUnit::text(caption), PromptUnit::image(first_frame)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{ImageTextPair, ScoredPair};
    use sha2::{Digest, Sha256};

    fn retrieved(k: usize) -> RetrievalResult {
        RetrievalResult {
            query: "q".into(),
            pairs: (0..k)
                .map(|i| ScoredPair {
                    pair: ImageTextPair {
                        id: format!("p{i}"),
                        caption: format!("cap {i}"),
                        image_ref: format!("img{i}"),
                    },
                    score: 10.0 - i as f64,
                })
                .collect(),
        }
    }

    fn kinds(p: &MultimodalPrompt) -> String {
        p.units().iter().map(|u| if u.is_image() { 'i' } else { 't' }).collect()
    }

    #[test]
    fn template_checksums() {
        let pinned = [
            (InstructionTask::SubjectDriven, "97afdedf0e39d1175a2a8aa142381c10cc312bd4cd4773b48d1866ef9f7926dc"),
            (InstructionTask::VideoPrediction, "c5a7228c06dd6bd48642758224bac303ea87f96767dfec59da042b17ad9dc30c"),
            (InstructionTask::TextToVideo, "abd8f25e0f9dda063fea0a568462da88e0f88c07699cca423433db7d4e2f29e6"),
        ];
        for (task, want) in pinned {
            let hex: String = Sha256::digest(task.template().as_bytes())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            assert_eq!(hex, want, "{task:?}");
            assert_eq!(InstructionTask::from_template(task.template()), Some(task));
        }
    }

    #[test]
    fn pretraining_prompt_shapes() {
        let p0 = build_pretraining_prompt("a cat", &retrieved(0));
        assert_eq!(p0.units(), &[PromptUnit::text("a cat")]);
        assert_eq!(p0.instruction(), None);

        let p2 = build_pretraining_prompt("a cat", &retrieved(2));
        assert_eq!(kinds(&p2), "titit");
        assert_eq!(p2.units()[0], PromptUnit::text("cap 0"));
        assert_eq!(p2.units()[1], PromptUnit::image("img0"));
        assert_eq!(p2.units()[4], PromptUnit::text("a cat"));

        assert_eq!(build_pretraining_prompt("a cat", &retrieved(3)).units().len(), 7);
    }

    #[test]
    fn instructed_t2v() {
        let p = build_instructed_t2v_prompt("x", &retrieved(2));
        assert_eq!(p.units().len(), 5);
        assert_eq!(
            p.instruction(),
            Some("Generate a video with the retrieved text-image examples and text prompt.")
        );
        let p0 = build_instructed_t2v_prompt("x", &retrieved(0));
        assert_eq!(p0.units(), &[PromptUnit::text("x")]);
        assert_eq!(p0.task(), Some(InstructionTask::TextToVideo));
    }

    #[test]
    fn prediction_prompt() {
        let p = build_prediction_prompt("a wave crashes", "frame0").unwrap();
        assert_eq!(kinds(&p), "ti");
        assert_eq!(p.task(), Some(InstructionTask::VideoPrediction));
        assert_eq!(build_prediction_prompt("", "frame0"), Err(PromptError::EmptyCaption));
        assert_eq!(build_prediction_prompt("x", " "), Err(PromptError::MissingFrame));
    }

    #[test]
    fn json_roundtrip_preserves_order() {
        let p = build_prediction_prompt("a wave crashes", "frame0").unwrap();
        let json = p.to_json();
        assert_eq!(
            json,
            r#"{"instruction":"Generate a video with the following text and first frame.","units":[{"kind":"text","text":"a wave crashes"},{"kind":"image","image_ref":"frame0"}]}"#
        );
        let back: MultimodalPrompt = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_rejects_unregistered_instruction_and_empty_units() {
        let bad = r#"{"instruction":"Make a video.","units":[{"kind":"text","text":"a"}]}"#;
        assert!(serde_json::from_str::<MultimodalPrompt>(bad).is_err());
        let empty = r#"{"instruction":null,"units":[]}"#;
        assert!(serde_json::from_str::<MultimodalPrompt>(empty).is_err());
        assert_eq!(MultimodalPrompt::new(None, vec![]), Err(PromptError::EmptyPrompt));
    }
}
