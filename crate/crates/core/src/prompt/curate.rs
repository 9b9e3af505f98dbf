//! Subject-driven prompt curation: find entity mentions in a caption and
//! follow each one with a segmented image of that entity.
//!
//! Extraction and segmentation are traits so detector/segmentation models
//! can replace the dictionary and synthetic-crop stand-ins shipped here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{InstructionTask, MultimodalPrompt, PromptUnit, Region};

/// An entity mention; `start..end` are byte offsets into the caption and
/// `caption[start..end] == surface`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    fn is_valid_for(&self, caption: &str) -> bool {
        self.start < self.end && caption.get(self.start..self.end) == Some(self.surface.as_str())
    }
}

pub trait EntityExtractor {
    fn extract(&self, caption: &str) -> Vec<EntitySpan>;
}

/// Matches a fixed list of entity phrases at word boundaries, ASCII
/// case-insensitively. Overlapping candidates resolve longest first, then
/// leftmost.
#[derive(Debug, Clone, Default)]
pub struct DictionaryExtractor {
    entries: Vec<String>,
}

impl DictionaryExtractor {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: Vec<String> = entries
            .into_iter()
            .map(Into::into)
            .filter(|e| !e.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        Self { entries }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

fn alnum_before(s: &str, at: usize) -> bool {
    s[..at].chars().next_back().is_some_and(char::is_alphanumeric)
}

fn alnum_after(s: &str, at: usize) -> bool {
    s[at..].chars().next().is_some_and(char::is_alphanumeric)
}

impl EntityExtractor for DictionaryExtractor {
    fn extract(&self, caption: &str) -> Vec<EntitySpan> {
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for entry in &self.entries {
            for (start, _) in caption.char_indices() {
                let end = start + entry.len();
                let Some(window) = caption.get(start..end) else {
                    continue;
                };
                if window.eq_ignore_ascii_case(entry)
                    && !alnum_before(caption, start)
                    && !alnum_after(caption, end)
                {
                    candidates.push((start, end));
                }
            }
        }
        candidates.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for (s, e) in candidates {
            if taken.iter().all(|&(ts, te)| e <= ts || s >= te) {
                taken.push((s, e));
            }
        }
        taken.sort_unstable();
        taken
            .into_iter()
            .map(|(start, end)| EntitySpan {
                surface: caption[start..end].to_owned(),
                start,
                end,
            })
            .collect()
    }
}

/// Runs `extractor` and normalizes its output: spans are sorted by start,
/// and spans that are inconsistent with the caption or overlap an earlier
/// span are dropped.
pub fn extract_entities(caption: &str, extractor: &dyn EntityExtractor) -> Vec<EntitySpan> {
    let mut spans = extractor.extract(caption);
    spans.sort_by_key(|s| (s.start, s.end));
    let mut out: Vec<EntitySpan> = Vec::with_capacity(spans.len());
    for span in spans {
        if !span.is_valid_for(caption) {
            log::warn!("dropping inconsistent entity span {span:?}");
            continue;
        }
        if out.last().is_some_and(|prev| span.start < prev.end) {
            continue;
        }
        out.push(span);
    }
    out
}

/// An image crop for one entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub image_ref: String,
    pub region: Option<Region>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("segmentation failed for {entity:?}: {reason}")]
pub struct SegmentError {
    pub entity: String,
    pub reason: String,
}

pub trait Segmenter {
    fn segment(&self, caption: &str, entity: &EntitySpan) -> Result<Segment, SegmentError>;
}

/// Produces a deterministic crop reference into `source` for every entity.
#[derive(Debug, Clone)]
pub struct SyntheticCropSegmenter {
    pub source: String,
    pub frame_width: u32,
    pub frame_height: u32,
}

impl SyntheticCropSegmenter {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            frame_width: 512,
            frame_height: 288,
        }
    }
}

impl Segmenter for SyntheticCropSegmenter {
    fn segment(&self, caption: &str, entity: &EntitySpan) -> Result<Segment, SegmentError> {
        if self.source.is_empty() {
            return Err(SegmentError {
                entity: entity.surface.clone(),
                reason: "no source image".into(),
            });
        }
        // Horizontal position follows the mention's position in the caption.
        let len = caption.len().max(1) as u64;
        let w = self.frame_width as u64;
        let x = (entity.start as u64 * w / len) as u32;
        let width = (((entity.end - entity.start) as u64 * w / len) as u32).max(1);
        Ok(Segment {
            image_ref: format!("{}#crop={}", self.source, entity.surface.to_lowercase()),
            region: Some(Region {
                x,
                y: 0,
                width: width.min(self.frame_width - x.min(self.frame_width - 1)),
                height: self.frame_height,
            }),
        })
    }
}

/// Builds the subject-driven prompt. Each entity's text stays in place and
/// is immediately followed by its segmented image; entities the segmenter
/// rejects remain plain text. Concatenating the text units always gives
/// back `caption`.
pub fn curate_subject_prompt(
    caption: &str,
    entities: &[EntitySpan],
    segmenter: &dyn Segmenter,
) -> MultimodalPrompt {
    let mut units = Vec::new();
    let mut pending = String::new();
    let mut cursor = 0;
    for entity in entities {
        if entity.start < cursor || !entity.is_valid_for(caption) {
            log::warn!("skipping out-of-order or invalid entity {entity:?}");
            continue;
        }
        match segmenter.segment(caption, entity) {
            Ok(seg) => {
                pending.push_str(&caption[cursor..entity.end]);
                units.push(PromptUnit::Text {
                    text: std::mem::take(&mut pending),
                });
                units.push(PromptUnit::Image {
                    image_ref: seg.image_ref,
                    region: seg.region,
                });
                cursor = entity.end;
            }
            Err(e) => log::warn!("{e}; keeping entity as text"),
        }
    }
    pending.push_str(&caption[cursor..]);
    if !pending.is_empty() || units.is_empty() {
        units.push(PromptUnit::Text { text: pending });
    }
    MultimodalPrompt {
        instruction: Some(InstructionTask::SubjectDriven),
        units,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Refuse;

    impl Segmenter for Refuse {
        fn segment(&self, _: &str, e: &EntitySpan) -> Result<Segment, SegmentError> {
            Err(SegmentError {
                entity: e.surface.clone(),
                reason: "nothing found".into(),
            })
        }
    }

    fn span(surface: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            surface: surface.into(),
            start,
            end,
        }
    }

    #[test]
    fn dictionary_hits() {
        let ex = DictionaryExtractor::new(["dog", "ball"]);
        let caption = "a dog chases a ball";
        assert_eq!(
            extract_entities(caption, &ex),
            vec![span("dog", 2, 5), span("ball", 15, 19)]
        );
    }

    #[test]
    fn no_hits() {
        let ex = DictionaryExtractor::new(["zebra"]);
        assert!(extract_entities("a dog chases a ball", &ex).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let ex = DictionaryExtractor::new(["red car", "car"]);
        assert_eq!(extract_entities("a red car", &ex), vec![span("red car", 2, 9)]);
    }

    #[test]
    fn word_boundaries_and_case() {
        let ex = DictionaryExtractor::new(["dog"]);
        assert!(extract_entities("a hotdog stand", &ex).is_empty());
        assert_eq!(extract_entities("Dog!", &ex), vec![span("Dog", 0, 3)]);
    }

    #[test]
    fn equal_length_overlap_leftmost_wins() {
        let ex = DictionaryExtractor::new(["big red", "red car"]);
        assert_eq!(extract_entities("big red car", &ex), vec![span("big red", 0, 7)]);
    }

    #[test]
    fn curate_single_entity() {
        let seg = SyntheticCropSegmenter::new("frame.png");
        let p = curate_subject_prompt("a dog runs", &[span("dog", 2, 5)], &seg);
        assert_eq!(p.task(), Some(InstructionTask::SubjectDriven));
        let expect_img = seg.segment("a dog runs", &span("dog", 2, 5)).unwrap();
        assert_eq!(
            p.units(),
            &[
                PromptUnit::text("a dog"),
                PromptUnit::Image {
                    image_ref: expect_img.image_ref,
                    region: expect_img.region
                },
                PromptUnit::text(" runs"),
            ]
        );
    }

    #[test]
    fn curate_zero_and_two_entities() {
        let seg = SyntheticCropSegmenter::new("f");
        let p = curate_subject_prompt("a dog runs", &[], &seg);
        assert_eq!(p.units(), &[PromptUnit::text("a dog runs")]);
        assert_eq!(
            p.instruction(),
            Some("Generate a video with the text and image interleaved prompt.")
        );

        let caption = "a dog chases a ball";
        let ents = extract_entities(caption, &DictionaryExtractor::new(["dog", "ball"]));
        let p = curate_subject_prompt(caption, &ents, &seg);
        let images: Vec<&str> = p
            .units()
            .iter()
            .filter_map(|u| match u {
                PromptUnit::Image { image_ref, .. } => Some(image_ref.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(images, ["f#crop=dog", "f#crop=ball"]);
        assert_eq!(p.text_content(), caption);
    }

    #[test]
    fn failed_segmentation_keeps_text() {
        let p = curate_subject_prompt("a dog runs", &[span("dog", 2, 5)], &Refuse);
        assert_eq!(p.units(), &[PromptUnit::text("a dog runs")]);
    }

    #[test]
    fn entity_at_end_has_no_trailing_text() {
        let seg = SyntheticCropSegmenter::new("f");
        let p = curate_subject_prompt("a dog", &[span("dog", 2, 5)], &seg);
        assert_eq!(p.units().len(), 2);
        assert!(p.units()[1].is_image());
    }

    proptest! {
        #[test]
        fn curation_reconstructs_caption(
            words in prop::collection::vec("[a-z]{1,6}", 0..12),
            seps in prop::collection::vec("[ ,.!-]{1,2}", 12),
            dict in prop::collection::vec("[a-z]{1,6}", 0..6),
        ) {
            let caption: String = words.iter().zip(&seps).map(|(w, s)| format!("{w}{s}")).collect();
            let ents = extract_entities(&caption, &DictionaryExtractor::new(dict));
            let p = curate_subject_prompt(&caption, &ents, &SyntheticCropSegmenter::new("img"));
            prop_assert_eq!(p.text_content(), caption);
            prop_assert_eq!(p.image_count(), ents.len());
        }
    }
}
