//! One-word summarization prompts handed to embedders.
//!
//! The embedding of a record is the hidden state right before the trailing
//! `<emb>` token of its prompt. Text is substituted inline; `<image>`
//! placeholders stay literal and are bound by the embedder to the record's
//! image assets in order.

use serde::{Deserialize, Serialize};

use crate::types::{validate_record, Modality, Record, RecordError, Segment};

pub const IMAGE_TOKEN: &str = "<image>";
pub const EMB_TOKEN: &str = "<emb>";

const IMAGE_SUFFIX: &str = " Summarize above image in one word: <emb>";
const TEXT_SUFFIX: &str = " Summarize above sentence in one word: <emb>";
const INTERLEAVED_SUFFIX: &str = " Summarize above image and sentence in one word: <emb>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EolPrompt {
    pub text: String,
    pub image_slots: usize,
}

pub fn build_eol_prompt(r: &Record) -> Result<EolPrompt, RecordError> {
    validate_record(r)?;

    let mut text = String::new();
    if let Some(instruction) = &r.instruction {
        // Single space between instruction and content.
        text.push_str(instruction);
        text.push(' ');
    }
    let mut image_slots = 0;
    for segment in &r.segments {
        match segment {
            Segment::Text(t) => text.push_str(t),
            Segment::Image(_) => {
                text.push_str(IMAGE_TOKEN);
                image_slots += 1;
            }
        }
    }
    text.push_str(match r.modality {
        Modality::Image => IMAGE_SUFFIX,
        Modality::Text => TEXT_SUFFIX,
        Modality::Interleaved => INTERLEAVED_SUFFIX,
    });

    Ok(EolPrompt { text, image_slots })
}
