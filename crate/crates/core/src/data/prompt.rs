use serde::{Deserialize, Serialize};

use super::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Target,
}

/// System and representation prompts wrapped around query content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_prompt: String,
    pub text_repr_prompt: String,
    pub multimodal_repr_prompt: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system_prompt: "Given an image, summarize the provided image in one word. \
                            Given only text, describe the text in one word."
                .to_string(),
            text_repr_prompt: "Represent the given text in one word.".to_string(),
            multimodal_repr_prompt: "Represent the given image in one word.".to_string(),
        }
    }
}

impl PromptTemplate {
    /// All-empty template; [`build_prompt`] then returns content unchanged.
    pub fn disabled() -> Self {
        Self {
            system_prompt: String::new(),
            text_repr_prompt: String::new(),
            multimodal_repr_prompt: String::new(),
        }
    }
}

/// Queries become `<system prompt> <content> <representation prompt>`; targets
/// are passed through without instructions.
pub fn build_prompt(record: &Record, template: &PromptTemplate, side: Side) -> String {
    match side {
        Side::Target => record.target_text.clone(),
        Side::Query => {
            let repr = if record.task_kind.query_is_multimodal() {
                &template.multimodal_repr_prompt
            } else {
                &template.text_repr_prompt
            };
            [
                template.system_prompt.as_str(),
                record.query_text.as_str(),
                repr.as_str(),
            ]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
        }
    }
}
