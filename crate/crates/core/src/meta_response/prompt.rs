use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::MetaField;
use crate::taxonomy::{Taxonomy, VocabularyKind};

/// Prior exchanges kept in a prompt.
pub const DEFAULT_HISTORY_WINDOW: usize = 10;

pub const INSTRUCTION: &str = "Now you are an expert of empathetic listener, and you need to \
generate an empathetic response for a user based on the context of the conversation provided. \
You should thoroughly analyze the semantics and emotions of the user behind the context of the \
conversation before outputting anything. Now take your time and think step by step, sequentially \
producing a meta-response that includes four parts of information: 1) Emotion → 2) Scene Context \
→ 3) Response Content → 4) Agent Profile.";

pub const CORRECTIVE_SENTENCE: &str = "Your previous answer did not follow the required tags. \
Answer again with exactly one line per field, each starting with its tag:";

const EMOTION_SECTION: &str = "<Emotion>
• Emotion Label: The emotion type mentioned in user query.
• Emotion Cause: The cause triggering the emotion.";

const SCENE_SECTION: &str = "<Scene Context>
• Event Scenario: The key event mentioned and the scene where the conversation takes place, such as daily conversation, psychological assistance, elder people company, or children company, etc.
• Rationale: The underlying possible reasons for the occurred event, connected with commonsense knowledge.
• Goal to Response: The unexpected goal to reach after responding to the user.";

const RESPONSE_SECTION: &str = "<Response Content>
Empathetic text response that will return to the user.";

const PROFILE_SECTION: &str = "<Agent Profile>
• Agent Timbre & Tone: The speech characteristic of the digital avatar.
• Agent Gender: The gender of the digital avatar.
• Agent Age: The age group of the digital avatar.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "User",
            Speaker::System => "System",
        }
    }
}

/// One prior user/system exchange, surface text only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: String,
    pub system: String,
}

impl Exchange {
    pub fn new(user: impl Into<String>, system: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            system: system.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Most recent exchanges kept; older ones are dropped first.
    pub history_window: usize,
    /// Appends the allowed values to the closed-vocabulary descriptors and an
    /// explicit output-format line. Off by default, which keeps the template
    /// exactly as the fine-tuned model saw it.
    pub vocabulary_hints: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            history_window: DEFAULT_HISTORY_WINDOW,
            vocabulary_hints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    pub user_query: String,
    pub history: Vec<(Speaker, String)>,
    pub rendered: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("user query is empty")]
    EmptyQuery,
}

fn hint_line(descriptor: &str, taxonomy: &Taxonomy, kind: VocabularyKind) -> String {
    format!(
        "{descriptor} One of: {}.",
        taxonomy.vocabulary(kind).entries().join(", ")
    )
}

fn tag_list() -> String {
    MetaField::ALL
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Builds the chain-of-thought meta-response prompt. `history` is ordered
/// oldest first.
pub fn build_prompt(
    query: &str,
    history: &[Exchange],
    options: &PromptOptions,
    taxonomy: &Taxonomy,
) -> Result<PromptBundle, PromptError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let kept = &history[history.len().saturating_sub(options.history_window)..];
    let pairs: Vec<(Speaker, String)> = kept
        .iter()
        .flat_map(|e| [(Speaker::User, e.user.clone()), (Speaker::System, e.system.clone())])
        .collect();

    let mut out = String::new();
    let _ = write!(out, "<User Query>\n{query}\n\n<Conversation History>\n");
    if pairs.is_empty() {
        out.push_str("None\n");
    } else {
        for (speaker, text) in &pairs {
            let _ = writeln!(out, "{}: {text}", speaker.as_str());
        }
    }
    let _ = write!(out, "\n<Instruction>\n{INSTRUCTION}");
    if options.vocabulary_hints {
        let _ = write!(
            out,
            " Write one line per field, each starting with its tag: {}.",
            tag_list()
        );
    }
    out.push_str("\n\n");

    if options.vocabulary_hints {
        let emotion = EMOTION_SECTION.replacen(
            "• Emotion Label: The emotion type mentioned in user query.",
            &hint_line(
                "• Emotion Label: The emotion type mentioned in user query.",
                taxonomy,
                VocabularyKind::EmotionLabel,
            ),
            1,
        );
        let profile = PROFILE_SECTION
            .lines()
            .map(|line| {
                let kind = if line.starts_with("• Agent Timbre") {
                    Some(VocabularyKind::TimbreTone)
                } else if line.starts_with("• Agent Gender") {
                    Some(VocabularyKind::Gender)
                } else if line.starts_with("• Agent Age") {
                    Some(VocabularyKind::AgeGroup)
                } else {
                    None
                };
                kind.map_or_else(|| line.to_string(), |k| hint_line(line, taxonomy, k))
            })
            .collect::<Vec<_>>()
            .join("\n");
        let _ = write!(out, "{emotion}\n\n{SCENE_SECTION}\n\n{RESPONSE_SECTION}\n\n{profile}\n");
    } else {
        let _ = write!(
            out,
            "{EMOTION_SECTION}\n\n{SCENE_SECTION}\n\n{RESPONSE_SECTION}\n\n{PROFILE_SECTION}\n"
        );
    }

    Ok(PromptBundle {
        system_instruction: INSTRUCTION.to_string(),
        user_query: query.to_string(),
        history: pairs,
        rendered: out,
    })
}

/// Re-ask prompt used after an answer that could not be parsed.
pub fn corrective_prompt(bundle: &PromptBundle) -> String {
    format!("{}\n{CORRECTIVE_SENTENCE} {}.\n", bundle.rendered, tag_list())
}
