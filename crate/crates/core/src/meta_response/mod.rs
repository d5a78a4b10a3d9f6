//! The structured four-part LLM decision (emotion, scene context, response,
//! agent profile): prompt construction, tagged-text parsing and rendering,
//! salvage of malformed output, and instruction-sample generation.

mod datagen;
mod parse;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{AgeGroup, EmotionLabel, Gender, MatchStage, Scene, TaxonomyError, TimbreTone};

pub use datagen::{
    generate_instruction_samples, DatagenError, DatagenEvent, DatagenRequest, InstructionSample, SampleGenerator,
    SampleTargets, SkipRecord, DATAGEN_MAX_REGENERATIONS,
};
pub use parse::{parse_meta_response, repair_or_default, APOLOGY_RESPONSE, UNAVAILABLE};
pub use prompt::{
    build_prompt, corrective_prompt, Exchange, PromptBundle, PromptError, PromptOptions, Speaker, CORRECTIVE_SENTENCE,
    DEFAULT_HISTORY_WINDOW, INSTRUCTION,
};

/// LLM re-asks after an unparsable meta-response, before falling back to repair.
pub const PARSE_RETRIES: u32 = 2;

/// The nine tagged fields, in canonical rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaField {
    EmotionLabel,
    EmotionCause,
    EventScenario,
    Rationale,
    GoalToResponse,
    AgentTimbreTone,
    AgentGender,
    AgentAge,
    EmpatheticResponse,
}

impl MetaField {
    pub const ALL: [MetaField; 9] = [
        MetaField::EmotionLabel,
        MetaField::EmotionCause,
        MetaField::EventScenario,
        MetaField::Rationale,
        MetaField::GoalToResponse,
        MetaField::AgentTimbreTone,
        MetaField::AgentGender,
        MetaField::AgentAge,
        MetaField::EmpatheticResponse,
    ];

    /// Tag text used when rendering, without the angle brackets.
    pub fn tag(self) -> &'static str {
        match self {
            MetaField::EmotionLabel => "Emotion Label",
            MetaField::EmotionCause => "Emotion Cause",
            MetaField::EventScenario => "Event Scenario",
            MetaField::Rationale => "Rationale",
            MetaField::GoalToResponse => "Goal to Response",
            MetaField::AgentTimbreTone => "Agent Timbre and Tone",
            MetaField::AgentGender => "Agent Gender",
            MetaField::AgentAge => "Agent Age",
            MetaField::EmpatheticResponse => "Empathetic Response",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            MetaField::EmotionLabel => "emotion_label",
            MetaField::EmotionCause => "emotion_cause",
            MetaField::EventScenario => "event_scenario",
            MetaField::Rationale => "rationale",
            MetaField::GoalToResponse => "goal_to_response",
            MetaField::AgentTimbreTone => "agent_timbre_tone",
            MetaField::AgentGender => "agent_gender",
            MetaField::AgentAge => "agent_age",
            MetaField::EmpatheticResponse => "empathetic_response",
        }
    }

    pub fn is_closed_vocabulary(self) -> bool {
        matches!(
            self,
            MetaField::EmotionLabel | MetaField::AgentTimbreTone | MetaField::AgentGender | MetaField::AgentAge
        )
    }
}

impl fmt::Display for MetaField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.tag())
    }
}

/// How a field's value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Exact,
    Prefix,
    Fuzzy,
    /// Age given as a number of years and mapped to its group.
    FromYears,
    /// Free text, taken as written (trimmed).
    Verbatim,
    /// Field could not be recovered; a fallback value was substituted.
    Default,
}

impl From<MatchStage> for FieldSource {
    fn from(stage: MatchStage) -> Self {
        match stage {
            MatchStage::Exact => FieldSource::Exact,
            MatchStage::Prefix => FieldSource::Prefix,
            MatchStage::Fuzzy => FieldSource::Fuzzy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub fields: BTreeMap<MetaField, FieldSource>,
    pub repaired: bool,
}

impl Provenance {
    /// What a parse of canonical rendered text records.
    pub fn canonical() -> Self {
        let fields = MetaField::ALL
            .into_iter()
            .map(|f| {
                let source = if f.is_closed_vocabulary() {
                    FieldSource::Exact
                } else {
                    FieldSource::Verbatim
                };
                (f, source)
            })
            .collect();
        Self {
            fields,
            repaired: false,
        }
    }

    pub fn source(&self, field: MetaField) -> Option<FieldSource> {
        self.fields.get(&field).copied()
    }

    pub fn defaulted(&self) -> impl Iterator<Item = MetaField> + '_ {
        self.fields
            .iter()
            .filter(|(_, s)| **s == FieldSource::Default)
            .map(|(f, _)| *f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionBlock {
    pub label: EmotionLabel,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneContextBlock {
    pub event_scenario: Scene,
    pub rationale: String,
    pub goal_to_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub timbre_tone: TimbreTone,
    pub gender: Gender,
    pub age_group: AgeGroup,
}

/// The LLM's structured decision for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub emotion: EmotionBlock,
    pub scene: SceneContextBlock,
    pub response_text: String,
    pub profile: AgentProfile,
    pub provenance: Provenance,
}

impl MetaResponse {
    pub fn field_value(&self, field: MetaField) -> &str {
        match field {
            MetaField::EmotionLabel => self.emotion.label.as_str(),
            MetaField::EmotionCause => &self.emotion.cause,
            MetaField::EventScenario => &self.scene.event_scenario.name,
            MetaField::Rationale => &self.scene.rationale,
            MetaField::GoalToResponse => &self.scene.goal_to_response,
            MetaField::AgentTimbreTone => self.profile.timbre_tone.as_str(),
            MetaField::AgentGender => self.profile.gender.as_str(),
            MetaField::AgentAge => self.profile.age_group.as_str(),
            MetaField::EmpatheticResponse => &self.response_text,
        }
    }

    /// Fields whose values differ between `self` and `other`, ignoring provenance.
    pub fn field_diff(&self, other: &MetaResponse) -> Vec<MetaField> {
        MetaField::ALL
            .into_iter()
            .filter(|&f| self.field_value(f) != other.field_value(f))
            .collect()
    }

    pub fn repaired(&self) -> bool {
        self.provenance.repaired
    }
}

/// Canonical text form: one `<Tag> value` line per field, in [`MetaField::ALL`]
/// order. [`parse_meta_response`] is its left inverse.
pub fn render_meta_response(meta: &MetaResponse) -> String {
    let mut out = String::new();
    for (i, field) in MetaField::ALL.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{field} {}", meta.field_value(field)));
    }
    out
}

#[derive(Debug, Error)]
pub enum MetaResponseError {
    #[error("raw meta-response is empty")]
    EmptyInput,
    #[error("meta-response lacks the {0} field")]
    MissingField(MetaField),
    #[error("invalid value {raw:?} for {field}: {cause}")]
    InvalidLabel {
        field: MetaField,
        raw: String,
        #[source]
        cause: TaxonomyError,
    },
}

impl MetaResponseError {
    pub fn field(&self) -> Option<MetaField> {
        match self {
            MetaResponseError::EmptyInput => None,
            MetaResponseError::MissingField(f) => Some(*f),
            MetaResponseError::InvalidLabel { field, .. } => Some(*field),
        }
    }
}
