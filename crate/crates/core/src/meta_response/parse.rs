use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

use super::{
    AgentProfile, EmotionBlock, FieldSource, MetaField, MetaResponse, MetaResponseError, Provenance, SceneContextBlock,
};
use crate::taxonomy::{match_key, AgeGroup, EmotionLabel, Gender, Scene, Taxonomy, TimbreTone, VocabularyKind};

/// Placeholder for unrecoverable free-text fields.
pub const UNAVAILABLE: &str = "(unavailable)";

/// Reply used when nothing usable can be salvaged from the LLM output.
pub const APOLOGY_RESPONSE: &str = "I'm sorry, I didn't quite catch that. Could you tell me a little more?";

const DEFAULT_EMOTION: &str = "Content";
const DEFAULT_TIMBRE: &str = "Soft";
const DEFAULT_GENDER: &str = "Female";
const DEFAULT_AGE: &str = "Young adults (25-40)";
const DEFAULT_SCENE: &str = "Daily common conversation";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Field(MetaField),
    /// Section headers from the prompt; they end the preceding value.
    Boundary,
}

fn tag_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"(?i)(?:\*\*|__|\*|_)?<\s*([a-z][a-z0-9 &;\-]*?)\s*>(?:\*\*|__|\*|_)?[ \t]*:?").unwrap()
    })
}

fn classify(name: &str) -> Option<TagKind> {
    let lowered = name.to_lowercase().replace("&amp;", " and ").replace('&', " and ");
    let name = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let kind = match name.as_str() {
        "emotion label" => TagKind::Field(MetaField::EmotionLabel),
        "emotion cause" => TagKind::Field(MetaField::EmotionCause),
        "event scenario" => TagKind::Field(MetaField::EventScenario),
        "rationale" => TagKind::Field(MetaField::Rationale),
        "goal to response" => TagKind::Field(MetaField::GoalToResponse),
        "agent timbre and tone" | "timbre and tone" => TagKind::Field(MetaField::AgentTimbreTone),
        "agent gender" => TagKind::Field(MetaField::AgentGender),
        "agent age" => TagKind::Field(MetaField::AgentAge),
        "empathetic response" | "response content" => TagKind::Field(MetaField::EmpatheticResponse),
        "user query"
        | "conversation history"
        | "instruction"
        | "emotion"
        | "scene context"
        | "agent profile"
        | "meta-response" => TagKind::Boundary,
        _ => return None,
    };
    Some(kind)
}

fn is_marker_line(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.chars().all(|c| matches!(c, '-' | '*' | '•' | '#' | '_' | '>' | '`'))
}

fn strip_emphasis(mut s: &str) -> &str {
    loop {
        let before = s;
        for marker in ["**", "__", "*", "_", "`", "\""] {
            if s.len() >= 2 * marker.len() && s.starts_with(marker) && s.ends_with(marker) {
                s = s[marker.len()..s.len() - marker.len()].trim();
            }
        }
        if s == before {
            return s;
        }
    }
}

fn clean_value(segment: &str) -> String {
    let lines: Vec<&str> = segment.lines().collect();
    let start = lines.iter().position(|l| !is_marker_line(l)).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !is_marker_line(l)).map_or(start, |i| i + 1);
    let joined = lines[start..end.max(start)].join("\n");
    let trimmed = joined.trim().trim_start_matches(':').trim();
    strip_emphasis(trimmed).to_string()
}

struct Extracted<'a> {
    values: BTreeMap<MetaField, String>,
    untagged: &'a str,
}

fn extract(raw: &str) -> Extracted<'_> {
    let hits: Vec<(usize, usize, TagKind)> = tag_pattern()
        .captures_iter(raw)
        .filter_map(|caps| {
            let whole = caps.get(0)?;
            classify(&caps[1]).map(|k| (whole.start(), whole.end(), k))
        })
        .collect();

    let mut values = BTreeMap::new();
    for (i, &(_, value_start, kind)) in hits.iter().enumerate() {
        let TagKind::Field(field) = kind else { continue };
        if values.contains_key(&field) {
            continue;
        }
        let value_end = hits.get(i + 1).map_or(raw.len(), |h| h.0);
        let value = clean_value(&raw[value_start..value_end]);
        if !value.is_empty() {
            values.insert(field, value);
        }
    }
    let untagged = &raw[..hits.first().map_or(raw.len(), |h| h.0)];
    Extracted { values, untagged }
}

fn age_in_years(value: &str) -> Option<i64> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| Regex::new(r"^(\d{1,3})(?:\s*(?:years?(?: old)?|yrs?|y/?o))?$").unwrap());
    re.captures(&match_key(value))?.get(1)?.as_str().parse().ok()
}

enum Value {
    Emotion(EmotionLabel),
    Timbre(TimbreTone),
    Gender(Gender),
    Age(AgeGroup),
    Scene(Scene),
    Text(String),
}

fn interpret(field: MetaField, raw: &str, taxonomy: &Taxonomy) -> Result<(Value, FieldSource), MetaResponseError> {
    let invalid = |cause| MetaResponseError::InvalidLabel {
        field,
        raw: raw.to_string(),
        cause,
    };
    Ok(match field {
        MetaField::EmotionLabel => {
            let (v, stage) = taxonomy.emotion_label(raw).map_err(invalid)?;
            (Value::Emotion(v), stage.into())
        }
        MetaField::AgentTimbreTone => {
            let (v, stage) = taxonomy.timbre_tone(raw).map_err(invalid)?;
            (Value::Timbre(v), stage.into())
        }
        MetaField::AgentGender => {
            let (v, stage) = taxonomy.gender(raw).map_err(invalid)?;
            (Value::Gender(v), stage.into())
        }
        MetaField::AgentAge => match age_in_years(raw) {
            Some(years) => (
                Value::Age(taxonomy.age_group_for(years).map_err(invalid)?),
                FieldSource::FromYears,
            ),
            None => {
                let (v, stage) = taxonomy.age_group(raw).map_err(invalid)?;
                (Value::Age(v), stage.into())
            }
        },
        MetaField::EventScenario => (Value::Scene(taxonomy.scene(raw)), FieldSource::Verbatim),
        MetaField::EmotionCause | MetaField::Rationale | MetaField::GoalToResponse | MetaField::EmpatheticResponse => {
            (Value::Text(raw.to_string()), FieldSource::Verbatim)
        }
    })
}

#[derive(Default)]
struct Builder {
    emotion: Option<EmotionLabel>,
    cause: Option<String>,
    scene: Option<Scene>,
    rationale: Option<String>,
    goal: Option<String>,
    timbre: Option<TimbreTone>,
    gender: Option<Gender>,
    age: Option<AgeGroup>,
    response: Option<String>,
    provenance: BTreeMap<MetaField, FieldSource>,
}

impl Builder {
    fn set(&mut self, field: MetaField, value: Value, source: FieldSource) {
        match value {
            Value::Emotion(v) => self.emotion = Some(v),
            Value::Timbre(v) => self.timbre = Some(v),
            Value::Gender(v) => self.gender = Some(v),
            Value::Age(v) => self.age = Some(v),
            Value::Scene(v) => self.scene = Some(v),
            Value::Text(v) => match field {
                MetaField::EmotionCause => self.cause = Some(v),
                MetaField::Rationale => self.rationale = Some(v),
                MetaField::GoalToResponse => self.goal = Some(v),
                _ => self.response = Some(v),
            },
        }
        self.provenance.insert(field, source);
    }

    /// Panics if a field was never set; callers set all nine.
    fn finish(self, repaired: bool) -> MetaResponse {
        MetaResponse {
            emotion: EmotionBlock {
                label: self.emotion.expect("emotion set"),
                cause: self.cause.expect("cause set"),
            },
            scene: SceneContextBlock {
                event_scenario: self.scene.expect("scene set"),
                rationale: self.rationale.expect("rationale set"),
                goal_to_response: self.goal.expect("goal set"),
            },
            response_text: self.response.expect("response set"),
            profile: AgentProfile {
                timbre_tone: self.timbre.expect("timbre set"),
                gender: self.gender.expect("gender set"),
                age_group: self.age.expect("age set"),
            },
            provenance: Provenance {
                fields: self.provenance,
                repaired,
            },
        }
    }
}

/// Parses tagged LLM output into a validated [`MetaResponse`].
///
/// Tags are matched case-insensitively, may be wrapped in markdown emphasis or
/// followed by a colon, and may appear in any order. `Timbre & Tone` and
/// `Timbre and Tone` are both accepted. Closed-vocabulary values are
/// normalized against `taxonomy`; the age may be a group name or a bare number
/// of years.
pub fn parse_meta_response(raw: &str, taxonomy: &Taxonomy) -> Result<MetaResponse, MetaResponseError> {
    if raw.trim().is_empty() {
        return Err(MetaResponseError::EmptyInput);
    }
    let extracted = extract(raw);
    if let Some(missing) = MetaField::ALL.into_iter().find(|f| !extracted.values.contains_key(f)) {
        return Err(MetaResponseError::MissingField(missing));
    }
    let mut builder = Builder::default();
    for field in MetaField::ALL {
        let (value, source) = interpret(field, &extracted.values[&field], taxonomy)?;
        builder.set(field, value, source);
    }
    Ok(builder.finish(false))
}

fn default_value(field: MetaField, taxonomy: &Taxonomy, untagged: &str) -> Value {
    fn pick(taxonomy: &Taxonomy, kind: VocabularyKind, preferred: &str) -> String {
        let vocabulary = taxonomy.vocabulary(kind);
        if vocabulary.contains(preferred) {
            preferred.to_string()
        } else {
            vocabulary.entries()[0].clone()
        }
    }
    match field {
        MetaField::EmotionLabel => Value::Emotion(EmotionLabel::new_unchecked(pick(
            taxonomy,
            VocabularyKind::EmotionLabel,
            DEFAULT_EMOTION,
        ))),
        MetaField::AgentTimbreTone => Value::Timbre(TimbreTone::new_unchecked(pick(
            taxonomy,
            VocabularyKind::TimbreTone,
            DEFAULT_TIMBRE,
        ))),
        MetaField::AgentGender => Value::Gender(Gender::new_unchecked(pick(
            taxonomy,
            VocabularyKind::Gender,
            DEFAULT_GENDER,
        ))),
        MetaField::AgentAge => Value::Age(AgeGroup::new_unchecked(pick(
            taxonomy,
            VocabularyKind::AgeGroup,
            DEFAULT_AGE,
        ))),
        MetaField::EventScenario => Value::Scene(taxonomy.scene(&pick(taxonomy, VocabularyKind::Scene, DEFAULT_SCENE))),
        MetaField::EmpatheticResponse => {
            let longest = untagged
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .fold(None::<&str>, |best, l| match best {
                    Some(b) if b.chars().count() >= l.chars().count() => Some(b),
                    _ => Some(l),
                });
            Value::Text(longest.unwrap_or(APOLOGY_RESPONSE).to_string())
        }
        MetaField::EmotionCause | MetaField::Rationale | MetaField::GoalToResponse => {
            Value::Text(UNAVAILABLE.to_string())
        }
    }
}

/// Salvages whatever fields parse from `raw` and substitutes defaults for the
/// rest. Never fails; the result is flagged `repaired` in its provenance.
pub fn repair_or_default(raw: &str, parse_error: &MetaResponseError, taxonomy: &Taxonomy) -> MetaResponse {
    tracing::debug!(error = %parse_error, "repairing meta-response");
    let extracted = extract(raw);
    let mut builder = Builder::default();
    for field in MetaField::ALL {
        let parsed = extracted
            .values
            .get(&field)
            .and_then(|v| interpret(field, v, taxonomy).ok());
        match parsed {
            Some((value, source)) => builder.set(field, value, source),
            None => builder.set(
                field,
                default_value(field, taxonomy, extracted.untagged),
                FieldSource::Default,
            ),
        }
    }
    builder.finish(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_response::render_meta_response;

    const TRAFFIC: &str = include_str!("../../assets/golden/traffic_meta_response.txt");

    fn tax() -> &'static Taxonomy {
        Taxonomy::canonical()
    }

    fn traffic() -> MetaResponse {
        parse_meta_response(TRAFFIC, tax()).unwrap()
    }

    #[test]
    fn golden_traffic_output() {
        let m = traffic();
        assert_eq!(m.emotion.label.as_str(), "Angry");
        assert_eq!(m.emotion.cause, "Traffic");
        assert_eq!(m.scene.event_scenario.name, "Daily Common Conversation");
        assert!(m.scene.event_scenario.catalog_member);
        assert_eq!(
            m.scene.rationale,
            "Traffic congestion can result in lateness, causing individuals to feel anxious and frustrated"
        );
        assert_eq!(m.scene.goal_to_response, "Alleviating anxiety and agitation.");
        assert_eq!(m.profile.timbre_tone.as_str(), "Intense");
        assert_eq!(m.profile.gender.as_str(), "Female");
        assert_eq!(m.profile.age_group.as_str(), "Young adults (25-40)");
        assert_eq!(m.response_text, "I hate traffic too, it makes me crazy!");
        assert_eq!(m.provenance, Provenance::canonical());
    }

    #[test]
    fn render_emits_nine_tag_lines() {
        let text = render_meta_response(&traffic());
        assert!(text.lines().any(|l| l == "<Emotion Label> Angry"));
        assert_eq!(text.lines().count(), 9);
        assert!(text.lines().all(|l| l.starts_with('<')));
        assert_eq!(parse_meta_response(&text, tax()).unwrap(), traffic());
    }

    #[test]
    fn age_as_integer() {
        let raw = TRAFFIC.replace("<Agent Age> Young adults (25-40)", "<Agent Age> 30");
        let m = parse_meta_response(&raw, tax()).unwrap();
        assert_eq!(m.profile.age_group, tax().age_group_for(30).unwrap());
        assert_eq!(m.provenance.source(MetaField::AgentAge), Some(FieldSource::FromYears));
        let raw = TRAFFIC.replace("<Agent Age> Young adults (25-40)", "<Agent Age> 30 years old");
        assert_eq!(
            parse_meta_response(&raw, tax()).unwrap().profile.age_group.as_str(),
            "Young adults (25-40)"
        );
    }

    #[test]
    fn markdown_and_ampersand_variants() {
        let raw = "**<Emotion Label>**: *angry*\n\
                   - **<Emotion Cause>** Traffic\n\
                   - <EVENT SCENARIO> Daily Common Conversation\n\
                   <rationale>: Traffic congestion can result in lateness, causing individuals to feel anxious and frustrated\n\
                   <Goal To Response> Alleviating anxiety and agitation.\n\
                   <Agent Timbre & Tone> intense\n\
                   <Agent Gender> **Female**\n\
                   <Agent Age> young adults\n\
                   <Empathetic Response> I hate traffic too, it makes me crazy!\n";
        let m = parse_meta_response(raw, tax()).unwrap();
        assert!(m.field_diff(&traffic()).is_empty(), "{:?}", m.field_diff(&traffic()));
        assert_eq!(m.provenance.source(MetaField::AgentAge), Some(FieldSource::Prefix));
    }

    #[test]
    fn section_headers_end_values() {
        let raw = TRAFFIC
            .replace("<Event Scenario>", "<Scene Context>\n<Event Scenario>")
            .replace("<Agent Timbre and Tone>", "<Agent Profile>\n<Agent Timbre and Tone>");
        let m = parse_meta_response(&raw, tax()).unwrap();
        assert!(m.field_diff(&traffic()).is_empty());
    }

    #[test]
    fn missing_and_invalid_are_distinguishable() {
        let raw = TRAFFIC.replace("<Agent Gender> Female\n", "");
        assert!(matches!(
            parse_meta_response(&raw, tax()),
            Err(MetaResponseError::MissingField(MetaField::AgentGender))
        ));
        let raw = TRAFFIC.replace("<Emotion Label> Angry", "<Emotion Label> Bored");
        match parse_meta_response(&raw, tax()) {
            Err(MetaResponseError::InvalidLabel { field, raw, .. }) => {
                assert_eq!(field, MetaField::EmotionLabel);
                assert_eq!(raw, "Bored");
            }
            other => panic!("unexpected {other:?}"),
        }
        let raw = TRAFFIC.replace("<Agent Age> Young adults (25-40)", "<Agent Age> 95");
        assert!(matches!(
            parse_meta_response(&raw, tax()),
            Err(MetaResponseError::InvalidLabel {
                field: MetaField::AgentAge,
                ..
            })
        ));
        assert!(matches!(
            parse_meta_response(" \n", tax()),
            Err(MetaResponseError::EmptyInput)
        ));
    }

    #[test]
    fn repair_single_field() {
        let raw = "<Empathetic Response> ok";
        let err = parse_meta_response(raw, tax()).unwrap_err();
        let m = repair_or_default(raw, &err, tax());
        assert_eq!(m.response_text, "ok");
        assert_eq!(m.emotion.label.as_str(), "Content");
        assert_eq!(m.emotion.cause, UNAVAILABLE);
        assert_eq!(m.profile.timbre_tone.as_str(), "Soft");
        assert_eq!(m.profile.gender.as_str(), "Female");
        assert_eq!(m.profile.age_group.as_str(), "Young adults (25-40)");
        assert_eq!(m.scene.event_scenario.name, "Daily common conversation");
        assert_eq!(m.scene.rationale, UNAVAILABLE);
        assert_eq!(m.scene.goal_to_response, UNAVAILABLE);
        assert!(m.repaired());
        assert_eq!(m.provenance.defaulted().count(), 8);
    }

    #[test]
    fn repair_untagged_text() {
        let raw = "hello there";
        let err = parse_meta_response(raw, tax()).unwrap_err();
        let m = repair_or_default(raw, &err, tax());
        assert_eq!(m.response_text, "hello there");
        assert_eq!(m.provenance.defaulted().count(), 9);

        let raw = "Sure.\nHere is my long answer to you.\n<Agent Gender> Male";
        let err = parse_meta_response(raw, tax()).unwrap_err();
        let m = repair_or_default(raw, &err, tax());
        assert_eq!(m.response_text, "Here is my long answer to you.");
        assert_eq!(m.profile.gender.as_str(), "Male");
    }

    #[test]
    fn repair_with_nothing_usable_apologizes() {
        let err = MetaResponseError::EmptyInput;
        let m = repair_or_default("", &err, tax());
        assert_eq!(m.response_text, APOLOGY_RESPONSE);
        let m = repair_or_default("<Emotion Label>", &err, tax());
        assert_eq!(m.response_text, APOLOGY_RESPONSE);
    }

    #[test]
    fn repair_salvages_everything_but_the_missing_field() {
        let raw = TRAFFIC.replace("<Agent Gender> Female\n", "");
        let err = parse_meta_response(&raw, tax()).unwrap_err();
        let m = repair_or_default(&raw, &err, tax());
        let full = traffic();
        assert!(m.field_diff(&full).is_empty());
        assert_eq!(m.profile.gender.as_str(), "Female");
        assert!(m.repaired());
        let defaulted: Vec<_> = m.provenance.defaulted().collect();
        assert_eq!(defaulted, vec![MetaField::AgentGender]);
    }

    #[test]
    fn repair_is_idempotent_on_its_rendering() {
        for raw in ["", "hello there", "<Emotion Label> Sad\n<Agent Age> 70", TRAFFIC] {
            let err = MetaResponseError::EmptyInput;
            let first = repair_or_default(raw, &err, tax());
            let rendered = render_meta_response(&first);
            let reparsed = parse_meta_response(&rendered, tax()).unwrap();
            assert!(reparsed.field_diff(&first).is_empty());
            let again = repair_or_default(&rendered, &err, tax());
            assert!(again.field_diff(&first).is_empty());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn free_text() -> impl Strategy<Value = String> {
            "[A-Za-z0-9][A-Za-z0-9 ,.!?'()-]{0,60}[A-Za-z0-9.!?]"
                .prop_filter("no marker-only content", |s| !s.trim().is_empty())
        }

        prop_compose! {
            pub(crate) fn arb_meta()(
                label in 0usize..32,
                timbre in 0usize..12,
                gender in 0usize..2,
                age in 0usize..6,
                scene in prop_oneof![
                    (0usize..29).prop_map(|i| Taxonomy::canonical().vocabulary(VocabularyKind::Scene).entries()[i].clone()),
                    free_text(),
                ],
                cause in free_text(),
                rationale in free_text(),
                goal in free_text(),
                response in free_text(),
            ) -> MetaResponse {
                let t = Taxonomy::canonical();
                MetaResponse {
                    emotion: EmotionBlock {
                        label: t.emotion_labels().nth(label).unwrap(),
                        cause,
                    },
                    scene: SceneContextBlock {
                        event_scenario: t.scene(&scene),
                        rationale,
                        goal_to_response: goal,
                    },
                    response_text: response,
                    profile: AgentProfile {
                        timbre_tone: t.timbre_tones().nth(timbre).unwrap(),
                        gender: t.genders().nth(gender).unwrap(),
                        age_group: t.age_groups().nth(age).unwrap(),
                    },
                    provenance: Provenance::canonical(),
                }
            }
        }

        proptest! {
            #[test]
            fn render_then_parse_is_identity(m in arb_meta()) {
                let parsed = parse_meta_response(&render_meta_response(&m), tax()).unwrap();
                prop_assert_eq!(parsed, m);
            }

            #[test]
            fn tag_order_does_not_matter(m in arb_meta(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let rendered = render_meta_response(&m);
                let mut lines: Vec<&str> = rendered.lines().collect();
                lines.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let parsed = parse_meta_response(&lines.join("\n"), tax()).unwrap();
                prop_assert_eq!(parsed, m);
            }

            #[test]
            fn repair_is_total(raw in ".{0,300}") {
                let err = MetaResponseError::EmptyInput;
                let m = repair_or_default(&raw, &err, tax());
                prop_assert!(!m.response_text.is_empty());
                prop_assert!(m.repaired());
            }
        }
    }
}
