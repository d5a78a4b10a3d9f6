//! Closed vocabularies describing the avatar character (emotion label, emotion
//! type, gender, age group, timbre/tone) plus the open scene catalog, and the
//! label normalization used to map free LLM text onto them.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bundled canonical taxonomy document.
pub const CANONICAL_TAXONOMY_JSON: &str = include_str!("../assets/taxonomy.json");

/// Fuzzy matching never goes beyond this edit distance.
pub const MAX_FUZZY_DISTANCE: usize = 2;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("no {kind} matches {raw:?}")]
    NoMatch { kind: VocabularyKind, raw: String },
    #[error("{raw:?} is ambiguous among {kind} values {candidates:?}")]
    AmbiguousMatch {
        kind: VocabularyKind,
        raw: String,
        candidates: Vec<String>,
    },
    #[error("empty {kind} value")]
    EmptyInput { kind: VocabularyKind },
    #[error("age {years} is outside every age group")]
    OutOfRange { years: i64 },
    #[error("invalid taxonomy document: {0}")]
    Invalid(String),
    #[error("taxonomy digest {actual} does not match the bundled canonical digest {expected}")]
    DigestMismatch { expected: String, actual: String },
    #[error("reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyKind {
    EmotionLabel,
    EmotionType,
    Gender,
    AgeGroup,
    TimbreTone,
    Scene,
}

impl VocabularyKind {
    pub const ALL: [VocabularyKind; 6] = [
        VocabularyKind::EmotionLabel,
        VocabularyKind::EmotionType,
        VocabularyKind::Gender,
        VocabularyKind::AgeGroup,
        VocabularyKind::TimbreTone,
        VocabularyKind::Scene,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VocabularyKind::EmotionLabel => "emotion label",
            VocabularyKind::EmotionType => "emotion type",
            VocabularyKind::Gender => "gender",
            VocabularyKind::AgeGroup => "age group",
            VocabularyKind::TimbreTone => "timbre/tone",
            VocabularyKind::Scene => "scene",
        }
    }
}

impl fmt::Display for VocabularyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which normalization stage produced a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStage {
    Exact,
    Prefix,
    Fuzzy,
}

macro_rules! label_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            /// Wraps a string without checking it against a taxonomy. Values
            /// obtained through [`Taxonomy`] lookups are always canonical.
            pub fn new_unchecked(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

label_newtype!(
    /// One of the 32 emotion labels.
    EmotionLabel
);
label_newtype!(
    /// Explicit or Implicit.
    EmotionType
);
label_newtype!(Gender);
label_newtype!(
    /// Canonical text includes the year range, e.g. `Young adults (25-40)`.
    AgeGroup
);
label_newtype!(TimbreTone);

/// Scene is open-vocabulary: values outside the bundled catalog are legal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub catalog_member: bool,
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Result of [`normalize_label`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub value: String,
    pub stage: MatchStage,
}

/// Comparison key: lowercase, internal whitespace collapsed, surrounding
/// punctuation and markup markers removed.
pub(crate) fn match_key(raw: &str) -> String {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    let mut key = String::with_capacity(trimmed.len());
    for (i, word) in trimmed.split_whitespace().enumerate() {
        if i > 0 {
            key.push(' ');
        }
        key.extend(word.chars().flat_map(char::to_lowercase));
    }
    key
}

/// An ordered, case-insensitively unique set of canonical strings.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    kind: VocabularyKind,
    entries: Vec<String>,
    keys: Vec<String>,
    fuzzy_cap: usize,
}

impl Vocabulary {
    pub fn new(kind: VocabularyKind, entries: Vec<String>) -> Result<Self, TaxonomyError> {
        if entries.is_empty() {
            return Err(TaxonomyError::Invalid(format!("{kind} vocabulary is empty")));
        }
        let keys: Vec<String> = entries.iter().map(|e| match_key(e)).collect();
        for (i, key) in keys.iter().enumerate() {
            if key.is_empty() {
                return Err(TaxonomyError::Invalid(format!(
                    "{kind} entry {:?} has no alphanumeric content",
                    entries[i]
                )));
            }
            if keys[..i].contains(key) {
                return Err(TaxonomyError::Invalid(format!(
                    "{kind} entry {:?} is not unique case-insensitively",
                    entries[i]
                )));
            }
        }
        // Two labels at distance d can both sit within d/2 of one raw string,
        // so the cap shrinks for vocabularies with close neighbours.
        let min_pairwise = keys
            .iter()
            .enumerate()
            .flat_map(|(i, a)| keys[i + 1..].iter().map(move |b| strsim::levenshtein(a, b)))
            .min();
        let fuzzy_cap = match min_pairwise {
            Some(d) if d <= MAX_FUZZY_DISTANCE => d.saturating_sub(1),
            _ => MAX_FUZZY_DISTANCE,
        };
        Ok(Self {
            kind,
            entries,
            keys,
            fuzzy_cap,
        })
    }

    pub fn kind(&self) -> VocabularyKind {
        self.kind
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest edit distance accepted by the fuzzy stage for this vocabulary.
    pub fn fuzzy_cap(&self) -> usize {
        self.fuzzy_cap
    }

    /// Position of a canonical entry (exact string comparison).
    pub fn position(&self, canonical: &str) -> Option<usize> {
        self.entries.iter().position(|e| e == canonical)
    }

    pub fn contains(&self, canonical: &str) -> bool {
        self.position(canonical).is_some()
    }

    /// Index of the entry whose key equals `raw`'s key.
    fn exact_index(&self, raw: &str) -> Option<usize> {
        let key = match_key(raw);
        self.keys.iter().position(|k| *k == key)
    }

    pub fn normalize(&self, raw: &str) -> Result<Normalized, TaxonomyError> {
        let key = match_key(raw);
        if key.is_empty() {
            return Err(TaxonomyError::EmptyInput { kind: self.kind });
        }
        if let Some(i) = self.keys.iter().position(|k| *k == key) {
            return Ok(self.hit(i, MatchStage::Exact));
        }

        let prefixed: Vec<usize> = (0..self.keys.len())
            .filter(|&i| self.keys[i].starts_with(&key))
            .collect();
        match prefixed.as_slice() {
            [i] => return Ok(self.hit(*i, MatchStage::Prefix)),
            [] => {}
            _ => return Err(self.ambiguous(raw, &prefixed)),
        }

        let near: Vec<usize> = (0..self.keys.len())
            .filter(|&i| strsim::levenshtein(&self.keys[i], &key) <= self.fuzzy_cap)
            .collect();
        match near.as_slice() {
            [i] => Ok(self.hit(*i, MatchStage::Fuzzy)),
            [] => Err(TaxonomyError::NoMatch {
                kind: self.kind,
                raw: raw.to_string(),
            }),
            _ => Err(self.ambiguous(raw, &near)),
        }
    }

    fn hit(&self, index: usize, stage: MatchStage) -> Normalized {
        Normalized {
            value: self.entries[index].clone(),
            stage,
        }
    }

    fn ambiguous(&self, raw: &str, indices: &[usize]) -> TaxonomyError {
        TaxonomyError::AmbiguousMatch {
            kind: self.kind,
            raw: raw.to_string(),
            candidates: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Maps free text onto a canonical vocabulary member. Stages, in order: exact
/// (case-insensitive, trimmed of whitespace and surrounding markup), unique
/// prefix, unique match within the vocabulary's fuzzy edit-distance cap.
pub fn normalize_label(raw: &str, vocabulary: &Vocabulary) -> Result<Normalized, TaxonomyError> {
    vocabulary.normalize(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct YearRange {
    min: u32,
    max: u32,
}

#[derive(Debug, Deserialize, Serialize)]
struct TaxonomyDocument {
    emotion_labels: Vec<String>,
    emotion_types: Vec<String>,
    genders: Vec<String>,
    age_groups: Vec<String>,
    timbre_tones: Vec<String>,
    scenes: Vec<String>,
}

fn parse_age_range(entry: &str) -> Option<YearRange> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| Regex::new(r"^.*\S\s*\((\d+)\s*-\s*(\d+)\)$").unwrap());
    let caps = re.captures(entry.trim())?;
    let min = caps[1].parse().ok()?;
    let max = caps[2].parse().ok()?;
    (min <= max).then_some(YearRange { min, max })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The full set of avatar-character vocabularies. Immutable after load.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    emotion_labels: Vocabulary,
    emotion_types: Vocabulary,
    genders: Vocabulary,
    age_groups: Vocabulary,
    age_ranges: Vec<YearRange>,
    timbre_tones: Vocabulary,
    scenes: Vocabulary,
    digest: String,
}

impl Taxonomy {
    /// The bundled taxonomy, parsed once.
    pub fn canonical() -> &'static Taxonomy {
        static CANONICAL: OnceLock<Taxonomy> = OnceLock::new();
        CANONICAL.get_or_init(|| Taxonomy::from_json(CANONICAL_TAXONOMY_JSON).expect("bundled taxonomy is valid"))
    }

    pub fn canonical_digest() -> &'static str {
        &Self::canonical().digest
    }

    pub fn from_json(document: &str) -> Result<Self, TaxonomyError> {
        let doc: TaxonomyDocument =
            serde_json::from_str(document).map_err(|e| TaxonomyError::Invalid(e.to_string()))?;
        let age_ranges = doc
            .age_groups
            .iter()
            .map(|g| {
                parse_age_range(g)
                    .ok_or_else(|| TaxonomyError::Invalid(format!("age group {g:?} lacks a \"(min-max)\" range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if age_ranges.windows(2).any(|w| w[1].min < w[0].min) {
            return Err(TaxonomyError::Invalid(
                "age groups must be listed youngest first".into(),
            ));
        }
        Ok(Self {
            emotion_labels: Vocabulary::new(VocabularyKind::EmotionLabel, doc.emotion_labels)?,
            emotion_types: Vocabulary::new(VocabularyKind::EmotionType, doc.emotion_types)?,
            genders: Vocabulary::new(VocabularyKind::Gender, doc.genders)?,
            age_groups: Vocabulary::new(VocabularyKind::AgeGroup, doc.age_groups)?,
            age_ranges,
            timbre_tones: Vocabulary::new(VocabularyKind::TimbreTone, doc.timbre_tones)?,
            scenes: Vocabulary::new(VocabularyKind::Scene, doc.scenes)?,
            digest: sha256_hex(document.as_bytes()),
        })
    }

    /// Loads a taxonomy file. Anything other than the bundled canonical bytes
    /// is rejected unless `allow_custom` is set.
    pub fn load(path: &Path, allow_custom: bool) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        let digest = sha256_hex(text.as_bytes());
        if !allow_custom && digest != Self::canonical_digest() {
            return Err(TaxonomyError::DigestMismatch {
                expected: Self::canonical_digest().to_string(),
                actual: digest,
            });
        }
        Self::from_json(&text)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn is_canonical(&self) -> bool {
        self.digest == Self::canonical_digest()
    }

    pub fn vocabulary(&self, kind: VocabularyKind) -> &Vocabulary {
        match kind {
            VocabularyKind::EmotionLabel => &self.emotion_labels,
            VocabularyKind::EmotionType => &self.emotion_types,
            VocabularyKind::Gender => &self.genders,
            VocabularyKind::AgeGroup => &self.age_groups,
            VocabularyKind::TimbreTone => &self.timbre_tones,
            VocabularyKind::Scene => &self.scenes,
        }
    }

    pub fn emotion_labels(&self) -> impl Iterator<Item = EmotionLabel> + '_ {
        self.emotion_labels.entries().iter().map(EmotionLabel::new_unchecked)
    }

    pub fn emotion_types(&self) -> impl Iterator<Item = EmotionType> + '_ {
        self.emotion_types.entries().iter().map(EmotionType::new_unchecked)
    }

    pub fn genders(&self) -> impl Iterator<Item = Gender> + '_ {
        self.genders.entries().iter().map(Gender::new_unchecked)
    }

    pub fn age_groups(&self) -> impl Iterator<Item = AgeGroup> + '_ {
        self.age_groups.entries().iter().map(AgeGroup::new_unchecked)
    }

    pub fn timbre_tones(&self) -> impl Iterator<Item = TimbreTone> + '_ {
        self.timbre_tones.entries().iter().map(TimbreTone::new_unchecked)
    }

    pub fn scene_catalog(&self) -> impl Iterator<Item = Scene> + '_ {
        self.scenes.entries().iter().map(|name| Scene {
            name: name.clone(),
            catalog_member: true,
        })
    }

    pub fn emotion_label(&self, raw: &str) -> Result<(EmotionLabel, MatchStage), TaxonomyError> {
        let n = self.emotion_labels.normalize(raw)?;
        Ok((EmotionLabel(n.value), n.stage))
    }

    pub fn emotion_type(&self, raw: &str) -> Result<(EmotionType, MatchStage), TaxonomyError> {
        let n = self.emotion_types.normalize(raw)?;
        Ok((EmotionType(n.value), n.stage))
    }

    pub fn gender(&self, raw: &str) -> Result<(Gender, MatchStage), TaxonomyError> {
        let n = self.genders.normalize(raw)?;
        Ok((Gender(n.value), n.stage))
    }

    pub fn age_group(&self, raw: &str) -> Result<(AgeGroup, MatchStage), TaxonomyError> {
        let n = self.age_groups.normalize(raw)?;
        Ok((AgeGroup(n.value), n.stage))
    }

    pub fn timbre_tone(&self, raw: &str) -> Result<(TimbreTone, MatchStage), TaxonomyError> {
        let n = self.timbre_tones.normalize(raw)?;
        Ok((TimbreTone(n.value), n.stage))
    }

    /// Scenes keep the caller's spelling; catalog membership is decided by
    /// case-insensitive comparison.
    pub fn scene(&self, raw: &str) -> Scene {
        let name = raw
            .trim()
            .trim_matches(|c: char| matches!(c, '*' | '_' | '`'))
            .trim()
            .to_string();
        let catalog_member = self.scenes.exact_index(&name).is_some();
        Scene { name, catalog_member }
    }

    /// Age group containing `years`. Boundary years shared by two groups
    /// resolve to the older group.
    pub fn age_group_for(&self, years: i64) -> Result<AgeGroup, TaxonomyError> {
        let index = u32::try_from(years)
            .ok()
            .and_then(|y| self.age_ranges.iter().rposition(|r| r.min <= y && y <= r.max))
            .ok_or(TaxonomyError::OutOfRange { years })?;
        Ok(AgeGroup(self.age_groups.entries()[index].clone()))
    }

    /// Position of an age group in table order (youngest first).
    pub fn age_rank(&self, group: &AgeGroup) -> Option<usize> {
        self.age_groups.position(group.as_str())
    }

    pub fn age_range(&self, group: &AgeGroup) -> Option<RangeInclusive<u32>> {
        self.age_rank(group).map(|i| {
            let r = self.age_ranges[i];
            r.min..=r.max
        })
    }

    /// Serializes back to the bundled document layout.
    pub fn to_json(&self) -> String {
        let doc = TaxonomyDocument {
            emotion_labels: self.emotion_labels.entries.clone(),
            emotion_types: self.emotion_types.entries.clone(),
            genders: self.genders.entries.clone(),
            age_groups: self.age_groups.entries.clone(),
            timbre_tones: self.timbre_tones.entries.clone(),
            scenes: self.scenes.entries.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("taxonomy serializes")
    }
}
