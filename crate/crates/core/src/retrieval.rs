//! Reference speech clips and face images, and the weighted lookups that pick
//! the voice and face conditioning for a turn.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{sha256_hex, AgeGroup, EmotionLabel, Gender, Taxonomy, TimbreTone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpeech {
    pub id: String,
    pub media_path: PathBuf,
    pub emotion: EmotionLabel,
    pub gender: Gender,
    pub timbre: TimbreTone,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceFace {
    pub id: String,
    pub media_path: PathBuf,
    pub gender: Gender,
    pub age_group: AgeGroup,
}

#[derive(Debug, Deserialize, Serialize)]
struct SpeechEntry {
    id: String,
    path: String,
    emotion: String,
    gender: String,
    timbre: String,
    duration_s: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct FaceEntry {
    id: String,
    path: String,
    gender: String,
    age_group: String,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct Manifest {
    #[serde(default)]
    speeches: Vec<SpeechEntry>,
    #[serde(default)]
    faces: Vec<FaceEntry>,
}

/// Everything wrong with a manifest, collected in one pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    ManifestParse(String),
    #[error("manifest validation failed:\n{0}")]
    ValidationFailed(ValidationReport),
    #[error("reference index has no candidates")]
    EmptyIndex,
    #[error("reading reference media {path}: {source}")]
    MediaIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which query keys a selected entry satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechMatchMask {
    pub emotion: bool,
    pub gender: bool,
    pub timbre: bool,
}

impl SpeechMatchMask {
    pub fn is_full(self) -> bool {
        self.emotion && self.gender && self.timbre
    }

    pub fn score(self) -> u32 {
        4 * u32::from(self.emotion) + 2 * u32::from(self.gender) + u32::from(self.timbre)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceMatchMask {
    pub gender: bool,
    pub age_group: bool,
    /// Steps between requested and candidate age groups in table order.
    pub age_distance: u32,
}

impl FaceMatchMask {
    pub fn is_full(self) -> bool {
        self.gender && self.age_group
    }

    /// `2·gender + 1·age + 1/(1+distance)`.
    pub fn score(self) -> f64 {
        f64::from(self.integral()) + 1.0 / (1.0 + f64::from(self.age_distance))
    }

    fn integral(self) -> u32 {
        2 * u32::from(self.gender) + u32::from(self.age_group)
    }

    /// Exact comparison of the rational scores by cross-multiplication.
    fn cmp_score(self, other: FaceMatchMask) -> Ordering {
        let (a, da) = (u64::from(self.integral()), 1 + u64::from(self.age_distance));
        let (b, db) = (u64::from(other.integral()), 1 + u64::from(other.age_distance));
        ((a * da + 1) * db).cmp(&((b * db + 1) * da))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechSelection<'a> {
    pub entry: &'a ReferenceSpeech,
    pub mask: SpeechMatchMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceSelection<'a> {
    pub entry: &'a ReferenceFace,
    pub mask: FaceMatchMask,
}

/// Immutable metadata index over the reference media.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    speeches: Vec<ReferenceSpeech>,
    faces: Vec<ReferenceFace>,
    age_order: Vec<AgeGroup>,
    media_root: PathBuf,
    manifest_hash: String,
}

fn relative_inside(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    ok.then(|| p.to_path_buf())
}

impl ReferenceIndex {
    /// Builds an index from already-validated entries. `taxonomy` supplies the
    /// age-group order used by face scoring.
    pub fn from_entries(speeches: Vec<ReferenceSpeech>, faces: Vec<ReferenceFace>, taxonomy: &Taxonomy) -> Self {
        Self {
            speeches,
            faces,
            age_order: taxonomy.age_groups().collect(),
            media_root: PathBuf::new(),
            manifest_hash: String::new(),
        }
    }

    /// Loads and validates `references.json`. All problems are gathered into
    /// one [`ValidationReport`] rather than stopping at the first.
    pub fn load(manifest_path: &Path, media_root: &Path, taxonomy: &Taxonomy) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(manifest_path).map_err(|source| RetrievalError::ManifestIo {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| RetrievalError::ManifestParse(e.to_string()))?;
        let mut report = ValidationReport::default();
        let root = media_root.canonicalize().ok();
        if root.is_none() {
            report
                .errors
                .push(format!("media root {} does not exist", media_root.display()));
        }

        let mut seen = BTreeSet::new();
        let mut check_common = |report: &mut ValidationReport, kind: &str, id: &str, path: &str| {
            if id.trim().is_empty() {
                report.errors.push(format!("{kind} entry with empty id"));
            } else if !seen.insert(id.to_string()) {
                report.errors.push(format!("duplicate id {id:?}"));
            }
            let Some(rel) = relative_inside(path) else {
                report
                    .errors
                    .push(format!("{kind} {id:?}: path {path:?} escapes the media root"));
                return None;
            };
            let root = root.as_ref()?;
            match root.join(&rel).canonicalize() {
                Ok(full) if full.starts_with(root) && full.is_file() => Some(rel),
                Ok(_) => {
                    report
                        .errors
                        .push(format!("{kind} {id:?}: {path:?} is not a file inside the media root"));
                    None
                }
                Err(_) => {
                    report
                        .errors
                        .push(format!("{kind} {id:?}: media file {path:?} not found"));
                    None
                }
            }
        };

        fn canonical<T>(
            report: &mut ValidationReport,
            what: &str,
            id: &str,
            raw: &str,
            lookup: impl Fn(&str) -> Option<T>,
        ) -> Option<T> {
            let found = lookup(raw);
            if found.is_none() {
                report
                    .errors
                    .push(format!("{id:?}: {what} {raw:?} is not a canonical taxonomy value"));
            }
            found
        }

        let exact = |kind, raw: &str| taxonomy.vocabulary(kind).contains(raw).then(|| raw.to_string());
        use crate::taxonomy::VocabularyKind as K;

        let mut speeches = Vec::new();
        for e in &manifest.speeches {
            let path = check_common(&mut report, "speech", &e.id, &e.path);
            let emotion = canonical(&mut report, "emotion", &e.id, &e.emotion, |r| exact(K::EmotionLabel, r));
            let gender = canonical(&mut report, "gender", &e.id, &e.gender, |r| exact(K::Gender, r));
            let timbre = canonical(&mut report, "timbre", &e.id, &e.timbre, |r| exact(K::TimbreTone, r));
            if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                report.errors.push(format!("{:?}: duration_s must be positive", e.id));
            }
            if let (Some(path), Some(emotion), Some(gender), Some(timbre)) = (path, emotion, gender, timbre) {
                speeches.push(ReferenceSpeech {
                    id: e.id.clone(),
                    media_path: path,
                    emotion: EmotionLabel::new_unchecked(emotion),
                    gender: Gender::new_unchecked(gender),
                    timbre: TimbreTone::new_unchecked(timbre),
                    duration_s: e.duration_s,
                });
            }
        }
        let mut faces = Vec::new();
        for e in &manifest.faces {
            let path = check_common(&mut report, "face", &e.id, &e.path);
            let gender = canonical(&mut report, "gender", &e.id, &e.gender, |r| exact(K::Gender, r));
            let age = canonical(&mut report, "age_group", &e.id, &e.age_group, |r| exact(K::AgeGroup, r));
            if let (Some(path), Some(gender), Some(age)) = (path, gender, age) {
                faces.push(ReferenceFace {
                    id: e.id.clone(),
                    media_path: path,
                    gender: Gender::new_unchecked(gender),
                    age_group: AgeGroup::new_unchecked(age),
                });
            }
        }

        if manifest.speeches.is_empty() && manifest.faces.is_empty() {
            report.errors.push("empty index".to_string());
        } else {
            for gender in taxonomy.genders() {
                if !manifest.speeches.iter().any(|s| s.gender == gender.as_str()) {
                    report.errors.push(format!("no reference speech for gender {gender}"));
                }
                if !manifest.faces.iter().any(|f| f.gender == gender.as_str()) {
                    report.errors.push(format!("no reference face for gender {gender}"));
                }
            }
            let missing: Vec<String> = taxonomy
                .emotion_labels()
                .filter(|l| !manifest.speeches.iter().any(|s| s.emotion == l.as_str()))
                .map(|l| l.to_string())
                .collect();
            if !missing.is_empty() {
                report.warnings.push(format!(
                    "{} emotion labels have no reference speech: {}",
                    missing.len(),
                    missing.join(", ")
                ));
            }
        }

        if !report.is_ok() {
            return Err(RetrievalError::ValidationFailed(report));
        }
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        Ok(Self {
            speeches,
            faces,
            age_order: taxonomy.age_groups().collect(),
            media_root: root.expect("checked above"),
            manifest_hash: sha256_hex(&bytes),
        })
    }

    pub fn speeches(&self) -> &[ReferenceSpeech] {
        &self.speeches
    }

    pub fn faces(&self) -> &[ReferenceFace] {
        &self.faces
    }

    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn media_root(&self) -> &Path {
        &self.media_root
    }

    pub fn resolve(&self, media_path: &Path) -> PathBuf {
        self.media_root.join(media_path)
    }

    pub fn read_media(&self, media_path: &Path) -> Result<Vec<u8>, RetrievalError> {
        let path = self.resolve(media_path);
        std::fs::read(&path).map_err(|source| RetrievalError::MediaIo { path, source })
    }

    pub fn speech_mask(
        entry: &ReferenceSpeech,
        emotion: &EmotionLabel,
        gender: &Gender,
        timbre: &TimbreTone,
    ) -> SpeechMatchMask {
        SpeechMatchMask {
            emotion: entry.emotion == *emotion,
            gender: entry.gender == *gender,
            timbre: entry.timbre == *timbre,
        }
    }

    pub fn face_mask(&self, entry: &ReferenceFace, age: &AgeGroup, gender: &Gender) -> FaceMatchMask {
        let rank = |g: &AgeGroup| self.age_order.iter().position(|o| o == g);
        let age_distance = match (rank(age), rank(&entry.age_group)) {
            (Some(a), Some(b)) => a.abs_diff(b) as u32,
            // unknown groups are treated as maximally far
            _ => self.age_order.len() as u32,
        };
        FaceMatchMask {
            gender: entry.gender == *gender,
            age_group: entry.age_group == *age,
            age_distance,
        }
    }

    /// Highest `4·emotion + 2·gender + 1·timbre` score; ties go to the
    /// lexicographically smallest id.
    pub fn select_reference_speech(
        &self,
        emotion: &EmotionLabel,
        gender: &Gender,
        timbre: &TimbreTone,
    ) -> Result<SpeechSelection<'_>, RetrievalError> {
        self.speeches
            .iter()
            .map(|entry| SpeechSelection {
                entry,
                mask: Self::speech_mask(entry, emotion, gender, timbre),
            })
            .max_by(|a, b| {
                a.mask
                    .score()
                    .cmp(&b.mask.score())
                    .then_with(|| b.entry.id.cmp(&a.entry.id))
            })
            .ok_or(RetrievalError::EmptyIndex)
    }

    /// Highest `2·gender + 1·age + 1/(1+d)` score, where `d` is the age-group
    /// distance in table order; ties go to the smallest id.
    pub fn select_reference_face(&self, age: &AgeGroup, gender: &Gender) -> Result<FaceSelection<'_>, RetrievalError> {
        self.faces
            .iter()
            .map(|entry| FaceSelection {
                entry,
                mask: self.face_mask(entry, age, gender),
            })
            .max_by(|a, b| a.mask.cmp_score(b.mask).then_with(|| b.entry.id.cmp(&a.entry.id)))
            .ok_or(RetrievalError::EmptyIndex)
    }
}
