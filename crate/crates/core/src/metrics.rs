//! Automatic evaluation: emotion accuracy and corpus-level Dist-1/Dist-2.
//!
//! Tokens are lowercased whitespace-separated words with leading and trailing
//! non-alphanumeric characters stripped; tokens left empty are dropped.
//! N-grams never span two responses.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{normalize_label, Taxonomy, VocabularyKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted_emotion: String,
    pub gold_emotion: String,
    pub response_text: String,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records")]
    EmptyInput,
    #[error("no response has {0} or more tokens")]
    NoNgrams(usize),
    #[error("prediction file has {pred} records but gold file has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("{file} line {line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("reading {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

/// An exact percentage `100·num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn percent(self) -> f64 {
        100.0 * self.num as f64 / self.den as f64
    }

    /// Percentage in tenths, rounded half-up with integer arithmetic.
    pub fn tenths(self) -> u64 {
        ((2000 * self.num as u128 + self.den as u128) / (2 * self.den as u128)) as u64
    }

    pub fn rounded(self) -> f64 {
        self.tenths() as f64 / 10.0
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn emotion_accuracy_ratio(records: &[EvalRecord], taxonomy: &Taxonomy) -> Result<Ratio, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let vocab = taxonomy.vocabulary(VocabularyKind::EmotionLabel);
    let correct = records
        .iter()
        .filter(|r| {
            let gold = normalize_label(&r.gold_emotion, vocab).ok().map(|n| n.value);
            let pred = normalize_label(&r.predicted_emotion, vocab).ok().map(|n| n.value);
            pred.is_some() && pred == gold
        })
        .count();
    Ok(Ratio {
        num: correct as u64,
        den: records.len() as u64,
    })
}

/// Percentage of records whose normalized prediction equals the gold label.
pub fn emotion_accuracy(records: &[EvalRecord], taxonomy: &Taxonomy) -> Result<f64, MetricsError> {
    emotion_accuracy_ratio(records, taxonomy).map(Ratio::percent)
}

pub fn distinct_n_ratio<S: AsRef<str>>(responses: &[S], n: usize) -> Result<Ratio, MetricsError> {
    assert!(n >= 1, "n-gram order must be positive");
    if responses.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut unique: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0u64;
    for r in responses {
        let tokens = tokenize(r.as_ref());
        for gram in tokens.windows(n) {
            total += 1;
            if !unique.contains(gram) {
                unique.insert(gram.to_vec());
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoNgrams(n));
    }
    Ok(Ratio {
        num: unique.len() as u64,
        den: total,
    })
}

/// Corpus-level distinct n-gram percentage.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64, MetricsError> {
    distinct_n_ratio(responses, n).map(Ratio::percent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub acc: Ratio,
    pub dist1: Ratio,
    pub dist2: Ratio,
}

impl EvalReport {
    pub fn compute(records: &[EvalRecord], taxonomy: &Taxonomy) -> Result<Self, MetricsError> {
        let responses: Vec<&str> = records.iter().map(|r| r.response_text.as_str()).collect();
        Ok(Self {
            records: records.len(),
            acc: emotion_accuracy_ratio(records, taxonomy)?,
            dist1: distinct_n_ratio(&responses, 1)?,
            dist2: distinct_n_ratio(&responses, 2)?,
        })
    }

    /// `{"Acc": .., "Dist-1": .., "Dist-2": ..}` at one decimal.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "Acc": self.acc.rounded(),
            "Dist-1": self.dist1.rounded(),
            "Dist-2": self.dist2.rounded(),
        })
    }

    pub fn to_table(&self) -> String {
        let cell = |r: Ratio| format!("{}.{}", r.tenths() / 10, r.tenths() % 10);
        format!(
            "{:<8}{:<8}{:<8}\n{:<8}{:<8}{:<8}",
            "Acc",
            "Dist-1",
            "Dist-2",
            cell(self.acc),
            cell(self.dist1),
            cell(self.dist2)
        )
        .lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[derive(Debug, Deserialize)]
struct PredLine {
    predicted_emotion: String,
    response_text: String,
}

#[derive(Debug, Deserialize)]
struct GoldLine {
    gold_emotion: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        file: file.clone(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Parse {
                file: file.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Joins a prediction file (`predicted_emotion`, `response_text`) with a gold
/// file (`gold_emotion`) line by line. Gold labels must be in the vocabulary.
pub fn load_records(pred: &Path, gold: &Path, taxonomy: &Taxonomy) -> Result<Vec<EvalRecord>, MetricsError> {
    let preds: Vec<PredLine> = read_jsonl(pred)?;
    let golds: Vec<GoldLine> = read_jsonl(gold)?;
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            pred: preds.len(),
            gold: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let vocab = taxonomy.vocabulary(VocabularyKind::EmotionLabel);
    preds
        .into_iter()
        .zip(golds)
        .enumerate()
        .map(|(i, (p, g))| {
            if let Err(e) = normalize_label(&g.gold_emotion, vocab) {
                return Err(MetricsError::Parse {
                    file: gold.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                });
            }
            Ok(EvalRecord {
                predicted_emotion: p.predicted_emotion,
                gold_emotion: g.gold_emotion,
                response_text: p.response_text,
            })
        })
        .collect()
}

pub fn eval_report(pred: &Path, gold: &Path, taxonomy: &Taxonomy) -> Result<EvalReport, MetricsError> {
    EvalReport::compute(&load_records(pred, gold, taxonomy)?, taxonomy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn tax() -> &'static Taxonomy {
        Taxonomy::canonical()
    }

    fn rec(pred: &str, gold: &str, text: &str) -> EvalRecord {
        EvalRecord {
            predicted_emotion: pred.into(),
            gold_emotion: gold.into(),
            response_text: text.into(),
        }
    }

    /// Independent counter: string keys joined by a separator, sorted map.
    fn oracle_distinct(responses: &[String], n: usize) -> (usize, usize) {
        let mut seen = BTreeMap::new();
        let mut total = 0;
        for r in responses {
            let words: Vec<String> = r
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(|w| w.to_lowercase())
                .collect();
            if words.len() < n {
                continue;
            }
            for i in 0..=words.len() - n {
                *seen.entry(words[i..i + n].join("\u{1}")).or_insert(0) += 1;
                total += 1;
            }
        }
        (seen.len(), total)
    }

    #[test]
    fn accuracy_examples() {
        let mut records = Vec::new();
        for i in 0..1000 {
            records.push(rec(if i < 573 { "Angry" } else { "Sad" }, "Angry", "x"));
        }
        let r = emotion_accuracy_ratio(&records, tax()).unwrap();
        assert_eq!(r.rounded(), 57.3);
        assert_eq!(emotion_accuracy(&records[..573], tax()).unwrap(), 100.0);
        assert_eq!(emotion_accuracy(&[rec("angry", "Angry", "x")], tax()).unwrap(), 100.0);
        assert_eq!(emotion_accuracy(&[rec("???", "Angry", "x")], tax()).unwrap(), 0.0);
        assert!(matches!(emotion_accuracy(&[], tax()), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn distinct_examples() {
        let v = distinct_n(&["a a a"], 1).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(distinct_n(&["the quick brown fox"], 1).unwrap(), 100.0);
        assert!(matches!(distinct_n(&["one"], 2), Err(MetricsError::NoNgrams(2))));
        assert!(matches!(distinct_n::<&str>(&[], 1), Err(MetricsError::EmptyInput)));
        // punctuation and case fold together
        assert_eq!(distinct_n_ratio(&["Hi, hi! HI."], 1).unwrap(), Ratio { num: 1, den: 3 });
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(Ratio { num: 1, den: 3 }.rounded(), 33.3);
        assert_eq!(Ratio { num: 2, den: 3 }.rounded(), 66.7);
        // 0.445 exactly → 44.5
        assert_eq!(Ratio { num: 89, den: 200 }.rounded(), 44.5);
        // 0.0005 exactly → 0.1 (half-up), where binary floats would say 0.05
        assert_eq!(Ratio { num: 1, den: 2000 }.tenths(), 1);
        assert_eq!(Ratio { num: 1, den: 2001 }.tenths(), 0);
    }

    #[test]
    fn report_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred.jsonl");
        let gold = dir.path().join("gold.jsonl");
        std::fs::write(
            &pred,
            "{\"predicted_emotion\":\"angry\",\"response_text\":\"I hate traffic too\"}\n\
             {\"predicted_emotion\":\"Sad\",\"response_text\":\"I hate rain too\"}\n",
        )
        .unwrap();
        std::fs::write(&gold, "{\"gold_emotion\":\"Angry\"}\n{\"gold_emotion\":\"Joyful\"}\n").unwrap();
        let r = eval_report(&pred, &gold, tax()).unwrap();
        // tokens: i hate traffic too / i hate rain too → 5 unique of 8
        assert_eq!(r.acc, Ratio { num: 1, den: 2 });
        assert_eq!(r.dist1, Ratio { num: 5, den: 8 });
        // bigrams: (i hate)(hate traffic)(traffic too)(i hate)(hate rain)(rain too) → 5 of 6
        assert_eq!(r.dist2, Ratio { num: 5, den: 6 });
        assert_eq!(
            r.to_json(),
            serde_json::json!({"Acc": 50.0, "Dist-1": 62.5, "Dist-2": 83.3})
        );
        assert_eq!(r.to_table(), "Acc     Dist-1  Dist-2\n50.0    62.5    83.3");

        std::fs::write(&gold, "{\"gold_emotion\":\"Angry\"}\n").unwrap();
        assert!(matches!(
            eval_report(&pred, &gold, tax()),
            Err(MetricsError::LengthMismatch { .. })
        ));
        std::fs::write(&pred, "").unwrap();
        std::fs::write(&gold, "").unwrap();
        assert!(matches!(
            eval_report(&pred, &gold, tax()),
            Err(MetricsError::EmptyInput)
        ));
        std::fs::write(&pred, "{\"predicted_emotion\":\"Sad\",\"response_text\":\"x\"}\n").unwrap();
        std::fs::write(&gold, "{\"gold_emotion\":\"Bored\"}\n").unwrap();
        assert!(matches!(
            eval_report(&pred, &gold, tax()),
            Err(MetricsError::Parse { line: 1, .. })
        ));
    }

    fn corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..12).prop_map(|w| w.join(" ")),
            1..40,
        )
    }

    proptest! {
        #[test]
        fn matches_oracle(c in corpus(), n in 1usize..3) {
            let (u, t) = oracle_distinct(&c, n);
            match distinct_n_ratio(&c, n) {
                Ok(r) => prop_assert_eq!((r.num, r.den), (u as u64, t as u64)),
                Err(MetricsError::NoNgrams(_)) => prop_assert_eq!(t, 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn bounded_and_permutation_invariant(c in corpus(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            if let Ok(v) = distinct_n(&c, 1) {
                prop_assert!((0.0..=100.0).contains(&v));
                let mut shuffled = c.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(distinct_n(&shuffled, 1).unwrap(), v);
            }
        }

        #[test]
        fn duplication_divides(c in corpus(), k in 1usize..5) {
            if let Ok(r) = distinct_n_ratio(&c, 2) {
                let dup: Vec<String> = (0..k).flat_map(|_| c.clone()).collect();
                let d = distinct_n_ratio(&dup, 2).unwrap();
                prop_assert_eq!(d.num, r.num);
                prop_assert_eq!(d.den, r.den * k as u64);
            }
        }
    }
}
