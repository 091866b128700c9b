//! Canonical dataset representation.
//!
//! Datasets are JSON-lines files, one record per line:
//!
//! ```text
//! {"text": "play ping pong", "intent": "play_game",
//!  "entities": [{"start": 5, "end": 14, "label": "game_name"}]}
//! ```
//!
//! Offsets count Unicode scalar values, `end` exclusive.

mod bilou;
mod tokenize;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bilou::{bilou_to_spans, spans_to_bilou, spans_to_tag_ids, TagSet, OUTSIDE};
pub use tokenize::{char_slice, tokenize, Token};

use crate::{DietError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub value: String,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &EntitySpan) -> usize {
        self.end
            .min(other.end)
            .saturating_sub(self.start.max(other.start))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<Token>,
    pub intent: String,
    pub entities: Vec<EntitySpan>,
}

/// Non-fatal problems found while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadWarning {
    UnknownField {
        record: usize,
        field: String,
    },
    SnappedSpan {
        record: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    ValueMismatch {
        record: usize,
        given: String,
        actual: String,
    },
}

impl std::fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownField { record, field } => {
                write!(f, "record {record}: unknown field {field:?}")
            }
            Self::SnappedSpan { record, from, to } => {
                write!(
                    f,
                    "record {record}: span {from:?} snapped to token boundaries {to:?}"
                )
            }
            Self::ValueMismatch {
                record,
                given,
                actual,
            } => {
                write!(
                    f,
                    "record {record}: entity value {given:?} differs from text {actual:?}"
                )
            }
        }
    }
}

impl Utterance {
    /// Tokenizes `text` and validates entity spans given as
    /// `(start, end, label)`. Spans not aligned to token boundaries are
    /// widened to the enclosing tokens; `record` is used in diagnostics.
    pub fn from_parts(
        record: usize,
        text: impl Into<String>,
        intent: impl Into<String>,
        spans: &[(usize, usize, String)],
        warnings: &mut Vec<LoadWarning>,
    ) -> Result<Self> {
        let text = text.into();
        let len = text.chars().count();
        let tokens = tokenize(&text);
        let mut entities = Vec::with_capacity(spans.len());
        for (start, end, label) in spans {
            let (start, end) = (*start, *end);
            if start >= end || end > len {
                return Err(DietError::Record {
                    record,
                    message: format!(
                        "entity span ({start}, {end}) out of bounds for text of length {len}"
                    ),
                });
            }
            let covered: Vec<&Token> = tokens
                .iter()
                .filter(|t| t.end > start && t.start < end)
                .collect();
            let (Some(first), Some(last)) = (covered.first(), covered.last()) else {
                return Err(DietError::Record {
                    record,
                    message: format!("entity span ({start}, {end}) covers no token"),
                });
            };
            let (s, e) = (start.min(first.start), end.max(last.end));
            if (s, e) != (start, end) {
                warnings.push(LoadWarning::SnappedSpan {
                    record,
                    from: (start, end),
                    to: (s, e),
                });
            }
            entities.push(EntitySpan {
                start: s,
                end: e,
                label: label.clone(),
                value: char_slice(&text, s, e),
            });
        }
        entities.sort_by_key(|e| (e.start, e.end));
        for pair in entities.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(DietError::Record {
                    record,
                    message: DietError::OverlappingSpans {
                        first: (pair[0].start, pair[0].end),
                        second: (pair[1].start, pair[1].end),
                    }
                    .to_string(),
                });
            }
        }
        Ok(Self {
            text,
            tokens,
            intent: intent.into(),
            entities,
        })
    }

    /// Convenience constructor for well-formed data; panics on invalid spans.
    pub fn new(text: &str, intent: &str, spans: &[(usize, usize, &str)]) -> Self {
        let spans: Vec<_> = spans
            .iter()
            .map(|(s, e, l)| (*s, *e, l.to_string()))
            .collect();
        Self::from_parts(0, text, intent, &spans, &mut Vec::new()).expect("valid utterance")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub utterances: Vec<Utterance>,
    pub intents: Vec<String>,
    pub entity_labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset whose inventories are the sorted labels it uses.
    pub fn new(name: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        let intents: BTreeSet<&str> = utterances.iter().map(|u| u.intent.as_str()).collect();
        let labels: BTreeSet<&str> = utterances
            .iter()
            .flat_map(|u| u.entities.iter().map(|e| e.label.as_str()))
            .collect();
        let intents = intents.into_iter().map(String::from).collect();
        let entity_labels = labels.into_iter().map(String::from).collect();
        Self {
            name: name.into(),
            utterances,
            intents,
            entity_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Same inventories, subset of utterances.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            utterances: indices
                .iter()
                .map(|&i| self.utterances[i].clone())
                .collect(),
            intents: self.intents.clone(),
            entity_labels: self.entity_labels.clone(),
        }
    }

    /// Labels used by this dataset that are missing from the given inventories.
    pub fn unknown_labels(
        &self,
        intents: &[String],
        entity_labels: &[String],
    ) -> (Vec<String>, Vec<String>) {
        let known_i: BTreeSet<&String> = intents.iter().collect();
        let known_e: BTreeSet<&String> = entity_labels.iter().collect();
        let bad_i: BTreeSet<String> = self
            .utterances
            .iter()
            .filter(|u| !known_i.contains(&u.intent))
            .map(|u| u.intent.clone())
            .collect();
        let bad_e: BTreeSet<String> = self
            .utterances
            .iter()
            .flat_map(|u| u.entities.iter())
            .filter(|e| !known_e.contains(&e.label))
            .map(|e| e.label.clone())
            .collect();
        (bad_i.into_iter().collect(), bad_e.into_iter().collect())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawEntity {
    start: usize,
    end: usize,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawRecord {
    text: String,
    intent: String,
    #[serde(default)]
    entities: Vec<RawEntity>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// A parsed dataset plus whatever warnings loading produced.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<LoadWarning>,
}

/// Parses canonical JSON-lines. Blank lines are skipped; records are
/// numbered from 0 in file order.
pub fn parse_dataset(name: &str, reader: impl BufRead) -> Result<Loaded> {
    let mut warnings = Vec::new();
    let mut utterances = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DietError::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = utterances.len();
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| DietError::Parse {
            source_name: name.to_string(),
            line: line_no + 1,
            message: format!("record {record}: {e}"),
        })?;
        for field in raw.extra.keys() {
            warnings.push(LoadWarning::UnknownField {
                record,
                field: field.clone(),
            });
        }
        let spans: Vec<_> = raw
            .entities
            .iter()
            .map(|e| (e.start, e.end, e.label.clone()))
            .collect();
        let utt = Utterance::from_parts(record, raw.text, raw.intent, &spans, &mut warnings)?;
        for e in &raw.entities {
            if let Some(given) = &e.value {
                let actual = char_slice(&utt.text, e.start, e.end);
                if *given != actual {
                    warnings.push(LoadWarning::ValueMismatch {
                        record,
                        given: given.clone(),
                        actual,
                    });
                }
            }
        }
        utterances.push(utt);
    }
    for w in &warnings {
        log::warn!("{name}: {w}");
    }
    Ok(Loaded {
        dataset: Dataset::new(name, utterances),
        warnings,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DietError::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    parse_dataset(&name, BufReader::new(file)).map_err(|e| match e {
        DietError::Parse { line, message, .. } => DietError::Parse {
            source_name: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

/// One JSON line per utterance, with entity values included.
pub fn write_dataset(mut out: impl Write, dataset: &Dataset) -> Result<()> {
    for u in &dataset.utterances {
        let rec = RawRecord {
            text: u.text.clone(),
            intent: u.intent.clone(),
            entities: u
                .entities
                .iter()
                .map(|e| RawEntity {
                    start: e.start,
                    end: e.end,
                    label: e.label.clone(),
                    value: Some(e.value.clone()),
                })
                .collect(),
            extra: BTreeMap::new(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| DietError::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| DietError::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DietError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, dataset)?;
    w.flush().map_err(|e| DietError::io(path, e))
}
