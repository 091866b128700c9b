use serde::{Deserialize, Serialize};

use super::{char_slice, EntitySpan, Token, Utterance};
use crate::{DietError, Result};

pub const OUTSIDE: &str = "O";

/// The BILOU expansion of an entity inventory: `O` first, then
/// `B-`, `I-`, `L-`, `U-` for every label in inventory order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    labels: Vec<String>,
    tags: Vec<String>,
}

impl TagSet {
    pub fn new(entity_labels: &[String]) -> Self {
        let mut tags = vec![OUTSIDE.to_string()];
        for l in entity_labels {
            for p in ["B", "I", "L", "U"] {
                tags.push(format!("{p}-{l}"));
            }
        }
        Self {
            labels: entity_labels.to_vec(),
            tags,
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tag(&self, index: usize) -> &str {
        &self.tags[index]
    }

    pub fn index(&self, tag: &str) -> Result<usize> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| DietError::UnknownTag(tag.to_string()))
    }
}

fn parse_tag(tag: &str) -> Option<(char, &str)> {
    let mut chars = tag.chars();
    let prefix = chars.next()?;
    let rest = chars.as_str().strip_prefix('-')?;
    if matches!(prefix, 'B' | 'I' | 'L' | 'U') && !rest.is_empty() {
        Some((prefix, rest))
    } else {
        None
    }
}

/// Tags for every token of `utterance` under the BILOU scheme.
pub fn spans_to_bilou(utterance: &Utterance) -> Result<Vec<String>> {
    let mut tags = vec![OUTSIDE.to_string(); utterance.tokens.len()];
    let mut spans: Vec<&EntitySpan> = utterance.entities.iter().collect();
    spans.sort_by_key(|s| (s.start, s.end));
    for pair in spans.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(DietError::OverlappingSpans {
                first: (pair[0].start, pair[0].end),
                second: (pair[1].start, pair[1].end),
            });
        }
    }
    for span in spans {
        let covered: Vec<usize> = utterance
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start >= span.start && t.end <= span.end)
            .map(|(i, _)| i)
            .collect();
        let l = &span.label;
        match covered.as_slice() {
            [] => {
                return Err(DietError::Invalid(format!(
                    "span ({}, {}) is not aligned to any token",
                    span.start, span.end
                )))
            }
            [only] => tags[*only] = format!("U-{l}"),
            [first, .., last] => {
                tags[*first] = format!("B-{l}");
                for &i in &covered[1..covered.len() - 1] {
                    tags[i] = format!("I-{l}");
                }
                tags[*last] = format!("L-{l}");
            }
        }
    }
    Ok(tags)
}

/// Tag indices into `tagset` for every token of `utterance`.
pub fn spans_to_tag_ids(utterance: &Utterance, tagset: &TagSet) -> Result<Vec<usize>> {
    spans_to_bilou(utterance)?
        .iter()
        .map(|t| tagset.index(t))
        .collect()
}

/// Decodes tag runs into spans. Never fails: a run opened by `I-` or `L-`
/// is treated as if it began with `B-`, and a run that is not closed by
/// `L-` ends at its last contiguous same-label tag. Unparseable tags count
/// as `O`.
pub fn bilou_to_spans<S: AsRef<str>>(text: &str, tokens: &[Token], tags: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize, &str)> = None;
    let close = |run: Option<(usize, usize, &str)>, spans: &mut Vec<EntitySpan>| {
        if let Some((first, last, label)) = run {
            let (start, end) = (tokens[first].start, tokens[last].end);
            spans.push(EntitySpan {
                start,
                end,
                label: label.to_string(),
                value: char_slice(text, start, end),
            });
        }
    };
    for (i, tag) in tags.iter().enumerate().take(tokens.len()) {
        match parse_tag(tag.as_ref()) {
            None => close(open.take(), &mut spans),
            Some(('U', label)) => {
                close(open.take(), &mut spans);
                close(Some((i, i, label)), &mut spans);
            }
            Some(('B', label)) => {
                close(open.take(), &mut spans);
                open = Some((i, i, label));
            }
            Some(('I', label)) => match open {
                Some((first, _, l)) if l == label => open = Some((first, i, l)),
                _ => {
                    close(open.take(), &mut spans);
                    open = Some((i, i, label));
                }
            },
            Some((_, label)) => match open.take() {
                Some((first, _, l)) if l == label => close(Some((first, i, l)), &mut spans),
                other => {
                    close(other, &mut spans);
                    close(Some((i, i, label)), &mut spans);
                }
            },
        }
    }
    close(open, &mut spans);
    spans
}
