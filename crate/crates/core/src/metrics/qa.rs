use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Ratio, ReferenceRecord};
use crate::error::{Error, Result};
use crate::scene_graph::is_determiner;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub q: String,
    pub gold: String,
}

impl QaItem {
    pub fn new(q: impl Into<String>, gold: impl Into<String>) -> Self {
        QaItem {
            q: q.into(),
            gold: gold.into(),
        }
    }
}

/// One externally produced answer to a relation question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub image_id: String,
    pub q_index: usize,
    pub answer: String,
}

pub trait AnswerMatcher: Sync {
    fn matches(&self, answer: &str, gold: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool + Sync> AnswerMatcher for F {
    fn matches(&self, answer: &str, gold: &str) -> bool {
        self(answer, gold)
    }
}

/// Equality after [`normalize_answer`].
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedExact;

impl AnswerMatcher for NormalizedExact {
    fn matches(&self, answer: &str, gold: &str) -> bool {
        normalize_answer(answer) == normalize_answer(gold)
    }
}

/// Lowercase, punctuation replaced by spaces, articles dropped, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !is_determiner(w))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaOutcome {
    pub matched: usize,
    pub total: usize,
    /// Per reference, in input order.
    pub per_image: Vec<Ratio>,
}

impl QaOutcome {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

/// Accuracy of supplied answers over all gold questions of `references`.
/// Questions without an answer count as wrong.
pub fn relation_qa_accuracy(
    answers: &[Answer],
    references: &[ReferenceRecord],
    matcher: &dyn AnswerMatcher,
) -> Result<QaOutcome> {
    let index: HashMap<&str, usize> = references
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();

    let mut supplied: BTreeMap<(usize, usize), &str> = BTreeMap::new();
    for a in answers {
        let &ref_idx = index
            .get(a.image_id.as_str())
            .ok_or_else(|| Error::Input(format!("answer for unknown image `{}`", a.image_id)))?;
        if a.q_index >= references[ref_idx].qa_items.len() {
            return Err(Error::Input(format!(
                "answer for unknown question {} of image `{}`",
                a.q_index, a.image_id
            )));
        }
        if supplied.insert((ref_idx, a.q_index), &a.answer).is_some() {
            return Err(Error::Input(format!(
                "duplicate answer for question {} of image `{}`",
                a.q_index, a.image_id
            )));
        }
    }

    let mut per_image = Vec::with_capacity(references.len());
    let (mut matched, mut total) = (0, 0);
    for (i, r) in references.iter().enumerate() {
        let hits = r
            .qa_items
            .iter()
            .enumerate()
            .filter(|(q, item)| supplied.get(&(i, *q)).is_some_and(|a| matcher.matches(a, &item.gold)))
            .count();
        matched += hits;
        total += r.qa_items.len();
        per_image.push(Ratio {
            numerator: hits as f64,
            denominator: r.qa_items.len() as f64,
        });
    }
    Ok(QaOutcome {
        matched,
        total,
        per_image,
    })
}
