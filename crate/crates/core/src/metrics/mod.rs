//! Refined caption metrics.
//!
//! Object precision is measured against an expanded reference pool so that
//! correct but unmentioned objects are not counted as hallucinations.
//! Attribute precision and recall only compare attributes of matching
//! objects. Relations are scored by question answering accuracy, and the
//! three are combined with a weighted mean.
//!
//! Scores with a zero denominator are absent (`None`), never 0 or 1.

mod edit_stats;
mod qa;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene_graph::{normalize_phrase, GraphSource, SceneGraph};
use crate::similarity::{max_similarity, Backend};

pub use edit_stats::{edit_stats, EditStats};
pub use qa::{normalize_answer, relation_qa_accuracy, Answer, AnswerMatcher, NormalizedExact, QaItem, QaOutcome};

/// Questions per image when relation QA is present.
pub const QA_ITEMS_PER_IMAGE: usize = 5;

/// Object, attribute and relation weights of the aggregate score.
pub const DEFAULT_AGGREGATE_WEIGHTS: AggregateWeights = AggregateWeights {
    objects: 5.0,
    attributes: 5.0,
    relations: 2.0,
};

#[derive(Debug, Clone)]
pub struct ReferenceRecord {
    pub image_id: String,
    pub gt_graph: SceneGraph,
    /// Ground-truth objects and attributes merged with the expanded pool.
    pub expanded: SceneGraph,
    pub qa_items: Vec<QaItem>,
}

impl ReferenceRecord {
    /// Builds a reference, merging the ground-truth graph into the expanded
    /// pool so the pool is always a superset.
    pub fn new(
        image_id: impl Into<String>,
        gt_graph: SceneGraph,
        expanded_objects: &[String],
        expanded_attributes: &BTreeMap<String, Vec<String>>,
        qa_items: Vec<QaItem>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if !qa_items.is_empty() && qa_items.len() != QA_ITEMS_PER_IMAGE {
            return Err(Error::Input(format!(
                "image {image_id}: expected 0 or {QA_ITEMS_PER_IMAGE} QA items, got {}",
                qa_items.len()
            )));
        }
        let mut expanded = SceneGraph::new(GraphSource::Ingested);
        for (i, o) in expanded_objects.iter().enumerate() {
            expanded
                .add_object(o)
                .map_err(|_| Error::schema(format!("expanded_objects[{i}]"), "normalizes to an empty phrase"))?;
        }
        let mut expanded = gt_graph.merged(&expanded);
        for (object, attributes) in expanded_attributes {
            let canonical = normalize_phrase(object);
            if !expanded.contains_object(&canonical) {
                return Err(Error::UndeclaredObject {
                    field: format!("expanded_attributes.{object}"),
                    object: canonical,
                });
            }
            for a in attributes {
                expanded.add_attribute(&canonical, a)?;
            }
        }
        Ok(ReferenceRecord {
            image_id,
            gt_graph,
            expanded,
            qa_items,
        })
    }

    /// A reference whose expanded pool is the ground truth itself.
    pub fn from_gt(image_id: impl Into<String>, gt_graph: SceneGraph) -> Self {
        ReferenceRecord {
            image_id: image_id.into(),
            expanded: gt_graph.clone(),
            gt_graph,
            qa_items: Vec::new(),
        }
    }
}

/// Numerator and denominator of a score, kept for micro-averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Ratio {
    pub numerator: f64,
    pub denominator: f64,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        (self.denominator > 0.0).then(|| self.numerator / self.denominator)
    }
}

pub fn f1(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: Ratio,
    pub recall: Ratio,
}

impl PrecisionRecall {
    pub fn precision(&self) -> Option<f64> {
        self.precision.value()
    }

    pub fn recall(&self) -> Option<f64> {
        self.recall.value()
    }

    pub fn f1(&self) -> Option<f64> {
        f1(self.precision(), self.recall())
    }
}

/// Object precision against the expanded pool and recall of ground-truth
/// objects, both with soft (max-similarity) matching.
pub fn object_scores(
    candidate: &SceneGraph,
    reference: &ReferenceRecord,
    backend: &Backend,
) -> Result<PrecisionRecall> {
    let mut precision = Ratio::default();
    for o in candidate.object_names() {
        precision.numerator += max_similarity(backend, o, reference.expanded.object_names())?.0;
        precision.denominator += 1.0;
    }
    let mut recall = Ratio::default();
    for g in reference.gt_graph.object_names() {
        recall.numerator += max_similarity(backend, g, candidate.object_names())?.0;
        recall.denominator += 1.0;
    }
    Ok(PrecisionRecall { precision, recall })
}

/// One side of the object-anchored attribute score: each object of `from`
/// is anchored to its best match in `to`, and its attributes are compared
/// only with the anchor's, weighted by the anchor similarity.
fn anchored_attribute_ratio(from: &SceneGraph, to: &SceneGraph, backend: &Backend) -> Result<Ratio> {
    let mut ratio = Ratio::default();
    for binding in from.bindings() {
        let (weight, anchor) = max_similarity(backend, &binding.object.canonical, to.object_names())?;
        let anchor_attrs = anchor.map(|a| to.attributes_of(a)).unwrap_or(&[]);
        let mut matched = 0.0;
        for attribute in binding.attributes {
            matched += max_similarity(backend, attribute, anchor_attrs.iter().map(String::as_str))?.0;
        }
        ratio.numerator += weight * matched;
        ratio.denominator += weight * binding.attributes.len() as f64;
    }
    Ok(ratio)
}

/// Attribute precision (candidate anchored against the expanded pool) and
/// recall (ground truth anchored against the candidate).
pub fn attribute_scores(
    candidate: &SceneGraph,
    reference: &ReferenceRecord,
    backend: &Backend,
) -> Result<PrecisionRecall> {
    Ok(PrecisionRecall {
        precision: anchored_attribute_ratio(candidate, &reference.expanded, backend)?,
        recall: anchored_attribute_ratio(&reference.gt_graph, candidate, backend)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateWeights {
    pub objects: f64,
    pub attributes: f64,
    pub relations: f64,
}

impl Default for AggregateWeights {
    fn default() -> Self {
        DEFAULT_AGGREGATE_WEIGHTS
    }
}

impl std::str::FromStr for AggregateWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("weights `{s}` must be three comma-separated numbers")))?;
        match parts[..] {
            [o, a, r] if [o, a, r].iter().all(|w| *w >= 0.0 && w.is_finite()) => Ok(AggregateWeights {
                objects: o,
                attributes: a,
                relations: r,
            }),
            _ => Err(Error::Config(format!(
                "weights `{s}` must be three non-negative comma-separated numbers"
            ))),
        }
    }
}

/// Weighted mean of the present components, re-normalized over their weights.
/// Absent if no component is present (or all present weights are zero).
pub fn aggregate_score(
    object_f1: Option<f64>,
    attribute_f1: Option<f64>,
    relation_qa: Option<f64>,
    weights: AggregateWeights,
) -> Option<f64> {
    let parts = [
        (object_f1, weights.objects),
        (attribute_f1, weights.attributes),
        (relation_qa, weights.relations),
    ];
    let (sum, total_weight) = parts
        .iter()
        .filter_map(|(v, w)| v.map(|v| (v * w, *w)))
        .fold((0.0, 0.0), |(s, t), (vw, w)| (s + vw, t + w));
    (total_weight > 0.0).then(|| sum / total_weight)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub object_precision: Option<f64>,
    pub object_recall: Option<f64>,
    pub object_f1: Option<f64>,
    pub attr_precision: Option<f64>,
    pub attr_recall: Option<f64>,
    pub attr_f1: Option<f64>,
    pub relation_qa_accuracy: Option<f64>,
    pub aggregate: Option<f64>,
    pub edit_stats: Option<EditStats>,
}

/// Per-image input to [`evaluate_corpus`].
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub reference: ReferenceRecord,
    pub candidate: SceneGraph,
    /// Initial/corrected caption texts, when edit statistics are wanted.
    pub caption_pair: Option<(String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageReport {
    pub image_id: String,
    #[serde(flatten)]
    pub report: MetricReport,
    #[serde(skip)]
    objects: PrecisionRecall,
    #[serde(skip)]
    attributes: PrecisionRecall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean of per-image scores.
    #[default]
    Macro,
    /// Scores from numerators and denominators pooled over the corpus.
    Micro,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    #[serde(flatten)]
    pub summary: MetricReport,
    pub averaging: Averaging,
    pub weights: AggregateWeights,
    pub images: Vec<ImageReport>,
    pub qa_matched: usize,
    pub qa_total: usize,
}

fn image_report(item: &EvalItem, backend: &Backend, qa: Option<f64>, weights: AggregateWeights) -> Result<ImageReport> {
    let objects = object_scores(&item.candidate, &item.reference, backend)?;
    let attributes = attribute_scores(&item.candidate, &item.reference, backend)?;
    let report = MetricReport {
        object_precision: objects.precision(),
        object_recall: objects.recall(),
        object_f1: objects.f1(),
        attr_precision: attributes.precision(),
        attr_recall: attributes.recall(),
        attr_f1: attributes.f1(),
        relation_qa_accuracy: qa,
        aggregate: aggregate_score(objects.f1(), attributes.f1(), qa, weights),
        edit_stats: item.caption_pair.as_ref().map(|(a, b)| edit_stats(a, b)),
    };
    Ok(ImageReport {
        image_id: item.reference.image_id.clone(),
        report,
        objects,
        attributes,
    })
}

/// Neumaier-compensated mean of the present values, in input order.
pub fn mean_present<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    let mut n = 0usize;
    for v in values.into_iter().flatten() {
        let t = sum + v;
        compensation += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
        n += 1;
    }
    (n > 0).then(|| (sum + compensation) / n as f64)
}

fn pooled(ratios: impl Iterator<Item = Ratio>) -> Ratio {
    ratios.fold(Ratio::default(), |acc, r| Ratio {
        numerator: acc.numerator + r.numerator,
        denominator: acc.denominator + r.denominator,
    })
}

/// Scores every image (in parallel) and reduces in input order.
///
/// Relation QA is present only when `answers` is given; images without
/// supplied answers count their questions as unmatched.
pub fn evaluate_corpus(
    items: &[EvalItem],
    answers: Option<&[Answer]>,
    matcher: &dyn AnswerMatcher,
    backend: &Backend,
    weights: AggregateWeights,
    averaging: Averaging,
) -> Result<CorpusReport> {
    let references: Vec<ReferenceRecord> = items.iter().map(|i| i.reference.clone()).collect();
    let qa = answers
        .map(|a| relation_qa_accuracy(a, &references, matcher))
        .transpose()?;

    let images: Vec<ImageReport> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let image_qa = qa.as_ref().and_then(|q| q.per_image[i].value());
            image_report(item, backend, image_qa, weights)
        })
        .collect::<Result<_>>()?;

    let summary = match averaging {
        Averaging::Macro => {
            let mean = |f: fn(&MetricReport) -> Option<f64>| mean_present(images.iter().map(|i| f(&i.report)));
            let object_f1 = mean(|r| r.object_f1);
            let attr_f1 = mean(|r| r.attr_f1);
            let qa_acc = qa.as_ref().and_then(|q| q.accuracy());
            MetricReport {
                object_precision: mean(|r| r.object_precision),
                object_recall: mean(|r| r.object_recall),
                object_f1,
                attr_precision: mean(|r| r.attr_precision),
                attr_recall: mean(|r| r.attr_recall),
                attr_f1,
                relation_qa_accuracy: qa_acc,
                aggregate: aggregate_score(object_f1, attr_f1, qa_acc, weights),
                edit_stats: None,
            }
        }
        Averaging::Micro => {
            let objects = PrecisionRecall {
                precision: pooled(images.iter().map(|i| i.objects.precision)),
                recall: pooled(images.iter().map(|i| i.objects.recall)),
            };
            let attributes = PrecisionRecall {
                precision: pooled(images.iter().map(|i| i.attributes.precision)),
                recall: pooled(images.iter().map(|i| i.attributes.recall)),
            };
            let qa_acc = qa.as_ref().and_then(|q| q.accuracy());
            MetricReport {
                object_precision: objects.precision(),
                object_recall: objects.recall(),
                object_f1: objects.f1(),
                attr_precision: attributes.precision(),
                attr_recall: attributes.recall(),
                attr_f1: attributes.f1(),
                relation_qa_accuracy: qa_acc,
                aggregate: aggregate_score(objects.f1(), attributes.f1(), qa_acc, weights),
                edit_stats: None,
            }
        }
    };

    let edit_totals: Vec<EditStats> = images.iter().filter_map(|i| i.report.edit_stats).collect();
    let summary = MetricReport {
        edit_stats: (!edit_totals.is_empty()).then(|| edit_totals.iter().copied().sum()),
        ..summary
    };

    Ok(CorpusReport {
        summary,
        averaging,
        weights,
        images,
        qa_matched: qa.as_ref().map_or(0, |q| q.matched),
        qa_total: qa.as_ref().map_or(0, |q| q.total),
    })
}
