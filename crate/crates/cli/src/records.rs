//! JSONL record shapes accepted by the subcommands.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use caprl_core::metrics::{EvalItem, QaItem, ReferenceRecord};
use caprl_core::scene_graph::{ingest_graph, GraphRecord, Parser, SceneGraph};
use serde::Deserialize;
use serde_json::Value;

/// Non-blank lines with their 1-based line numbers.
pub fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// `{"caption": "...", "id": ...}`; `id` is echoed back when present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    #[serde(default)]
    pub id: Option<Value>,
    pub caption: String,
}

/// A caption string or a graph object.
pub fn graph_from_value(value: &Value, field: &str, parser: &Parser) -> Result<SceneGraph> {
    match value {
        Value::String(caption) => Ok(parser.parse(caption)?.graph),
        Value::Object(_) => {
            let record = GraphRecord::from_value(value).with_context(|| format!("field `{field}`"))?;
            Ok(ingest_graph(&record)?)
        }
        _ => bail!("field `{field}` must be a caption string or a graph object"),
    }
}

fn required<'a>(record: &'a serde_json::Map<String, Value>, field: &str) -> Result<&'a Value> {
    record.get(field).ok_or_else(|| anyhow!("missing field `{field}`"))
}

/// `{"y1", "y2", "gt"}`, each a caption or a graph, plus an optional `id`.
pub struct RewardPair {
    pub id: Option<Value>,
    pub y1: SceneGraph,
    pub y2: SceneGraph,
    pub gt: SceneGraph,
}

pub fn reward_pair(line: &str, parser: &Parser) -> Result<RewardPair> {
    let value: Value = serde_json::from_str(line).context("not valid JSON")?;
    let Value::Object(record) = &value else {
        bail!("record must be a JSON object");
    };
    for key in record.keys() {
        if !matches!(key.as_str(), "id" | "y1" | "y2" | "gt") {
            bail!("unknown field `{key}`");
        }
    }
    Ok(RewardPair {
        id: record.get("id").cloned(),
        y1: graph_from_value(required(record, "y1")?, "y1", parser)?,
        y2: graph_from_value(required(record, "y2")?, "y2", parser)?,
        gt: graph_from_value(required(record, "gt")?, "gt", parser)?,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRecord {
    image_id: String,
    #[serde(default)]
    candidate_caption: Option<String>,
    #[serde(default)]
    candidate_graph: Option<Value>,
    /// Turn-one caption; enables edit statistics against `candidate_caption`.
    #[serde(default)]
    initial_caption: Option<String>,
    gt_graph: Value,
    #[serde(default)]
    expanded_objects: Vec<String>,
    #[serde(default)]
    expanded_attributes: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    qa: Vec<QaItem>,
}

pub fn eval_item(line: &str, parser: &Parser) -> Result<EvalItem> {
    let record: EvalRecord = serde_json::from_str(line).context("not a valid evaluation record")?;
    let candidate = match (&record.candidate_caption, &record.candidate_graph) {
        (Some(_), Some(_)) => bail!("give either `candidate_caption` or `candidate_graph`, not both"),
        (Some(caption), None) => parser.parse(caption)?.graph,
        (None, Some(graph)) => ingest_graph(&GraphRecord::from_value(graph).context("field `candidate_graph`")?)?,
        (None, None) => bail!("missing field `candidate_caption` or `candidate_graph`"),
    };
    let gt = ingest_graph(&GraphRecord::from_value(&record.gt_graph).context("field `gt_graph`")?)?;
    let caption_pair = match (record.initial_caption, record.candidate_caption) {
        (Some(initial), Some(corrected)) => Some((initial, corrected)),
        (Some(_), None) => bail!("`initial_caption` needs `candidate_caption`"),
        _ => None,
    };
    let reference = ReferenceRecord::new(
        record.image_id,
        gt,
        &record.expanded_objects,
        &record.expanded_attributes,
        record.qa,
    )?;
    Ok(EvalItem {
        reference,
        candidate,
        caption_pair,
    })
}
