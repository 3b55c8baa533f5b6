//! Canonical scene graphs: objects, object-anchored attributes and relation
//! triples, plus the JSON record form used for ingestion and output.

mod normalize;
mod parser;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use normalize::{is_determiner, normalize_phrase, singularize, DETERMINERS};
pub use parser::{parse_caption, ParseReport, Parser, ParserConfig};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectNode {
    pub surface: String,
    pub canonical: String,
}

/// Relation endpoints are stored as canonical object names; resolve them with
/// [`SceneGraph::object`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl RelationTriple {
    /// The "subject predicate object" string relations are matched on.
    pub fn concatenated(&self) -> String {
        format!("{} {} {}", self.subject, self.predicate, self.object)
    }
}

impl fmt::Display for RelationTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttributeBinding<'a> {
    pub object: &'a ObjectNode,
    pub attributes: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    Parsed,
    Ingested,
}

/// Objects keyed by canonical form, attribute lists per object, relation set.
///
/// Equality compares canonical content only; surface forms and the source
/// tag are provenance.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    objects: BTreeMap<String, ObjectNode>,
    attributes: BTreeMap<String, Vec<String>>,
    relations: BTreeSet<RelationTriple>,
    source: GraphSource,
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.objects.keys().eq(other.objects.keys())
            && self.attributes == other.attributes
            && self.relations == other.relations
    }
}

impl Eq for SceneGraph {}

impl SceneGraph {
    pub fn new(source: GraphSource) -> Self {
        SceneGraph {
            objects: BTreeMap::new(),
            attributes: BTreeMap::new(),
            relations: BTreeSet::new(),
            source,
        }
    }

    pub fn source(&self) -> GraphSource {
        self.source
    }

    /// Adds an object, merging with an existing object of the same canonical
    /// form. Returns the canonical name.
    pub fn add_object(&mut self, surface: &str) -> Result<String> {
        let canonical = normalize_phrase(surface);
        if canonical.is_empty() {
            return Err(Error::schema(
                "objects",
                format!("`{surface}` normalizes to an empty phrase"),
            ));
        }
        self.objects.entry(canonical.clone()).or_insert_with(|| ObjectNode {
            surface: surface.trim().to_string(),
            canonical: canonical.clone(),
        });
        Ok(canonical)
    }

    /// Binds an attribute to an existing object. Duplicates are ignored.
    pub fn add_attribute(&mut self, object: &str, attribute: &str) -> Result<()> {
        let object = normalize_phrase(object);
        if !self.objects.contains_key(&object) {
            return Err(Error::UndeclaredObject {
                field: "attributes".into(),
                object,
            });
        }
        let attribute = normalize_phrase(attribute);
        if attribute.is_empty() {
            return Err(Error::schema(
                format!("attributes.{object}"),
                "attribute normalizes to an empty phrase",
            ));
        }
        let list = self.attributes.entry(object).or_default();
        if !list.contains(&attribute) {
            list.push(attribute);
        }
        Ok(())
    }

    pub fn add_relation(&mut self, subject: &str, predicate: &str, object: &str) -> Result<()> {
        let subject = normalize_phrase(subject);
        let object = normalize_phrase(object);
        for endpoint in [&subject, &object] {
            if !self.objects.contains_key(endpoint) {
                return Err(Error::UndeclaredObject {
                    field: "relations".into(),
                    object: endpoint.clone(),
                });
            }
        }
        let predicate = normalize_phrase(predicate);
        if predicate.is_empty() {
            return Err(Error::schema("relations", "predicate normalizes to an empty phrase"));
        }
        self.relations.insert(RelationTriple {
            subject,
            predicate,
            object,
        });
        Ok(())
    }

    pub fn object(&self, canonical: &str) -> Option<&ObjectNode> {
        self.objects.get(canonical)
    }

    pub fn contains_object(&self, canonical: &str) -> bool {
        self.objects.contains_key(canonical)
    }

    /// Objects in canonical lexicographic order.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectNode> {
        self.objects.values()
    }

    pub fn object_names(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// Attributes bound to `object`, in insertion order. Empty if none.
    pub fn attributes_of(&self, object: &str) -> &[String] {
        self.attributes.get(object).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn bindings(&self) -> impl Iterator<Item = AttributeBinding<'_>> {
        self.attributes.iter().map(|(name, attributes)| AttributeBinding {
            object: &self.objects[name],
            attributes,
        })
    }

    /// Every (object, attribute) pair, ordered by object then attribute position.
    pub fn attribute_pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attributes
            .iter()
            .flat_map(|(o, attrs)| attrs.iter().map(move |a| (o.as_str(), a.as_str())))
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.values().map(Vec::len).sum()
    }

    pub fn relations(&self) -> impl Iterator<Item = &RelationTriple> {
        self.relations.iter()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_strings(&self) -> Vec<String> {
        self.relations.iter().map(RelationTriple::concatenated).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Union of two graphs; `self`'s surface forms win on merge.
    pub fn merged(&self, other: &SceneGraph) -> SceneGraph {
        let mut out = self.clone();
        for node in other.objects() {
            out.objects
                .entry(node.canonical.clone())
                .or_insert_with(|| node.clone());
        }
        for (o, a) in other.attribute_pairs() {
            let list = out.attributes.entry(o.to_string()).or_default();
            if !list.iter().any(|x| x == a) {
                list.push(a.to_string());
            }
        }
        out.relations.extend(other.relations.iter().cloned());
        out
    }

    pub fn to_record(&self) -> GraphRecord {
        GraphRecord {
            objects: self.objects.keys().cloned().collect(),
            attributes: self.attributes.clone(),
            relations: self
                .relations
                .iter()
                .map(|r| [r.subject.clone(), r.predicate.clone(), r.object.clone()])
                .collect(),
        }
    }
}

/// Wire form of a scene graph:
/// `{"objects": [..], "attributes": {obj: [..]}, "relations": [[s, p, o], ..]}`.
///
/// Strings are stored pre-normalization; [`ingest_graph`] normalizes them.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GraphRecord {
    pub objects: Vec<String>,
    pub attributes: BTreeMap<String, Vec<String>>,
    pub relations: Vec<[String; 3]>,
}

impl GraphRecord {
    /// Validates a JSON value against the record schema, naming the
    /// offending field on failure.
    pub fn from_value(value: &Value) -> Result<GraphRecord> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::schema("<record>", "expected a JSON object"))?;
        for key in map.keys() {
            if !matches!(key.as_str(), "objects" | "attributes" | "relations") {
                return Err(Error::schema(key.clone(), "unknown field"));
            }
        }

        let objects = match map.get("objects") {
            None => return Err(Error::schema("objects", "missing field")),
            Some(v) => string_list(v, "objects")?,
        };

        let mut attributes = BTreeMap::new();
        match map.get("attributes") {
            None | Some(Value::Null) => {}
            Some(Value::Object(entries)) => {
                for (object, list) in entries {
                    attributes.insert(object.clone(), string_list(list, &format!("attributes.{object}"))?);
                }
            }
            Some(_) => return Err(Error::schema("attributes", "expected an object of string lists")),
        }

        let mut relations = Vec::new();
        match map.get("relations") {
            None | Some(Value::Null) => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let field = format!("relations[{i}]");
                    let triple = string_list(item, &field)?;
                    let triple: [String; 3] = triple
                        .try_into()
                        .map_err(|_| Error::schema(field, "expected [subject, predicate, object]"))?;
                    relations.push(triple);
                }
            }
            Some(_) => return Err(Error::schema("relations", "expected an array of triples")),
        }

        Ok(GraphRecord {
            objects,
            attributes,
            relations,
        })
    }

    pub fn from_json(text: &str) -> Result<GraphRecord> {
        GraphRecord::from_value(&serde_json::from_str(text)?)
    }
}

impl<'de> Deserialize<'de> for GraphRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        GraphRecord::from_value(&value).map_err(serde::de::Error::custom)
    }
}

fn string_list(value: &Value, field: &str) -> Result<Vec<String>> {
    let items = value
        .as_array()
        .ok_or_else(|| Error::schema(field, "expected an array of strings"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::schema(format!("{field}[{i}]"), "expected a string"))
        })
        .collect()
}

/// Builds a graph from an externally produced record, applying the same
/// normalization as the caption parser.
pub fn ingest_graph(record: &GraphRecord) -> Result<SceneGraph> {
    let mut graph = SceneGraph::new(GraphSource::Ingested);
    for (i, object) in record.objects.iter().enumerate() {
        graph.add_object(object).map_err(|_| {
            Error::schema(
                format!("objects[{i}]"),
                format!("`{object}` normalizes to an empty phrase"),
            )
        })?;
    }
    for (object, attributes) in &record.attributes {
        let canonical = normalize_phrase(object);
        if !graph.contains_object(&canonical) {
            return Err(Error::UndeclaredObject {
                field: format!("attributes.{object}"),
                object: canonical,
            });
        }
        for (i, attribute) in attributes.iter().enumerate() {
            graph.add_attribute(&canonical, attribute).map_err(|_| {
                Error::schema(
                    format!("attributes.{object}[{i}]"),
                    "attribute normalizes to an empty phrase",
                )
            })?;
        }
    }
    for (i, [subject, predicate, object]) in record.relations.iter().enumerate() {
        let field = format!("relations[{i}]");
        for endpoint in [subject, object] {
            let canonical = normalize_phrase(endpoint);
            if !graph.contains_object(&canonical) {
                return Err(Error::UndeclaredObject {
                    field,
                    object: canonical,
                });
            }
        }
        graph
            .add_relation(subject, predicate, object)
            .map_err(|_| Error::schema(field, "predicate normalizes to an empty phrase"))?;
    }
    Ok(graph)
}
