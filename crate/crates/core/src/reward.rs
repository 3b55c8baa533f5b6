//! Correction-based reward `R(y1, y2, y*)`.
//!
//! Elements added or removed between the initial graph `y1` and the corrected
//! graph `y2` are matched against the reference `y*`. Matching additions and
//! removals of non-reference content earn a correctness bonus; additions of
//! content found in neither `y1` nor `y*`, and removals of reference content,
//! are punished. Relations earn bonuses but are never punished.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::SceneGraph;
use crate::similarity::{max_similarity, Backend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Soft-score offset for additions: each added element scores `s - tau_add_soft`.
    pub tau_add_soft: f64,
    /// Soft-score offset for removals: each removed element scores `tau_remove_soft - s`.
    pub tau_remove_soft: f64,
    /// Additions with `s > tau_add_hard` count one hard point.
    pub tau_add_hard: f64,
    /// Removals with `s < tau_remove_hard` count one hard point.
    pub tau_remove_hard: f64,
    /// Similarity at or above which an element counts as present in a set.
    pub membership_threshold: f64,
    /// Penalty per wrong addition or removal.
    pub punish_weight: f64,
    /// Weights of the object, attribute and relation terms.
    pub category_weights: [f64; 3],
    /// Weight of the soft terms; hard terms get `1 - soft_hard_mix`.
    pub soft_hard_mix: f64,
    /// Minimum object similarity for two attribute owners to be compared.
    pub attr_object_anchor_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau_add_soft: 0.5,
            tau_remove_soft: 0.5,
            tau_add_hard: 0.85,
            tau_remove_hard: 0.5,
            membership_threshold: 0.85,
            punish_weight: 1.0,
            category_weights: [1.0, 1.0, 1.0],
            soft_hard_mix: 0.5,
            attr_object_anchor_threshold: 0.85,
        }
    }
}

impl RewardConfig {
    pub const KEYS: &'static [&'static str] = &[
        "tau_add_soft",
        "tau_remove_soft",
        "tau_add_hard",
        "tau_remove_hard",
        "membership_threshold",
        "punish_weight",
        "category_weights",
        "soft_hard_mix",
        "attr_object_anchor_threshold",
    ];

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("tau_add_soft", self.tau_add_soft),
            ("tau_remove_soft", self.tau_remove_soft),
            ("tau_add_hard", self.tau_add_hard),
            ("tau_remove_hard", self.tau_remove_hard),
            ("membership_threshold", self.membership_threshold),
            ("soft_hard_mix", self.soft_hard_mix),
            ("attr_object_anchor_threshold", self.attr_object_anchor_threshold),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{key} = {v} is outside [0, 1]")));
            }
        }
        if !(self.punish_weight >= 0.0 && self.punish_weight.is_finite()) {
            return Err(Error::Config(format!(
                "punish_weight = {} must be >= 0",
                self.punish_weight
            )));
        }
        if self.category_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("category_weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Objects,
    Attributes,
    Relations,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Objects, Category::Attributes, Category::Relations];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edits<T> {
    pub added: Vec<T>,
    pub removed: Vec<T>,
}

impl<T> Default for Edits<T> {
    fn default() -> Self {
        Edits {
            added: Vec::new(),
            removed: Vec::new(),
        }
    }
}

impl<T> Edits<T> {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

/// An attribute edit, anchored to the object carrying it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct AttributeEdit {
    pub object: String,
    pub attribute: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EditSets {
    pub objects: Edits<String>,
    pub attributes: Edits<AttributeEdit>,
    /// Relations as concatenated "subject predicate object" strings.
    pub relations: Edits<String>,
}

impl EditSets {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.attributes.is_empty() && self.relations.is_empty()
    }
}

/// Soft and hard bonus terms of one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Bonus {
    pub soft_add: f64,
    pub soft_remove: f64,
    pub hard_add: f64,
    pub hard_remove: f64,
    pub bonus: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Penalty {
    pub punish_add: usize,
    pub punish_remove: usize,
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryReward {
    #[serde(flatten)]
    pub bonus: Bonus,
    #[serde(flatten)]
    pub penalty: Penalty,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub objects: CategoryReward,
    pub attributes: CategoryReward,
    pub relations: CategoryReward,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn category(&self, category: Category) -> &CategoryReward {
        match category {
            Category::Objects => &self.objects,
            Category::Attributes => &self.attributes,
            Category::Relations => &self.relations,
        }
    }

    /// `sum_c w_c * (bonus_c - penalty_c)`, recomputed from the fields.
    pub fn recompute_total(&self, cfg: &RewardConfig) -> f64 {
        Category::ALL.iter().fold(0.0, |acc, &c| {
            let r = self.category(c);
            acc + cfg.category_weights[c.index()] * (r.bonus.bonus - r.penalty.penalty)
        })
    }
}

/// Set differences between `y1` and `y2`.
///
/// Objects and relations use canonical-form differences. An attribute of
/// `y2` counts as added unless some `y1` object similar to its owner carries
/// a similar attribute; removals are symmetric.
pub fn edit_sets(y1: &SceneGraph, y2: &SceneGraph, backend: &Backend, cfg: &RewardConfig) -> Result<EditSets> {
    let objects = Edits {
        added: y2
            .object_names()
            .filter(|o| !y1.contains_object(o))
            .map(str::to_string)
            .collect(),
        removed: y1
            .object_names()
            .filter(|o| !y2.contains_object(o))
            .map(str::to_string)
            .collect(),
    };

    let attributes = Edits {
        added: unmatched_attributes(y2, y1, backend, cfg)?,
        removed: unmatched_attributes(y1, y2, backend, cfg)?,
    };

    let r1 = y1.relation_strings();
    let r2 = y2.relation_strings();
    let relations = Edits {
        added: r2.iter().filter(|r| !r1.contains(r)).cloned().collect(),
        removed: r1.iter().filter(|r| !r2.contains(r)).cloned().collect(),
    };

    Ok(EditSets {
        objects,
        attributes,
        relations,
    })
}

/// Attributes of `from` with no counterpart in `against`.
fn unmatched_attributes(
    from: &SceneGraph,
    against: &SceneGraph,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<Vec<AttributeEdit>> {
    let mut out = Vec::new();
    for (object, attribute) in from.attribute_pairs() {
        let pool = anchored_attributes(&[against], object, backend, cfg)?;
        let (best, _) = max_similarity(backend, attribute, pool.iter().map(String::as_str))?;
        if pool.is_empty() || best < cfg.membership_threshold {
            out.push(AttributeEdit {
                object: object.to_string(),
                attribute: attribute.to_string(),
            });
        }
    }
    Ok(out)
}

/// Attributes of every object in `graphs` whose similarity to `object`
/// reaches the anchor threshold.
fn anchored_attributes(
    graphs: &[&SceneGraph],
    object: &str,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<Vec<String>> {
    let mut pool = Vec::new();
    for graph in graphs {
        for binding in graph.bindings() {
            if backend.strength(object, &binding.object.canonical)? >= cfg.attr_object_anchor_threshold {
                pool.extend(binding.attributes.iter().cloned());
            }
        }
    }
    Ok(pool)
}

/// Maximum-similarity sets `S_a` (added) and `S_r` (removed) of one
/// category, each element matched against its reference pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilaritySets {
    pub added: Vec<f64>,
    pub removed: Vec<f64>,
}

pub fn similarity_sets(
    edits: &EditSets,
    reference: &SceneGraph,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<[SimilaritySets; 3]> {
    let ref_objects: Vec<&str> = reference.object_names().collect();
    let object_max = |o: &String| -> Result<f64> { Ok(max_similarity(backend, o, ref_objects.iter().copied())?.0) };
    let objects = SimilaritySets {
        added: edits.objects.added.iter().map(object_max).collect::<Result<_>>()?,
        removed: edits.objects.removed.iter().map(object_max).collect::<Result<_>>()?,
    };

    let attribute_max = |e: &AttributeEdit| -> Result<f64> {
        let pool = anchored_attributes(&[reference], &e.object, backend, cfg)?;
        Ok(max_similarity(backend, &e.attribute, pool.iter().map(String::as_str))?.0)
    };
    let attributes = SimilaritySets {
        added: edits
            .attributes
            .added
            .iter()
            .map(attribute_max)
            .collect::<Result<_>>()?,
        removed: edits
            .attributes
            .removed
            .iter()
            .map(attribute_max)
            .collect::<Result<_>>()?,
    };

    let ref_relations = reference.relation_strings();
    let relation_max =
        |r: &String| -> Result<f64> { Ok(max_similarity(backend, r, ref_relations.iter().map(String::as_str))?.0) };
    let relations = SimilaritySets {
        added: edits.relations.added.iter().map(relation_max).collect::<Result<_>>()?,
        removed: edits
            .relations
            .removed
            .iter()
            .map(relation_max)
            .collect::<Result<_>>()?,
    };

    Ok([objects, attributes, relations])
}

fn bonus_from(sets: &SimilaritySets, cfg: &RewardConfig) -> Bonus {
    // fold from +0.0: an empty f64 sum is -0.0
    let soft_add = sets.added.iter().fold(0.0, |acc, s| acc + (s - cfg.tau_add_soft));
    let soft_remove = sets.removed.iter().fold(0.0, |acc, s| acc + (cfg.tau_remove_soft - s));
    let hard_add = sets.added.iter().filter(|&&s| s > cfg.tau_add_hard).count() as f64;
    let hard_remove = sets.removed.iter().filter(|&&s| s < cfg.tau_remove_hard).count() as f64;
    let mix = cfg.soft_hard_mix;
    Bonus {
        soft_add,
        soft_remove,
        hard_add,
        hard_remove,
        bonus: mix * (soft_add + soft_remove) + (1.0 - mix) * (hard_add + hard_remove),
    }
}

/// Correctness bonus per category, in [`Category::ALL`] order.
pub fn correctness_bonus(
    edits: &EditSets,
    reference: &SceneGraph,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<[Bonus; 3]> {
    let sets = similarity_sets(edits, reference, backend, cfg)?;
    Ok(sets.map(|s| bonus_from(&s, cfg)))
}

/// Mistake punishment per category, in [`Category::ALL`] order. The relation
/// entry is always zero.
pub fn mistake_punishment(
    edits: &EditSets,
    y1: &SceneGraph,
    reference: &SceneGraph,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<[Penalty; 3]> {
    let tau = cfg.membership_threshold;

    let known_objects: Vec<&str> = y1.object_names().chain(reference.object_names()).collect();
    let ref_objects: Vec<&str> = reference.object_names().collect();
    let mut objects = Penalty::default();
    for o in &edits.objects.added {
        if max_similarity(backend, o, known_objects.iter().copied())?.0 < tau {
            objects.punish_add += 1;
        }
    }
    for o in &edits.objects.removed {
        if max_similarity(backend, o, ref_objects.iter().copied())?.0 >= tau {
            objects.punish_remove += 1;
        }
    }

    let mut attributes = Penalty::default();
    for e in &edits.attributes.added {
        let pool = anchored_attributes(&[y1, reference], &e.object, backend, cfg)?;
        if max_similarity(backend, &e.attribute, pool.iter().map(String::as_str))?.0 < tau {
            attributes.punish_add += 1;
        }
    }
    for e in &edits.attributes.removed {
        let pool = anchored_attributes(&[reference], &e.object, backend, cfg)?;
        if max_similarity(backend, &e.attribute, pool.iter().map(String::as_str))?.0 >= tau {
            attributes.punish_remove += 1;
        }
    }

    for p in [&mut objects, &mut attributes] {
        p.penalty = cfg.punish_weight * (p.punish_add + p.punish_remove) as f64;
    }
    Ok([objects, attributes, Penalty::default()])
}

/// Full reward breakdown; `total = sum_c w_c * (bonus_c - penalty_c)`.
pub fn total_reward(
    y1: &SceneGraph,
    y2: &SceneGraph,
    reference: &SceneGraph,
    backend: &Backend,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let edits = edit_sets(y1, y2, backend, cfg)?;
    let bonuses = correctness_bonus(&edits, reference, backend, cfg)?;
    let penalties = mistake_punishment(&edits, y1, reference, backend, cfg)?;
    let [objects, attributes, relations] = [0, 1, 2].map(|i| CategoryReward {
        bonus: bonuses[i],
        penalty: penalties[i],
    });
    let mut breakdown = RewardBreakdown {
        objects,
        attributes,
        relations,
        total: 0.0,
    };
    breakdown.total = breakdown.recompute_total(cfg);
    Ok(breakdown)
}

/// Reward built from a caption-level score of each turn,
/// `c2 + c1 + beta * (c2 - c1)`; `beta` rewards improvement in the second turn.
pub fn capture_style_reward(c1: f64, c2: f64, shaping_beta: f64) -> f64 {
    c2 + c1 + shaping_beta * (c2 - c1)
}
