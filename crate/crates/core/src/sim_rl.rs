//! Desk-scale two-turn captioning policy trained with the correction reward.
//!
//! A scene's candidate universe is its true elements plus distractors. Turn
//! one includes each element independently with probability
//! `sigmoid(theta_turn1 / T)`. Turn two visits every element and flips it
//! with probability `sigmoid(theta_add / T)` if it is absent from turn one,
//! or `sigmoid(theta_remove / T)` if present. Only the turn-two log-prob is
//! weighted by the reward; the turn-one distribution is held near the frozen
//! reference policy by a KL term.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{total_reward, RewardConfig};
use crate::scene_graph::{ingest_graph, normalize_phrase, GraphRecord, GraphSource, RelationTriple, SceneGraph};
use crate::similarity::Backend;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Element {
    Object(String),
    Attribute { object: String, attribute: String },
    Relation(RelationTriple),
}

impl Element {
    pub fn object(name: &str) -> Self {
        Element::Object(normalize_phrase(name))
    }

    pub fn attribute(object: &str, attribute: &str) -> Self {
        Element::Attribute {
            object: normalize_phrase(object),
            attribute: normalize_phrase(attribute),
        }
    }

    pub fn relation(subject: &str, predicate: &str, object: &str) -> Self {
        Element::Relation(RelationTriple {
            subject: normalize_phrase(subject),
            predicate: normalize_phrase(predicate),
            object: normalize_phrase(object),
        })
    }

    /// Adds the element to `graph`, together with the objects it mentions.
    fn add_to(&self, graph: &mut SceneGraph) {
        // Names are canonical, so these insertions cannot fail.
        match self {
            Element::Object(o) => {
                let _ = graph.add_object(o);
            }
            Element::Attribute { object, attribute } => {
                let _ = graph.add_object(object);
                let _ = graph.add_attribute(object, attribute);
            }
            Element::Relation(r) => {
                let _ = graph.add_object(&r.subject);
                let _ = graph.add_object(&r.object);
                let _ = graph.add_relation(&r.subject, &r.predicate, &r.object);
            }
        }
    }
}

/// Every element of a graph, objects first, then attributes, then relations.
pub fn graph_elements(graph: &SceneGraph) -> Vec<Element> {
    let mut out: Vec<Element> = graph.object_names().map(|o| Element::Object(o.to_string())).collect();
    out.extend(graph.attribute_pairs().map(|(o, a)| Element::Attribute {
        object: o.to_string(),
        attribute: a.to_string(),
    }));
    out.extend(graph.relations().cloned().map(Element::Relation));
    out
}

/// Element-level F1 of `candidate` against `truth`; 0 when either side is empty.
pub fn element_f1(candidate: &SceneGraph, truth: &SceneGraph) -> f64 {
    let c: BTreeSet<Element> = graph_elements(candidate).into_iter().collect();
    let t: BTreeSet<Element> = graph_elements(truth).into_iter().collect();
    let hits = c.intersection(&t).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let (p, r) = (hits / c.len() as f64, hits / t.len() as f64);
    2.0 * p * r / (p + r)
}

/// A stand-in image: the true scene graph and plausible false elements.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub truth: SceneGraph,
    pub distractors: Vec<Element>,
    universe: Vec<Element>,
}

impl SyntheticScene {
    pub fn new(truth: SceneGraph, distractors: Vec<Element>) -> Result<Self> {
        let mut universe = graph_elements(&truth);
        let mut seen: BTreeSet<Element> = universe.iter().cloned().collect();
        for d in &distractors {
            if let Element::Object(o) = d {
                if truth.contains_object(o) {
                    return Err(Error::Input(format!("distractor object `{o}` is part of the truth")));
                }
            }
            if !seen.insert(d.clone()) {
                return Err(Error::Input(format!("distractor {d:?} duplicates another element")));
            }
            universe.push(d.clone());
        }
        Ok(SyntheticScene {
            truth,
            distractors,
            universe,
        })
    }

    pub fn universe(&self) -> &[Element] {
        &self.universe
    }

    /// Graph of the universe elements selected by `mask`.
    pub fn graph_of(&self, mask: &[bool]) -> SceneGraph {
        let mut graph = SceneGraph::new(GraphSource::Parsed);
        for (e, _) in self.universe.iter().zip(mask).filter(|(_, on)| **on) {
            e.add_to(&mut graph);
        }
        graph
    }
}

/// Wire form of a scene: `{"truth": <graph record>, "distractors": <record>}`.
/// Distractor attributes and relations may refer to truth objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub truth: GraphRecord,
    #[serde(default)]
    pub distractors: GraphRecord,
}

impl SceneRecord {
    pub fn into_scene(&self) -> Result<SyntheticScene> {
        let truth = ingest_graph(&self.truth)?;
        let d = &self.distractors;
        let mut elements: Vec<Element> = d.objects.iter().map(|o| Element::object(o)).collect();
        for (o, attrs) in &d.attributes {
            elements.extend(attrs.iter().map(|a| Element::attribute(o, a)));
        }
        elements.extend(d.relations.iter().map(|[s, p, o]| Element::relation(s, p, o)));
        SyntheticScene::new(truth, elements)
    }

    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let mut distractors = GraphRecord::default();
        for e in &scene.distractors {
            match e {
                Element::Object(o) => distractors.objects.push(o.clone()),
                Element::Attribute { object, attribute } => distractors
                    .attributes
                    .entry(object.clone())
                    .or_default()
                    .push(attribute.clone()),
                Element::Relation(r) => {
                    distractors
                        .relations
                        .push([r.subject.clone(), r.predicate.clone(), r.object.clone()])
                }
            }
        }
        SceneRecord {
            truth: scene.truth.to_record(),
            distractors,
        }
    }
}

const NOUNS: &[&str] = &[
    "apple", "bench", "bicycle", "bird", "boat", "book", "bottle", "bowl", "car", "cat", "chair", "clock", "cup",
    "dog", "fence", "flower", "horse", "kite", "lamp", "laptop", "plate", "sign", "table", "tree", "umbrella", "vase",
];
const ATTRIBUTES: &[&str] = &[
    "black", "blue", "brown", "green", "large", "metal", "old", "orange", "red", "round", "small", "striped", "tall",
    "white", "wooden", "yellow",
];
const PREDICATES: &[&str] = &[
    "behind",
    "beside",
    "holding",
    "in front of",
    "near",
    "next to",
    "on",
    "under",
];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], taken: &[String]) -> &'a str {
    loop {
        let w = pool[rng.random_range(0..pool.len())];
        if !taken.iter().any(|t| t == w) {
            return w;
        }
    }
}

/// Random scenes with `truth_elements` true and `distractor_elements` false
/// elements each. About half the true elements are objects; the rest
/// alternate between attributes and relations. Distractors alternate between
/// novel objects and wrong attributes of true objects.
pub fn generate_scenes(
    count: usize,
    truth_elements: usize,
    distractor_elements: usize,
    seed: u64,
) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth_elements = truth_elements.max(1);
    (0..count)
        .map(|_| {
            let n_objects = truth_elements.div_ceil(2).min(NOUNS.len() / 2);
            let mut objects: Vec<String> = Vec::new();
            for _ in 0..n_objects {
                objects.push(pick(&mut rng, NOUNS, &objects).to_string());
            }
            let mut truth = SceneGraph::new(GraphSource::Ingested);
            for o in &objects {
                truth.add_object(o).unwrap();
            }
            let mut used_attrs: Vec<String> = Vec::new();
            let mut extra = truth_elements - n_objects;
            let mut want_attribute = true;
            let mut guard = 0;
            while extra > 0 && guard < 1000 {
                guard += 1;
                let o = &objects[rng.random_range(0..objects.len())];
                if want_attribute || objects.len() < 2 {
                    let a = pick(&mut rng, ATTRIBUTES, &used_attrs).to_string();
                    truth.add_attribute(o, &a).unwrap();
                    used_attrs.push(a);
                } else {
                    let other = loop {
                        let x = &objects[rng.random_range(0..objects.len())];
                        if x != o {
                            break x;
                        }
                    };
                    let p = PREDICATES[rng.random_range(0..PREDICATES.len())];
                    let before = truth.relation_count();
                    truth.add_relation(o, p, other).unwrap();
                    if truth.relation_count() == before {
                        continue;
                    }
                }
                want_attribute = !want_attribute;
                extra -= 1;
            }

            let mut distractors = Vec::new();
            let mut taken = objects.clone();
            for i in 0..distractor_elements {
                if i % 2 == 0 {
                    let o = pick(&mut rng, NOUNS, &taken).to_string();
                    taken.push(o.clone());
                    distractors.push(Element::object(&o));
                } else {
                    let o = &objects[rng.random_range(0..objects.len())];
                    let a = pick(&mut rng, ATTRIBUTES, &used_attrs).to_string();
                    used_attrs.push(a.clone());
                    distractors.push(Element::attribute(o, &a));
                }
            }
            SyntheticScene::new(truth, distractors).expect("generated scenes are disjoint")
        })
        .collect()
}

/// Logits of one scene's universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBlock {
    pub turn1: Vec<f64>,
    /// Turn-two flip logits for elements absent after turn one.
    pub add: Vec<f64>,
    /// Turn-two flip logits for elements present after turn one.
    pub remove: Vec<f64>,
}

impl PolicyBlock {
    pub fn filled(len: usize, turn1: f64, add: f64, remove: f64) -> Self {
        PolicyBlock {
            turn1: vec![turn1; len],
            add: vec![add; len],
            remove: vec![remove; len],
        }
    }

    pub fn len(&self) -> usize {
        self.turn1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turn1.is_empty()
    }
}

/// One [`PolicyBlock`] per scene. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub blocks: Vec<PolicyBlock>,
}

impl SimPolicy {
    pub fn zeros(scenes: &[SyntheticScene]) -> Self {
        SimPolicy {
            blocks: scenes
                .iter()
                .map(|s| PolicyBlock::filled(s.universe().len(), 0.0, 0.0, 0.0))
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        SimPolicy {
            blocks: self
                .blocks
                .iter()
                .map(|b| PolicyBlock::filled(b.len(), 0.0, 0.0, 0.0))
                .collect(),
        }
    }

    pub fn turn1_params(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(|b| b.turn1.iter())
    }

    pub fn turn2_params(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(|b| b.add.iter().chain(b.remove.iter()))
    }

    /// All logits, block by block: turn one, add, remove.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.turn1.iter().chain(b.add.iter()).chain(b.remove.iter()))
    }

    /// Same order as [`SimPolicy::params`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.turn1.iter_mut().chain(b.add.iter_mut()).chain(b.remove.iter_mut()))
    }

    /// Euclidean distance between the turn-one blocks of two policies.
    pub fn turn1_distance(&self, other: &SimPolicy) -> f64 {
        self.turn1_params()
            .zip(other.turn1_params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn add_scaled(&mut self, other: &SimPolicy, scale: f64) {
        for (p, g) in self.params_mut().zip(other.params()) {
            *p += scale * g;
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bernoulli_log_mass(on: bool, logit: f64) -> f64 {
    if on {
        log_sigmoid(logit)
    } else {
        log_sigmoid(-logit)
    }
}

/// A sampled pair of captions over one scene's universe.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub scene: usize,
    /// Turn-one inclusion per element.
    pub included: Vec<bool>,
    /// Turn-two flip decision per element.
    pub flipped: Vec<bool>,
    pub y1: SceneGraph,
    pub y2: SceneGraph,
    pub logprob1: f64,
    pub logprob2: f64,
}

impl Rollout {
    pub fn final_mask(&self) -> Vec<bool> {
        self.included.iter().zip(&self.flipped).map(|(a, b)| a ^ b).collect()
    }
}

fn turn2_logit(block: &PolicyBlock, i: usize, included: bool) -> f64 {
    if included {
        block.remove[i]
    } else {
        block.add[i]
    }
}

pub fn logprob_turn1(block: &PolicyBlock, included: &[bool], temperature: f64) -> f64 {
    included
        .iter()
        .zip(&block.turn1)
        .map(|(&on, &theta)| bernoulli_log_mass(on, theta / temperature))
        .sum()
}

pub fn logprob_turn2(block: &PolicyBlock, included: &[bool], flipped: &[bool], temperature: f64) -> f64 {
    (0..block.len())
        .map(|i| bernoulli_log_mass(flipped[i], turn2_logit(block, i, included[i]) / temperature))
        .sum()
}

/// Samples both turns for one scene.
pub fn rollout(
    policy: &SimPolicy,
    scenes: &[SyntheticScene],
    scene: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Rollout {
    let block = &policy.blocks[scene];
    let included: Vec<bool> = block
        .turn1
        .iter()
        .map(|&theta| rng.random::<f64>() < sigmoid(theta / temperature))
        .collect();
    let flipped: Vec<bool> = (0..block.len())
        .map(|i| rng.random::<f64>() < sigmoid(turn2_logit(block, i, included[i]) / temperature))
        .collect();
    let s = &scenes[scene];
    let y1 = s.graph_of(&included);
    let final_mask: Vec<bool> = included.iter().zip(&flipped).map(|(a, b)| a ^ b).collect();
    let y2 = s.graph_of(&final_mask);
    Rollout {
        scene,
        logprob1: logprob_turn1(block, &included, temperature),
        logprob2: logprob_turn2(block, &included, &flipped, temperature),
        included,
        flipped,
        y1,
        y2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `log pi(y1) - log pi_ref(y1)` at the sampled turn-one caption.
    Sample,
    /// Exact KL between the factorized turn-one distributions.
    #[default]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Rollouts per scene per step.
    pub batch_size: usize,
    pub rng_seed: u64,
    pub temperature: f64,
    pub kl_estimator: KlEstimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kl_beta: 0.1,
            learning_rate: 0.5,
            steps: 500,
            batch_size: 8,
            rng_seed: 0,
            temperature: 1.0,
            kl_estimator: KlEstimator::Closed,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "kl_beta",
        "learning_rate",
        "steps",
        "batch_size",
        "rng_seed",
        "temperature",
        "kl_estimator",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Config(format!("kl_beta = {} must be >= 0", self.kl_beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate = {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature = {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// Closed-form KL of one scene's turn-one distribution and its gradient
/// with respect to `block.turn1`.
fn closed_kl(block: &PolicyBlock, reference: &PolicyBlock, temperature: f64) -> (f64, Vec<f64>) {
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(block.len());
    for (&theta, &theta_ref) in block.turn1.iter().zip(&reference.turn1) {
        let (z, zr) = (theta / temperature, theta_ref / temperature);
        let p = sigmoid(z);
        kl += p * (log_sigmoid(z) - log_sigmoid(zr)) + (1.0 - p) * (log_sigmoid(-z) - log_sigmoid(-zr));
        grad.push(p * (1.0 - p) * (z - zr) / temperature);
    }
    (kl, grad)
}

/// Batch loss `mean_b [ -R_b log pi(y2_b | y1_b) + beta * KL_b ]`, recomputed
/// from the sampled decisions, and its exact gradient.
pub fn loss_and_gradient(
    policy: &SimPolicy,
    reference: &SimPolicy,
    rollouts: &[Rollout],
    rewards: &[f64],
    cfg: &TrainConfig,
) -> (f64, SimPolicy) {
    let t = cfg.temperature;
    let mut grad = policy.zeros_like();
    let mut loss = 0.0;
    if rollouts.is_empty() {
        return (loss, grad);
    }
    let scale = 1.0 / rollouts.len() as f64;
    for (r, &reward) in rollouts.iter().zip(rewards) {
        let block = &policy.blocks[r.scene];
        let ref_block = &reference.blocks[r.scene];
        let g = &mut grad.blocks[r.scene];

        let lp2 = logprob_turn2(block, &r.included, &r.flipped, t);
        loss += scale * (-reward * lp2);
        for i in 0..block.len() {
            let logit = turn2_logit(block, i, r.included[i]);
            let d = (f64::from(u8::from(r.flipped[i])) - sigmoid(logit / t)) / t;
            let slot = if r.included[i] { &mut g.remove[i] } else { &mut g.add[i] };
            *slot += scale * (-reward) * d;
        }

        if cfg.kl_beta == 0.0 {
            continue;
        }
        match cfg.kl_estimator {
            KlEstimator::Sample => {
                let kl = logprob_turn1(block, &r.included, t) - logprob_turn1(ref_block, &r.included, t);
                loss += scale * cfg.kl_beta * kl;
                for i in 0..block.len() {
                    let d = (f64::from(u8::from(r.included[i])) - sigmoid(block.turn1[i] / t)) / t;
                    g.turn1[i] += scale * cfg.kl_beta * d;
                }
            }
            KlEstimator::Closed => {
                let (kl, kl_grad) = closed_kl(block, ref_block, t);
                loss += scale * cfg.kl_beta * kl;
                for (gi, d) in g.turn1.iter_mut().zip(kl_grad) {
                    *gi += scale * cfg.kl_beta * d;
                }
            }
        }
    }
    (loss, grad)
}

/// Loss only; used by finite-difference checks.
pub fn loss(
    policy: &SimPolicy,
    reference: &SimPolicy,
    rollouts: &[Rollout],
    rewards: &[f64],
    cfg: &TrainConfig,
) -> f64 {
    loss_and_gradient(policy, reference, rollouts, rewards, cfg).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub mean_reward: f64,
    pub f1_turn1: f64,
    pub f1_turn2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: SimPolicy,
    pub reference: SimPolicy,
    pub trace: Vec<TraceRow>,
}

/// Independent RNG stream for one rollout, so results do not depend on
/// scheduling order.
fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from zero logits with the reference frozen at the initial policy.
pub fn train(
    scenes: &[SyntheticScene],
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    backend: &Backend,
) -> Result<TrainOutcome> {
    let initial = SimPolicy::zeros(scenes);
    train_from(scenes, initial.clone(), initial, cfg, reward_cfg, backend)
}

/// Plain gradient descent on [`loss_and_gradient`]; one trace row per step,
/// measured on that step's rollouts before the update.
pub fn train_from(
    scenes: &[SyntheticScene],
    mut policy: SimPolicy,
    reference: SimPolicy,
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    backend: &Backend,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Input("training needs at least one scene".into()));
    }
    cfg.validate()?;
    reward_cfg.validate()?;
    let per_step = scenes.len() * cfg.batch_size;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let samples: Vec<(Rollout, f64, f64, f64)> = (0..per_step)
            .into_par_iter()
            .map(|k| {
                let scene = k / cfg.batch_size;
                let mut rng = rollout_rng(cfg.rng_seed, (step * per_step + k) as u64);
                let r = rollout(&policy, scenes, scene, cfg.temperature, &mut rng);
                let truth = &scenes[scene].truth;
                let reward = total_reward(&r.y1, &r.y2, truth, backend, reward_cfg)?.total;
                let f1_1 = element_f1(&r.y1, truth);
                let f1_2 = element_f1(&r.y2, truth);
                Ok((r, reward, f1_1, f1_2))
            })
            .collect::<Result<_>>()?;

        let n = per_step as f64;
        let row = TraceRow {
            step,
            mean_reward: samples.iter().map(|s| s.1).sum::<f64>() / n,
            f1_turn1: samples.iter().map(|s| s.2).sum::<f64>() / n,
            f1_turn2: samples.iter().map(|s| s.3).sum::<f64>() / n,
        };
        let (rollouts, rewards): (Vec<Rollout>, Vec<f64>) = samples.into_iter().map(|s| (s.0, s.1)).unzip();
        let (loss, grad) = loss_and_gradient(&policy, &reference, &rollouts, &rewards, cfg);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        trace.push(row);
        policy.add_scaled(&grad, -cfg.learning_rate);
        if policy.params().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
    }
    Ok(TrainOutcome {
        policy,
        reference,
        trace,
    })
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,mean_reward,f1_turn1,f1_turn2")?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{}",
            row.step, row.mean_reward, row.f1_turn1, row.f1_turn2
        )?;
    }
    Ok(())
}
