//! Deterministic caption parser for a constrained English clause grammar:
//!
//! ```text
//! clause  := np-list ( verb prep* np-list | verb prep*
//!                    | copula prep np-list | copula verb prep* np-list
//!                    | copula adj ("and" adj)*
//!                    | prep np-list )?
//!          | "there" copula np-list
//! np-list := np ("and" np)*
//! np      := det? adj ("and" adj)* noun | det? noun
//! ```
//!
//! Sentences split on `. ! ? ; :` and clauses on commas; a clause that fails
//! to parse as a whole is retried as a sequence of clauses split at "and".
//! Clauses that still fail are skipped and counted.

use super::{is_determiner, GraphSource, SceneGraph};
use crate::error::{Error, Result};

const COPULAS: &[&str] = &["is", "are", "was", "were"];

/// Longest entries first so multi-word prepositions win.
const PREPOSITIONS: &[&[&str]] = &[
    &["in", "front", "of"],
    &["on", "top", "of"],
    &["in", "between"],
    &["next", "to"],
    &["close", "to"],
    &["out", "of"],
    &["away", "from"],
    &["across"],
    &["above"],
    &["against"],
    &["along"],
    &["among"],
    &["around"],
    &["at"],
    &["atop"],
    &["behind"],
    &["below"],
    &["beneath"],
    &["beside"],
    &["between"],
    &["by"],
    &["from"],
    &["in"],
    &["inside"],
    &["into"],
    &["near"],
    &["of"],
    &["on"],
    &["onto"],
    &["outside"],
    &["over"],
    &["through"],
    &["toward"],
    &["towards"],
    &["under"],
    &["underneath"],
    &["with"],
];

const VERBS: &[&str] = &[
    "attached",
    "carries",
    "carry",
    "carrying",
    "catch",
    "catches",
    "catching",
    "chase",
    "chases",
    "chasing",
    "contain",
    "containing",
    "contains",
    "covered",
    "covering",
    "covers",
    "eat",
    "eating",
    "eats",
    "facing",
    "filled",
    "grow",
    "growing",
    "grows",
    "hang",
    "hanging",
    "hangs",
    "has",
    "have",
    "having",
    "hold",
    "holding",
    "holds",
    "kick",
    "kicking",
    "kicks",
    "lean",
    "leaning",
    "leans",
    "lie",
    "lies",
    "located",
    "looking",
    "lying",
    "mounted",
    "overlook",
    "overlooking",
    "overlooks",
    "parked",
    "perched",
    "placed",
    "playing",
    "positioned",
    "pull",
    "pulling",
    "pulls",
    "push",
    "pushes",
    "pushing",
    "read",
    "reading",
    "reads",
    "resting",
    "ride",
    "rides",
    "riding",
    "seated",
    "sit",
    "sits",
    "sitting",
    "sleep",
    "sleeping",
    "sleeps",
    "stacked",
    "stand",
    "standing",
    "stands",
    "surround",
    "surrounded",
    "surrounding",
    "surrounds",
    "swim",
    "swimming",
    "swims",
    "throw",
    "throwing",
    "throws",
    "topped",
    "touch",
    "touches",
    "touching",
    "walk",
    "walking",
    "walks",
    "watching",
    "wear",
    "wearing",
    "wears",
];

/// Consulted only to tell "red and blue ball" (adjective coordination) from
/// "cat and dog" (noun coordination).
const ADJECTIVES: &[&str] = &[
    "beige", "big", "black", "blue", "bright", "brown", "clean", "colorful", "dark", "dirty", "empty", "fluffy",
    "glass", "gold", "golden", "gray", "green", "grey", "huge", "large", "leather", "light", "little", "long", "metal",
    "old", "orange", "pink", "plastic", "purple", "red", "round", "shiny", "short", "silver", "small", "square",
    "striped", "tall", "tiny", "white", "wooden", "yellow", "young",
];

/// Function words outside the grammar; a clause containing one is skipped.
const UNSUPPORTED: &[&str] = &[
    "but", "he", "her", "his", "it", "its", "no", "nor", "not", "or", "she", "that", "their", "these", "they", "this",
    "those", "which", "who", "whose",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParserConfig {
    /// Inputs longer than this many characters are rejected.
    pub max_chars: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig { max_chars: 100_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ParseReport {
    pub graph: SceneGraph,
    pub clauses: usize,
    pub skipped_clauses: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Parser {
    config: ParserConfig,
}

/// Parses with the default [`ParserConfig`].
pub fn parse_caption(caption: &str) -> Result<SceneGraph> {
    Parser::default().parse(caption).map(|r| r.graph)
}

impl Parser {
    pub fn new(config: ParserConfig) -> Self {
        Parser { config }
    }

    pub fn parse(&self, caption: &str) -> Result<ParseReport> {
        let len = caption.chars().count();
        if len > self.config.max_chars {
            return Err(Error::CaptionTooLong {
                len,
                limit: self.config.max_chars,
            });
        }
        let mut graph = SceneGraph::new(GraphSource::Parsed);
        let mut clauses = 0;
        let mut skipped = 0;
        for tokens in split_clauses(caption) {
            clauses += 1;
            match parse_sequence(&tokens) {
                Some(parsed) => {
                    for clause in parsed {
                        clause.apply(&mut graph);
                    }
                }
                None => skipped += 1,
            }
        }
        Ok(ParseReport {
            graph,
            clauses,
            skipped_clauses: skipped,
        })
    }
}

/// Lowercased word tokens per clause. Possessive `'s` is dropped and
/// surrounding punctuation trimmed.
fn split_clauses(text: &str) -> Vec<Vec<String>> {
    let mut clauses = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut word = String::new();

    let flush_word = |word: &mut String, current: &mut Vec<String>| {
        let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
        let trimmed = trimmed.strip_suffix("'s").unwrap_or(trimmed);
        if !trimmed.is_empty() {
            current.push(trimmed.to_lowercase());
        }
        word.clear();
    };

    for c in text.chars() {
        if matches!(c, '.' | '!' | '?' | ';' | ':' | ',') {
            flush_word(&mut word, &mut current);
            if !current.is_empty() {
                clauses.push(std::mem::take(&mut current));
            }
        } else if c.is_whitespace() {
            flush_word(&mut word, &mut current);
        } else {
            word.push(c);
        }
    }
    flush_word(&mut word, &mut current);
    if !current.is_empty() {
        clauses.push(current);
    }
    clauses
}

#[derive(Debug, Clone, PartialEq)]
struct NounPhrase {
    noun: String,
    adjectives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Clause {
    Mentions(Vec<NounPhrase>),
    Relation {
        subjects: Vec<NounPhrase>,
        predicate: String,
        objects: Vec<NounPhrase>,
    },
    Predicative {
        subjects: Vec<NounPhrase>,
        adjectives: Vec<String>,
    },
}

impl Clause {
    fn apply(self, graph: &mut SceneGraph) {
        let add_np = |np: &NounPhrase, graph: &mut SceneGraph| -> Option<String> {
            let name = graph.add_object(&np.noun).ok()?;
            for adj in &np.adjectives {
                let _ = graph.add_attribute(&name, adj);
            }
            Some(name)
        };
        match self {
            Clause::Mentions(nps) => {
                for np in &nps {
                    add_np(np, graph);
                }
            }
            Clause::Predicative { subjects, adjectives } => {
                for np in &subjects {
                    if let Some(name) = add_np(np, graph) {
                        for adj in &adjectives {
                            let _ = graph.add_attribute(&name, adj);
                        }
                    }
                }
            }
            Clause::Relation {
                subjects,
                predicate,
                objects,
            } => {
                let subject_names: Vec<_> = subjects.iter().filter_map(|np| add_np(np, graph)).collect();
                let object_names: Vec<_> = objects.iter().filter_map(|np| add_np(np, graph)).collect();
                for s in &subject_names {
                    for o in &object_names {
                        let _ = graph.add_relation(s, &predicate, o);
                    }
                }
            }
        }
    }
}

fn is_copula(t: &str) -> bool {
    COPULAS.contains(&t)
}

fn is_verb(t: &str) -> bool {
    VERBS.binary_search(&t).is_ok()
}

fn is_adjective(t: &str) -> bool {
    ADJECTIVES.binary_search(&t).is_ok()
}

fn preposition_at(tokens: &[String], pos: usize) -> Option<usize> {
    PREPOSITIONS
        .iter()
        .find(|p| p.len() <= tokens.len() - pos && p.iter().zip(&tokens[pos..]).all(|(a, b)| *a == b.as_str()))
        .map(|p| p.len())
}

fn is_function_word(tokens: &[String], pos: usize) -> bool {
    let t = tokens[pos].as_str();
    t == "and"
        || t == "there"
        || is_determiner(t)
        || is_copula(t)
        || UNSUPPORTED.contains(&t)
        || preposition_at(tokens, pos).is_some()
}

/// A verb-lexicon word directly followed by another verb or a copula is read
/// as a noun ("a gold watch lies ..."); it is a verb otherwise.
fn verb_at(tokens: &[String], pos: usize) -> bool {
    is_verb(&tokens[pos])
        && tokens
            .get(pos + 1)
            .is_none_or(|next| !is_verb(next) && !is_copula(next))
}

fn parse_sequence(tokens: &[String]) -> Option<Vec<Clause>> {
    if let Some(clause) = parse_clause(tokens) {
        return Some(vec![clause]);
    }
    for (i, t) in tokens.iter().enumerate() {
        if t == "and" && i > 0 {
            if let Some(head) = parse_clause(&tokens[..i]) {
                if let Some(mut rest) = parse_sequence(&tokens[i + 1..]) {
                    rest.insert(0, head);
                    return Some(rest);
                }
            }
        }
    }
    None
}

fn parse_clause(tokens: &[String]) -> Option<Clause> {
    if tokens.is_empty() {
        return None;
    }
    if tokens[0] == "there" {
        if tokens.len() < 2 || !is_copula(&tokens[1]) {
            return None;
        }
        let (nps, end) = parse_np_list(tokens, 2)?;
        return (end == tokens.len()).then_some(Clause::Mentions(nps));
    }

    let (subjects, mut pos) = parse_np_list(tokens, 0)?;
    if pos == tokens.len() {
        return Some(Clause::Mentions(subjects));
    }

    let mut predicate: Vec<&str> = Vec::new();
    if is_copula(&tokens[pos]) {
        pos += 1;
        if pos == tokens.len() {
            return None;
        }
        if is_verb(&tokens[pos]) {
            predicate.push(&tokens[pos]);
            pos += 1;
            pos = take_prepositions(tokens, pos, &mut predicate);
        } else if preposition_at(tokens, pos).is_some() {
            pos = take_prepositions(tokens, pos, &mut predicate);
        } else {
            let adjectives = parse_adjective_list(tokens, pos)?;
            return Some(Clause::Predicative { subjects, adjectives });
        }
    } else if verb_at(tokens, pos) {
        predicate.push(&tokens[pos]);
        pos += 1;
        pos = take_prepositions(tokens, pos, &mut predicate);
    } else if preposition_at(tokens, pos).is_some() {
        pos = take_prepositions(tokens, pos, &mut predicate);
    } else {
        return None;
    }

    if pos == tokens.len() {
        // Intransitive ("a dog sleeps"): the subjects are still mentioned.
        return is_verb(predicate[0]).then_some(Clause::Mentions(subjects));
    }
    let (objects, end) = parse_np_list(tokens, pos)?;
    if end != tokens.len() {
        return None;
    }
    Some(Clause::Relation {
        subjects,
        predicate: predicate.join(" "),
        objects,
    })
}

fn take_prepositions<'a>(tokens: &'a [String], mut pos: usize, out: &mut Vec<&'a str>) -> usize {
    while pos < tokens.len() {
        match preposition_at(tokens, pos) {
            Some(len) => {
                out.extend(tokens[pos..pos + len].iter().map(String::as_str));
                pos += len;
            }
            None => break,
        }
    }
    pos
}

/// `adj ("and" adj)*` running to the end of the clause.
fn parse_adjective_list(tokens: &[String], mut pos: usize) -> Option<Vec<String>> {
    let mut out = Vec::new();
    loop {
        if pos >= tokens.len() || is_function_word(tokens, pos) {
            return None;
        }
        out.push(tokens[pos].clone());
        pos += 1;
        if pos == tokens.len() {
            return Some(out);
        }
        if tokens[pos] == "and" {
            pos += 1;
        }
    }
}

fn parse_np_list(tokens: &[String], mut pos: usize) -> Option<(Vec<NounPhrase>, usize)> {
    let mut nps = Vec::new();
    loop {
        let (np, next) = parse_np(tokens, pos)?;
        nps.push(np);
        pos = next;
        if pos < tokens.len() && tokens[pos] == "and" && pos + 1 < tokens.len() {
            // Only continue the list if another noun phrase follows; otherwise
            // leave "and" for clause splitting.
            if parse_np(tokens, pos + 1).is_some() {
                pos += 1;
                continue;
            }
        }
        return Some((nps, pos));
    }
}

fn parse_np(tokens: &[String], mut pos: usize) -> Option<(NounPhrase, usize)> {
    if pos < tokens.len() && is_determiner(&tokens[pos]) {
        pos += 1;
    }
    let mut words: Vec<String> = Vec::new();
    while pos < tokens.len() {
        let t = &tokens[pos];
        if t == "and" {
            let prev_is_adj = words.last().is_some_and(|w| is_adjective(w));
            let next_is_content = pos + 1 < tokens.len() && !is_function_word(tokens, pos + 1);
            if prev_is_adj && next_is_content {
                pos += 1;
                continue;
            }
            break;
        }
        if is_function_word(tokens, pos) {
            break;
        }
        if !words.is_empty() && verb_at(tokens, pos) {
            break;
        }
        words.push(t.clone());
        pos += 1;
    }
    let noun = words.pop()?;
    Some((
        NounPhrase {
            noun,
            adjectives: words,
        },
        pos,
    ))
}
