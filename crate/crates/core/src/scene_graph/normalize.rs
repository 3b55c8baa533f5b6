//! Phrase canonicalization shared by parsing, ingestion and every set
//! operation downstream.

pub const DETERMINERS: [&str; 3] = ["a", "an", "the"];

/// Words ending in `s` that are already singular, or plural-only nouns that
/// have no useful singular.
const INVARIANT_NOUNS: &[&str] = &[
    "always", "bus", "canvas", "chess", "class", "clothes", "dress", "gas", "glass", "grass", "has", "his", "is",
    "its", "jeans", "lens", "moss", "news", "octopus", "overalls", "pants", "scissors", "series", "shorts", "species",
    "status", "tennis", "this", "trousers", "us", "was", "yes",
];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("buses", "bus"),
    ("calves", "calf"),
    ("children", "child"),
    ("feet", "foot"),
    ("geese", "goose"),
    ("halves", "half"),
    ("heroes", "hero"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("loaves", "loaf"),
    ("men", "man"),
    ("menus", "menu"),
    ("mice", "mouse"),
    ("oxen", "ox"),
    ("people", "person"),
    ("potatoes", "potato"),
    ("shelves", "shelf"),
    ("shoes", "shoe"),
    ("skis", "ski"),
    ("taxis", "taxi"),
    ("teeth", "tooth"),
    ("toes", "toe"),
    ("tomatoes", "tomato"),
    ("wives", "wife"),
    ("wolves", "wolf"),
    ("women", "woman"),
];

pub fn is_determiner(word: &str) -> bool {
    DETERMINERS.contains(&word)
}

/// Lowercases, drops determiners, collapses whitespace and singularizes the
/// head (last) word.
///
/// The result is a fixed point: `normalize_phrase(&normalize_phrase(x)) ==
/// normalize_phrase(x)` for every input.
pub fn normalize_phrase(phrase: &str) -> String {
    let lowered = phrase.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().filter(|w| !is_determiner(w)).collect();
    let head;
    if let Some(last) = words.last_mut() {
        head = singularize(last);
        *last = &head;
    }
    words.join(" ")
}

/// Applies the plural rules until the word stops changing. Iterating to a
/// fixed point is what makes `normalize_phrase` idempotent.
pub fn singularize(word: &str) -> String {
    let mut current = word.to_string();
    for _ in 0..8 {
        match singularize_step(&current) {
            Some(next) if !next.is_empty() && !is_determiner(&next) && next != current => {
                current = next;
            }
            _ => break,
        }
    }
    current
}

fn singularize_step(word: &str) -> Option<String> {
    if INVARIANT_NOUNS.contains(&word) {
        return None;
    }
    if let Some((_, singular)) = IRREGULAR_PLURALS.iter().find(|(plural, _)| *plural == word) {
        return Some((*singular).to_string());
    }
    if word.chars().count() <= 3 {
        return None;
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return None;
    }
    if word.chars().count() > 4 {
        if let Some(stem) = word.strip_suffix("ies") {
            return Some(format!("{stem}y"));
        }
    }
    for suffix in ["sses", "ches", "shes", "xes", "zzes"] {
        if word.ends_with(suffix) {
            return Some(word[..word.len() - 2].to_string());
        }
    }
    word.strip_suffix('s').map(str::to_string)
}
