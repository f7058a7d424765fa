//! Label normalization shared by the loader, the pseudo-graph parser and the
//! annotation pipeline.

/// Prefix marking a relation read against its stored direction.
pub const INVERSE_MARKER: char = '~';

/// Normalizes a raw KG label.
///
/// Underscores become spaces, camelCase boundaries (an uppercase letter
/// directly after a lowercase one) are split and the uppercase letter is
/// lowered, whitespace runs collapse to one space and the result is trimmed.
/// Digits never start a new word. Casing is otherwise untouched.
pub fn normalize_label(raw: &str) -> String {
    let mut split = String::with_capacity(raw.len() + 8);
    for c in raw.chars() {
        let c = if c == '_' { ' ' } else { c };
        // Compare against what was emitted so "aBC" splits the same way on
        // every pass.
        if c.is_uppercase() && split.chars().next_back().is_some_and(char::is_lowercase) {
            split.push(' ');
            split.extend(c.to_lowercase());
        } else {
            split.push(c);
        }
    }
    collapse_whitespace(&split)
}

/// Normalization applied to entity labels: underscores and whitespace only.
///
/// Entity names such as `RoPS` or `McLaren` are proper nouns and keep their
/// internal capitals.
pub fn normalize_entity_label(raw: &str) -> String {
    collapse_whitespace(&raw.replace('_', " "))
}

/// Normalizes a relation, keeping a leading inverse marker in place.
pub fn normalize_relation(raw: &str) -> String {
    let trimmed = raw.trim();
    match trimmed.strip_prefix(INVERSE_MARKER) {
        Some(base) => format!("{INVERSE_MARKER}{}", normalize_label(base)),
        None => normalize_label(trimmed),
    }
}

/// Adds the inverse marker if absent, removes it if present.
pub fn toggle_inverse(relation: &str) -> String {
    match relation.strip_prefix(INVERSE_MARKER) {
        Some(base) => base.to_string(),
        None => format!("{INVERSE_MARKER}{relation}"),
    }
}

/// Splits an annotated relation into `(is_inverse, base)`.
pub fn split_inverse(relation: &str) -> (bool, &str) {
    match relation.strip_prefix(INVERSE_MARKER) {
        Some(base) => (true, base),
        None => (false, relation),
    }
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
