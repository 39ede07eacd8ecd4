//! Text normalization shared by value matching, BLEU and the tokenizer.
//!
//! Text is lowercased and split on whitespace; every ASCII punctuation
//! character becomes a token of its own. Matching of KB values against
//! responses is exact on these token sequences, so "centre" matches the
//! last token of "city centre" but never the inside of "centrepoint".

/// Lowercase and split `text` into word and punctuation tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_ascii_punctuation() {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Normalized tokens joined by single spaces.
pub fn canonical(text: &str) -> String {
    normalize(text).join(" ")
}

/// Start offsets of every occurrence of `needle` inside `haystack`.
pub fn find_all(haystack: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Whether `needle` occurs in `haystack` on token boundaries.
pub fn contains(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}
