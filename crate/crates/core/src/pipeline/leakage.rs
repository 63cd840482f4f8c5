//! Whole-word concept detection in generated descriptions.
//!
//! Matches the lemma itself, whitespace/hyphen/underscore variants of a
//! multi-word lemma, and regular inflections of its final word (`-s`,
//! `-es`, consonant+`y` → `-ies`, possessive `'s` / `s'`). Derivations
//! ("act" → "acting") and substrings ("cat" in "catalog") are not matches.

use serde::{Deserialize, Serialize};

use crate::catalog::Lemma;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leakage {
    Clean,
    /// The surface form found in the text, as written.
    Leaked(String),
}

impl Leakage {
    pub fn is_clean(&self) -> bool {
        matches!(self, Leakage::Clean)
    }
}

struct Token {
    start: usize,
    end: usize,
    norm: String,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    for (i, c) in text.char_indices() {
        let c = if c == '\u{2019}' || c == '\u{2018}' { '\'' } else { c };
        if is_word_char(c) {
            cur.get_or_insert_with(|| (i, String::new())).1.extend(c.to_lowercase());
        } else if let Some((start, word)) = cur.take() {
            push_token(&mut out, text, start, i, word);
        }
    }
    if let Some((start, word)) = cur.take() {
        push_token(&mut out, text, start, text.len(), word);
    }
    out
}

fn push_token(out: &mut Vec<Token>, text: &str, mut start: usize, end: usize, word: String) {
    let trimmed = word.trim_start_matches('\'');
    if trimmed.is_empty() {
        return;
    }
    // Leading quote marks are not part of the word's span.
    while let Some(c) = text[start..end].chars().next().filter(|c| matches!(c, '\'' | '\u{2018}' | '\u{2019}')) {
        start += c.len_utf8();
    }
    out.push(Token {
        start,
        end,
        norm: trimmed.to_string(),
    });
}

fn strip_possessive(tok: &str) -> &str {
    tok.strip_suffix("'s").or_else(|| tok.strip_suffix('\'')).unwrap_or(tok)
}

fn inflects_to(token: &str, word: &str) -> bool {
    let t = strip_possessive(token);
    if t == word {
        return true;
    }
    if let Some(stem) = t.strip_suffix("es") {
        if stem == word {
            return true;
        }
    }
    if let Some(stem) = t.strip_suffix('s') {
        if stem == word {
            return true;
        }
    }
    if let (Some(stem), Some(wstem)) = (t.strip_suffix("ies"), word.strip_suffix('y')) {
        let consonant_y = wstem.chars().last().is_some_and(|c| !"aeiou".contains(c));
        if consonant_y && stem == wstem {
            return true;
        }
    }
    false
}

pub fn leakage_check(text: &str, concept: &Lemma) -> Leakage {
    let parts: Vec<String> = concept
        .as_str()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|p| !p.is_empty())
        .map(|p| p.replace('\u{2019}', "'"))
        .collect();
    let Some((last, head)) = parts.split_last() else {
        return Leakage::Clean;
    };
    let tokens = tokenize(text);
    let k = parts.len();
    for w in tokens.windows(k) {
        let head_ok = w.iter().zip(head).all(|(t, p)| &t.norm == p);
        if head_ok && inflects_to(&w[k - 1].norm, last) {
            let span = &text[w[0].start..w[k - 1].end];
            return Leakage::Leaked(span.to_string());
        }
    }
    Leakage::Clean
}
