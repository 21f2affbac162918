//! Shared text utilities: variable normalization, tokenization, the stopword
//! list, and sentence splitting.
//!
//! The stopword list is shared between retrieval-time context compression and
//! the coverage signal so both agree on what counts as a content term.

use std::collections::BTreeSet;

/// Version tag of the shipped lexicons (stopwords, pronouns, quantifiers,
/// comparatives). Bump whenever any list changes.
pub const LEXICON_VERSION: &str = "lex-2026.1";

/// English function words ignored when matching query terms.
pub const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "shall",
    "may",
    "might",
    "must",
    "also",
];

/// Personal and possessive pronouns.
pub const PRONOUNS: &[&str] = &[
    "he",
    "she",
    "it",
    "they",
    "him",
    "her",
    "them",
    "his",
    "hers",
    "its",
    "their",
    "theirs",
    "himself",
    "herself",
    "itself",
    "themselves",
];

const ARTICLES: &[&str] = &["a", "an", "the"];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

pub fn is_pronoun(token: &str) -> bool {
    PRONOUNS.contains(&token)
}

/// Canonical form of a variable or node name: lowercase, trimmed, inner
/// whitespace collapsed, leading articles removed. Idempotent.
pub fn normalize_variable(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    while words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    words.join(" ")
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// A token together with its character offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Alphanumeric tokens with `[start, end)` character (not byte) offsets.
pub fn tokenize_spanned(text: &str) -> Vec<SpannedToken> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut idx = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = idx;
            }
            current.push(ch);
        } else if !current.is_empty() {
            out.push(SpannedToken {
                text: std::mem::take(&mut current),
                start,
                end: idx,
            });
        }
        idx += 1;
    }
    if !current.is_empty() {
        out.push(SpannedToken {
            text: current,
            start,
            end: idx,
        });
    }
    out
}

/// Non-stopword lowercase terms, deduplicated.
pub fn content_terms(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Whitespace token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars()
        .skip(start)
        .take(end.saturating_sub(start))
        .collect()
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "vs", "etc", "e.g", "i.e", "inc", "ltd", "co", "no",
    "jr", "sr", "u.s", "u.k", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
    "oct", "nov", "dec", "fig", "approx", "dept", "corp",
];

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our",
    "their",
];

/// Head noun of a query: the first content word after a determiner, else
/// the first content word that is not a pronoun.
pub fn query_head(query: &str) -> Option<String> {
    let tokens = tokenize(query);
    let content =
        |t: &String| !is_stopword(t) && !is_pronoun(t) && t.chars().any(char::is_alphabetic);
    tokens
        .windows(2)
        .find(|w| DETERMINERS.contains(&w[0].as_str()) && content(&w[1]))
        .map(|w| w[1].clone())
        .or_else(|| tokens.iter().find(|t| content(t)).cloned())
}

/// Split text into sentences.
///
/// A boundary is `.`, `?` or `!` followed by whitespace and an uppercase
/// letter, unless the word ending in `.` is a known abbreviation. Returned
/// sentences are trimmed verbatim substrings of `text`.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut seg_start = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let (byte_pos, ch) = chars[i];
        if matches!(ch, '.' | '?' | '!') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '?' | '!' | '"' | '\'' | ')') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let boundary = k > j && k < chars.len() && chars[k].1.is_uppercase();
            if boundary && !(ch == '.' && ends_with_abbreviation(&text[seg_start..byte_pos])) {
                let end_byte = if j < chars.len() {
                    chars[j].0
                } else {
                    text.len()
                };
                let s = text[seg_start..end_byte].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                seg_start = chars[k].0;
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    let tail = text[seg_start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn ends_with_abbreviation(before: &str) -> bool {
    let last = before
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .to_lowercase();
    if last.is_empty() {
        return false;
    }
    // single capital initials such as "J. Smith"
    if last.chars().count() == 1 && last.chars().all(|c| c.is_alphabetic()) {
        return true;
    }
    ABBREVIATIONS.contains(&last.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_articles_and_whitespace() {
        assert_eq!(
            normalize_variable("  The   Years of  Service "),
            "years of service"
        );
        assert_eq!(normalize_variable("a the pension"), "pension");
        assert_eq!(normalize_variable("the"), "the");
        assert_eq!(normalize_variable(""), "");
    }

    #[test]
    fn tokenize_spanned_uses_char_offsets() {
        let toks = tokenize_spanned("Björk sang.");
        assert_eq!(toks[0].text, "Björk");
        assert_eq!((toks[0].start, toks[0].end), (0, 5));
        assert_eq!((toks[1].start, toks[1].end), (6, 10));
    }

    #[test]
    fn sentences_respect_abbreviations() {
        let s =
            split_sentences("Dr. Smith arrived. He left at 5 p.m. today! Was it Mr. Jones? Yes.");
        assert_eq!(
            s,
            vec![
                "Dr. Smith arrived.",
                "He left at 5 p.m. today!",
                "Was it Mr. Jones?",
                "Yes."
            ]
        );
    }

    #[test]
    fn sentence_needs_capital_after_boundary() {
        assert_eq!(
            split_sentences("version 2.0 is out. it works"),
            vec!["version 2.0 is out. it works"]
        );
    }

    #[test]
    fn content_terms_drop_stopwords() {
        let t = content_terms("Is the statutory redundancy pay due?");
        let v: Vec<_> = t.into_iter().collect();
        assert_eq!(v, vec!["due", "pay", "redundancy", "statutory"]);
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ a-zA-Z]{0,30}") {
            let once = normalize_variable(&s);
            proptest::prop_assert_eq!(normalize_variable(&once), once.clone());
        }

        #[test]
        fn sentences_are_verbatim_substrings(s in "[A-Za-z .?!]{0,80}") {
            for sent in split_sentences(&s) {
                proptest::prop_assert!(s.contains(sent));
            }
        }
    }

    #[test]
    fn head_noun() {
        assert_eq!(
            query_head("How did the album sell?").as_deref(),
            Some("album")
        );
        assert_eq!(query_head("Was it good?").as_deref(), Some("good"));
        assert_eq!(query_head("Is it?"), None);
    }
}
