//! Free-text LLM responses to ranked lists.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::domain::{CanonicalTitle, MatchMode, RankedList};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("title is empty after trimming")]
    EmptyTitle,
    #[error("no list items found in response")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsePolicy {
    pub k: usize,
    pub match_mode: MatchMode,
    /// Consulted only in fuzzy mode.
    pub fuzzy_threshold: f64,
}

impl ParsePolicy {
    pub fn exact(k: usize) -> Self {
        Self {
            k,
            match_mode: MatchMode::ExactCanonical,
            fuzzy_threshold: 0.9,
        }
    }

    pub fn fuzzy(k: usize, threshold: f64) -> Self {
        Self {
            k,
            match_mode: MatchMode::Fuzzy,
            fuzzy_threshold: threshold,
        }
    }
}

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' // dashes, curly quotes, bullets, ellipsis
                | '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
                | '\u{2030}'..='\u{205E}'
                | '\u{3001}'..='\u{3003}' | '\u{300C}'..='\u{300F}'
        )
}

fn canonical_form(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase().nfkc().collect();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| is_edge_punctuation(c) || c.is_whitespace())
        .to_owned()
}

/// Compatibility-normalizes, lowercases, collapses whitespace and trims edge
/// punctuation. The original text is kept verbatim.
pub fn canonicalize_title(s: &str) -> Result<CanonicalTitle, ParseError> {
    if s.trim().is_empty() {
        return Err(ParseError::EmptyTitle);
    }
    // Trimming punctuation can expose whitespace that the collapse step has
    // already passed over, so iterate to the fixed point.
    let mut canonical = canonical_form(s);
    loop {
        let next = canonical_form(&canonical);
        if next == canonical {
            break;
        }
        canonical = next;
    }
    if canonical.is_empty() {
        return Err(ParseError::EmptyTitle);
    }
    Ok(CanonicalTitle {
        canonical,
        original: s.to_owned(),
    })
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+\s*[.)]\s+(.+)$").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[-*•]\s+(.+)$").unwrap());
static QUOTED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*(?:"([^"]+)"|“([^”]+)”)\s*$"#).unwrap());
static YEAR_SUFFIX: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*\(\d{4}\)\s*$").unwrap());
static REFUSAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(i\s+can(?:no|'|’)?t|i\s+am\s+(?:not\s+able|unable)|i'm\s+(?:not\s+able|unable)|i\s+won(?:'|’)t|i(?:'|’)m\s+sorry|i\s+am\s+sorry|as\s+an\s+ai)\b",
    )
    .unwrap()
});

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('“', '”'), ('\'', '\''), ('‘', '’')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            if !inner.is_empty() {
                return inner.trim();
            }
        }
    }
    s
}

/// Removes bold markers, surrounding quotes and a trailing bare-year
/// parenthetical, repeatedly, so `**"Dune" (2021)**` reduces to `Dune`.
fn clean_item(raw: &str) -> String {
    let mut s = raw.trim().to_owned();
    loop {
        let mut next = s.replace("**", "").replace("__", "");
        next = strip_quotes(next.trim()).to_owned();
        next = YEAR_SUFFIX.replace(&next, "").trim().to_owned();
        if next == s {
            return s;
        }
        s = next;
    }
}

/// Extracts the recommended titles from a free-text response.
///
/// Numbered lines win over bullet lines, which win over bare quoted lines;
/// only the highest-priority form present is used.
pub fn extract_items(raw: &str, policy: &ParsePolicy) -> Result<RankedList, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let grab = |re: &Regex| -> Vec<String> {
        lines
            .iter()
            .filter_map(|line| re.captures(line))
            .filter_map(|c| c.iter().skip(1).flatten().next().map(|m| m.as_str().to_owned()))
            .collect()
    };
    let mut candidates = grab(&NUMBERED);
    if candidates.is_empty() {
        candidates = grab(&BULLET);
    }
    if candidates.is_empty() {
        candidates = grab(&QUOTED);
    }

    let titles: Vec<CanonicalTitle> = candidates
        .iter()
        .map(|c| clean_item(c))
        .filter_map(|c| canonicalize_title(&c).ok())
        .collect();
    if titles.is_empty() {
        return Err(ParseError::Malformed);
    }
    Ok(RankedList::from_titles(titles, policy.k))
}

/// True when a response without list items reads as the model declining.
pub fn looks_like_refusal(raw: &str) -> bool {
    REFUSAL.is_match(raw)
}

/// Result of a membership query: the matched 1-based rank, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Membership {
    pub rank: Option<usize>,
}

impl Membership {
    pub fn is_member(&self) -> bool {
        self.rank.is_some()
    }
}

fn similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

/// Whether `v` occurs in `list`. Fuzzy mode accepts the best normalized
/// edit similarity at or above the threshold; ties go to the lowest rank.
pub fn membership(v: &CanonicalTitle, list: &RankedList, policy: &ParsePolicy) -> Membership {
    if let Some(rank) = list.rank_of(&v.canonical) {
        return Membership { rank: Some(rank) };
    }
    if policy.match_mode == MatchMode::ExactCanonical {
        return Membership { rank: None };
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, item) in list.items().iter().enumerate() {
        let s = similarity(&v.canonical, &item.canonical);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i + 1));
        }
    }
    Membership {
        rank: best.filter(|(s, _)| *s >= policy.fuzzy_threshold).map(|(_, r)| r),
    }
}

/// Rewrites fuzzy-matched variant items to the canonical form of their
/// neutral counterpart so the metrics can use exact set membership.
///
/// Exact matches claim their neutral items first; each neutral item is
/// matched at most once, which keeps the returned list duplicate-free.
pub fn align(neutral: &RankedList, variant: &RankedList, policy: &ParsePolicy) -> RankedList {
    let mut aligned = variant.clone();
    if policy.match_mode == MatchMode::ExactCanonical {
        return aligned;
    }
    let mut claimed = vec![false; neutral.len()];
    let mut pending = Vec::new();
    for (i, item) in variant.items().iter().enumerate() {
        match neutral.rank_of(&item.canonical) {
            Some(rank) => claimed[rank - 1] = true,
            None => pending.push(i),
        }
    }
    for i in pending {
        let v = &variant.items()[i].canonical;
        let mut best: Option<(f64, usize)> = None;
        for (j, item) in neutral.items().iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let s = similarity(v, &item.canonical);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        if let Some((s, j)) = best {
            if s >= policy.fuzzy_threshold {
                claimed[j] = true;
                aligned.replace_canonical(i, neutral.items()[j].canonical.clone());
            }
        }
    }
    aligned
}
