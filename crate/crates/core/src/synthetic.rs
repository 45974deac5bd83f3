//! A deterministic stand-in recommender for fixtures and smoke tests.
//!
//! Neutral prompts get a fixed list per anchor. A prompt mentioning a
//! configured identity term keeps only the first `overlap` items of that
//! list and fills the rest with titles unique to the prompt, so group
//! similarities are known in advance.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::gateway::{Completion, FnTransport};

#[derive(Debug, Clone)]
pub struct SyntheticRecommender {
    pub k: usize,
    /// Anchor display names the recommender recognizes.
    pub anchors: Vec<String>,
    /// Identity term → number of neutral items kept. When several terms
    /// match, the smallest overlap applies.
    pub overlaps: BTreeMap<String, usize>,
}

fn normalize(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect();
    format!(" {} ", cleaned.split_whitespace().collect::<Vec<_>>().join(" "))
}

impl SyntheticRecommender {
    pub fn new(k: usize, anchors: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            k,
            anchors: anchors.into_iter().map(Into::into).collect(),
            overlaps: BTreeMap::new(),
        }
    }

    pub fn with_overlap(mut self, term: impl Into<String>, overlap: usize) -> Self {
        self.overlaps.insert(term.into(), overlap);
        self
    }

    pub fn neutral_titles(&self, anchor: &str) -> Vec<String> {
        (1..=self.k).map(|i| format!("{anchor} Pick {i}")).collect()
    }

    fn anchor_in(&self, prompt: &str) -> Option<&str> {
        let mut names: Vec<&String> = self.anchors.iter().collect();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        names.into_iter().find(|n| prompt.contains(n.as_str())).map(String::as_str)
    }

    /// Overlap for `prompt`: the smallest among matched terms, `k` if none.
    pub fn overlap_for(&self, prompt: &str) -> usize {
        let text = normalize(prompt);
        self.overlaps
            .iter()
            .filter(|(term, _)| text.contains(&normalize(term)))
            .map(|(_, &o)| o.min(self.k))
            .min()
            .unwrap_or(self.k)
    }

    pub fn titles(&self, prompt: &str) -> Vec<String> {
        let anchor = self.anchor_in(prompt).unwrap_or("Unknown");
        let mut titles = self.neutral_titles(anchor);
        let keep = self.overlap_for(prompt);
        if keep == self.k {
            return titles;
        }
        let tag = &hex::encode(Sha256::digest(prompt.as_bytes()))[..8];
        titles.truncate(keep);
        if tag.as_bytes()[0] % 2 == 1 {
            for pair in titles.chunks_mut(2) {
                pair.reverse();
            }
        }
        titles.extend((keep + 1..=self.k).map(|i| format!("{anchor} Deep Cut {tag} {i}")));
        titles
    }

    /// Numbered-list response text, lightly decorated the way chat models
    /// tend to answer.
    pub fn respond(&self, prompt: &str) -> String {
        let mut out = String::from("Here are some recommendations you might enjoy:\n\n");
        for (i, t) in self.titles(prompt).iter().enumerate() {
            if i % 5 == 0 {
                out.push_str(&format!("{}. **{t}**\n", i + 1));
            } else {
                out.push_str(&format!("{}. {t}\n", i + 1));
            }
        }
        out
    }

    pub fn into_transport(self) -> FnTransport {
        FnTransport::new(move |req| Ok(Completion::Text(self.respond(&req.prompt))))
    }
}
