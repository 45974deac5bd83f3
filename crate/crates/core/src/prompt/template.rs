use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::domain::{read_json, CatalogError, Domain};

/// Identity-term translations for one locale.
pub type Lexicon = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    pub domain: Domain,
    pub locale: String,
    pub neutral_text: String,
    pub sensitive_text: String,
}

#[derive(Deserialize)]
struct RawTemplate {
    domain: Domain,
    locale: String,
    neutral_text: String,
    sensitive_text: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = PromptError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(raw.domain, raw.locale, raw.neutral_text, raw.sensitive_text)
    }
}

fn placeholder_count(text: &str, name: &str) -> usize {
    segments(text)
        .iter()
        .filter(|s| matches!(s, Segment::Placeholder(p) if *p == name))
        .count()
}

impl PromptTemplate {
    pub fn new(
        domain: Domain,
        locale: impl Into<String>,
        neutral_text: impl Into<String>,
        sensitive_text: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let neutral_text = neutral_text.into();
        let sensitive_text = sensitive_text.into();
        let locale = locale.into();
        for name in ["anchor", "k"] {
            if placeholder_count(&neutral_text, name) != 1 {
                return Err(PromptError::Placeholder {
                    locale,
                    which: "neutral_text",
                    name,
                });
            }
        }
        for name in ["identity", "anchor", "k"] {
            if placeholder_count(&sensitive_text, name) != 1 {
                return Err(PromptError::Placeholder {
                    locale,
                    which: "sensitive_text",
                    name,
                });
            }
        }
        Ok(Self {
            domain,
            locale,
            neutral_text,
            sensitive_text,
        })
    }
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

const PLACEHOLDERS: [&str; 3] = ["identity", "anchor", "k"];

/// Splits a template into literal text and known `{name}` placeholders.
/// Unknown brace groups stay literal.
fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while let Some(open) = text[i..].find('{').map(|o| o + i) {
        let Some(close) = text[open..].find('}').map(|c| c + open) else {
            break;
        };
        let name = &text[open + 1..close];
        if PLACEHOLDERS.contains(&name) {
            if literal_start < open {
                out.push(Segment::Text(&text[literal_start..open]));
            }
            out.push(Segment::Placeholder(name));
            literal_start = close + 1;
            i = close + 1;
        } else {
            i = open + 1;
        }
    }
    if literal_start < text.len() {
        out.push(Segment::Text(&text[literal_start..]));
    }
    out
}

/// Substitutes placeholders and reports the byte span the identity landed in.
pub(crate) fn substitute(
    text: &str,
    anchor: &str,
    k: usize,
    identity: Option<&str>,
) -> (String, Option<Range<usize>>) {
    let k = k.to_string();
    let mut out = String::with_capacity(text.len() + anchor.len() + 32);
    let mut span = None;
    for seg in segments(text) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Placeholder("anchor") => out.push_str(anchor),
            Segment::Placeholder("k") => out.push_str(&k),
            Segment::Placeholder(_) => {
                let id = identity.unwrap_or_default();
                let start = out.len();
                out.push_str(id);
                span = Some(start..out.len());
            }
        }
    }
    (out, span)
}

/// Templates and identity lexicons for every supported locale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub templates: Vec<PromptTemplate>,
    #[serde(default)]
    pub lexicons: BTreeMap<String, Lexicon>,
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        read_json(path)
    }

    pub fn get(&self, locale: &str, domain: Domain) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.locale == locale && t.domain == domain)
            .ok_or_else(|| PromptError::MissingTemplate {
                locale: locale.to_owned(),
                domain,
            })
    }

    pub fn lexicon(&self, locale: &str) -> Option<&Lexicon> {
        self.lexicons.get(locale)
    }
}
