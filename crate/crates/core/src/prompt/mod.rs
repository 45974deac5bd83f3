//! Prompt matrix: neutral, sensitive, intersectional, personality-conditioned
//! and perturbed prompt variants for every anchor.

mod perturb;
mod template;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{
    Anchor, AnchorCatalog, Attribute, AttributeCatalog, AuditConfig, Domain, PersonalityCatalog,
    PerturbationKind, PerturbationSpec,
};

pub use perturb::perturb_typo;
pub use template::{Lexicon, PromptTemplate, TemplateSet};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template for locale `{locale}`: {which} must contain {{{name}}} exactly once")]
    Placeholder {
        locale: String,
        which: &'static str,
        name: &'static str,
    },
    #[error("no template for locale `{locale}` and domain `{domain}`")]
    MissingTemplate { locale: String, domain: Domain },
    #[error("no lexicon for locale `{0}`")]
    MissingLexicon(String),
    #[error("lexicon for `{locale}` has no entry for `{term}`")]
    UnmappedTerm { locale: String, term: String },
    #[error("invalid identity clause: {0}")]
    InvalidClause(String),
    #[error("invalid identity span: {0}")]
    Span(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("unit for `{0}` already holds localized variants")]
    AlreadyLocalized(String),
    #[error("anchor catalog {path}: {message}")]
    Catalog { path: String, message: String },
    #[error("matrix file: {0}")]
    Matrix(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The identity injected into a sensitive prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IdentityClause {
    /// Kept sorted in canonical attribute order.
    pub attribute_parts: Vec<AttributePart>,
    pub personality: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributePart {
    pub attribute: Attribute,
    pub value: String,
}

impl IdentityClause {
    pub fn new(
        parts: impl IntoIterator<Item = (Attribute, String)>,
        personality: Option<String>,
    ) -> Result<Self, PromptError> {
        let mut attribute_parts: Vec<AttributePart> = parts
            .into_iter()
            .map(|(attribute, value)| AttributePart { attribute, value })
            .collect();
        attribute_parts.sort_by_key(|p| p.attribute);
        if attribute_parts.windows(2).any(|w| w[0].attribute == w[1].attribute) {
            return Err(PromptError::InvalidClause("attribute repeated".into()));
        }
        if attribute_parts.is_empty() && personality.is_none() {
            return Err(PromptError::InvalidClause("clause needs a part or a personality".into()));
        }
        Ok(Self {
            attribute_parts,
            personality,
        })
    }

    pub fn single(attribute: Attribute, value: impl Into<String>) -> Self {
        Self::new([(attribute, value.into())], None).expect("single part is valid")
    }

    pub fn personality(trait_: impl Into<String>) -> Self {
        Self::new([], Some(trait_.into())).expect("personality clause is valid")
    }

    /// Identity terms in rendering order.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.personality
            .iter()
            .map(String::as_str)
            .chain(self.attribute_parts.iter().map(|p| p.value.as_str()))
    }

    fn translated(&self, locale: &str, lexicon: &Lexicon) -> Result<String, PromptError> {
        let words = self
            .terms()
            .map(|t| {
                lexicon.get(t).map(String::as_str).ok_or_else(|| PromptError::UnmappedTerm {
                    locale: locale.to_owned(),
                    term: t.to_owned(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }
}

/// Joins a clause as `personality religion race continent country age
/// physical gender occupation`, skipping absent parts.
pub fn render_identity_clause(clause: &IdentityClause) -> String {
    clause.terms().collect::<Vec<_>>().join(" ")
}

/// A perturbation applied to a variant prompt.
#[derive(Debug, Clone)]
pub enum Perturbation {
    None,
    Typo { rate: f64, seed: u64 },
    Locale(String),
}

impl Perturbation {
    pub fn from_spec(spec: &PerturbationSpec) -> Result<Self, PromptError> {
        match spec.kind {
            PerturbationKind::Typo => spec
                .rate
                .map(|rate| Perturbation::Typo { rate, seed: spec.seed })
                .ok_or_else(|| PromptError::InvalidPerturbation("typo needs a rate".into())),
            PerturbationKind::Locale => spec
                .locale
                .clone()
                .map(Perturbation::Locale)
                .ok_or_else(|| PromptError::InvalidPerturbation("locale perturbation needs a locale".into())),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Perturbation::None)
    }

    fn rank(&self) -> u8 {
        match self {
            Perturbation::None => 0,
            Perturbation::Typo { .. } => 1,
            Perturbation::Locale(_) => 2,
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            Perturbation::Typo { rate, seed } => write!(f, "typo:{rate}:{seed}"),
            Perturbation::Locale(l) => write!(f, "locale:{l}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::InvalidPerturbation(format!("unrecognised tag `{s}`"));
        if s == "none" {
            return Ok(Perturbation::None);
        }
        if let Some(l) = s.strip_prefix("locale:") {
            return Ok(Perturbation::Locale(l.to_owned()));
        }
        let rest = s.strip_prefix("typo:").ok_or_else(bad)?;
        let (rate, seed) = rest.split_once(':').ok_or_else(bad)?;
        Ok(Perturbation::Typo {
            rate: rate.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        })
    }
}

impl PartialEq for Perturbation {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Perturbation {}

impl PartialOrd for Perturbation {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Perturbation {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Perturbation::Typo { rate: a, seed: s }, Perturbation::Typo { rate: b, seed: t }) => {
                a.total_cmp(b).then(s.cmp(t))
            }
            (Perturbation::Locale(a), Perturbation::Locale(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl std::hash::Hash for Perturbation {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_string().hash(state);
    }
}

impl Serialize for Perturbation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Perturbation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariantKey {
    #[serde(flatten)]
    pub clause: IdentityClause,
    pub perturbation: Perturbation,
    pub locale: String,
}

/// A rendered prompt. The identity span is tracked while building a matrix
/// but is not part of the exported form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub identity_span: Option<Range<usize>>,
}

impl PromptText {
    pub(crate) fn plain(text: String) -> Self {
        Self {
            text,
            identity_span: None,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl Serialize for PromptText {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for PromptText {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d).map(PromptText::plain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub key: VariantKey,
    pub text: PromptText,
}

/// One anchor's neutral prompt and all of its variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptUnit {
    pub anchor_id: String,
    pub anchor_name: String,
    pub domain: Domain,
    pub k: usize,
    /// Locale of `neutral`.
    pub locale: String,
    pub neutral: PromptText,
    /// Neutral prompts for locales introduced by locale perturbations.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub locale_neutrals: BTreeMap<String, PromptText>,
    pub variants: Vec<Variant>,
}

impl PromptUnit {
    pub fn anchor(&self) -> Anchor {
        Anchor {
            id: self.anchor_id.clone(),
            display_name: self.anchor_name.clone(),
            domain: self.domain,
        }
    }

    /// The neutral prompt a variant in `locale` is compared against.
    pub fn neutral_for(&self, locale: &str) -> Option<&PromptText> {
        if locale == self.locale {
            Some(&self.neutral)
        } else {
            self.locale_neutrals.get(locale)
        }
    }

    pub fn variant(&self, key: &VariantKey) -> Option<&PromptText> {
        self.variants.iter().find(|v| &v.key == key).map(|v| &v.text)
    }
}

pub fn render_neutral(template: &PromptTemplate, anchor: &Anchor, k: usize) -> PromptText {
    let (text, _) = template::substitute(&template.neutral_text, &anchor.display_name, k, None);
    PromptText::plain(text)
}

pub fn render_sensitive(template: &PromptTemplate, anchor: &Anchor, k: usize, identity: &str) -> PromptText {
    let (text, identity_span) = template::substitute(&template.sensitive_text, &anchor.display_name, k, Some(identity));
    PromptText { text, identity_span }
}

fn slugify(name: &str) -> String {
    let mut slug = String::new();
    for c in name.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            slug.push(c);
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    let slug = slug.trim_end_matches('-').to_owned();
    if slug.is_empty() {
        "anchor".to_owned()
    } else {
        slug
    }
}

/// Reads a UTF-8 CSV with a `name` column and an optional `id` column.
pub fn load_anchor_catalog(path: &Path, domain: Domain) -> Result<AnchorCatalog, PromptError> {
    let err = |message: String| PromptError::Catalog {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let name_col = headers
        .iter()
        .position(|h| h == "name")
        .ok_or_else(|| err("missing name column".into()))?;
    let id_col = headers.iter().position(|h| h == "id");

    let mut used: HashMap<String, usize> = HashMap::new();
    let mut anchors = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.to_string()))?;
        let name = record.get(name_col).unwrap_or_default();
        if name.is_empty() {
            continue;
        }
        let explicit = id_col.and_then(|c| record.get(c)).filter(|s| !s.is_empty());
        let id = match explicit {
            Some(id) => {
                if used.contains_key(id) {
                    return Err(err(format!("duplicate id `{id}`")));
                }
                id.to_owned()
            }
            None => {
                let base = slugify(name);
                let mut candidate = base.clone();
                let mut n = 1;
                while used.contains_key(&candidate) {
                    n += 1;
                    candidate = format!("{base}-{n}");
                }
                candidate
            }
        };
        used.insert(id.clone(), anchors.len());
        anchors.push(Anchor {
            id,
            display_name: name.to_owned(),
            domain,
        });
    }
    if anchors.is_empty() {
        return Err(err("empty catalog".into()));
    }
    Ok(AnchorCatalog { domain, anchors })
}

/// Every identity clause of the matrix in enumeration order: single
/// attribute values, personality traits, personality × attribute crossings
/// (when enabled), then intersections.
pub fn enumerate_clauses(
    attrs: &AttributeCatalog,
    pers: &PersonalityCatalog,
    config: &AuditConfig,
) -> Result<Vec<IdentityClause>, PromptError> {
    let mut clauses = Vec::new();
    for (attribute, values) in attrs.iter() {
        for v in values {
            clauses.push(IdentityClause::single(attribute, v.clone()));
        }
    }
    for t in &pers.traits {
        clauses.push(IdentityClause::personality(t.clone()));
    }
    if config.personality_attribute_cross {
        for t in &pers.traits {
            for (attribute, values) in attrs.iter() {
                for v in values {
                    clauses.push(IdentityClause::new([(attribute, v.clone())], Some(t.clone()))?);
                }
            }
        }
    }
    for tuple in &config.intersections {
        let mut combos: Vec<Vec<(Attribute, String)>> = vec![Vec::new()];
        for &attribute in tuple {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    attrs.values(attribute).iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((attribute, v.clone()));
                        next
                    })
                })
                .collect();
        }
        for parts in combos {
            clauses.push(IdentityClause::new(parts, None)?);
        }
    }
    Ok(clauses)
}

fn build_unit(
    anchor: &Anchor,
    clauses: &[IdentityClause],
    config: &AuditConfig,
    templates: &TemplateSet,
) -> Result<PromptUnit, PromptError> {
    let locale = config.base_locale();
    let template = templates.get(locale, config.domain)?;
    let k = config.k;

    let base: Vec<Variant> = clauses
        .iter()
        .map(|clause| Variant {
            key: VariantKey {
                clause: clause.clone(),
                perturbation: Perturbation::None,
                locale: locale.to_owned(),
            },
            text: render_sensitive(template, anchor, k, &render_identity_clause(clause)),
        })
        .collect();

    let mut unit = PromptUnit {
        anchor_id: anchor.id.clone(),
        anchor_name: anchor.display_name.clone(),
        domain: config.domain,
        k,
        locale: locale.to_owned(),
        neutral: render_neutral(template, anchor, k),
        locale_neutrals: BTreeMap::new(),
        variants: base.clone(),
    };

    for spec in &config.perturbations {
        let perturbation = Perturbation::from_spec(spec)?;
        match &perturbation {
            Perturbation::Typo { .. } => {
                for v in &base {
                    let span = v.text.identity_span.clone().expect("sensitive render records a span");
                    let text = perturb_typo(&v.text.text, span.clone(), spec)?;
                    unit.variants.push(Variant {
                        key: VariantKey {
                            perturbation: perturbation.clone(),
                            ..v.key.clone()
                        },
                        text: PromptText {
                            text,
                            identity_span: Some(span),
                        },
                    });
                }
            }
            Perturbation::Locale(target) => {
                let lexicon = templates
                    .lexicon(target)
                    .ok_or_else(|| PromptError::MissingLexicon(target.clone()))?;
                let base_unit = PromptUnit {
                    variants: base.clone(),
                    ..unit.clone()
                };
                let localized = localize(&base_unit, target, templates, lexicon)?;
                unit.locale_neutrals.insert(target.clone(), localized.neutral);
                for mut v in localized.variants {
                    v.key.perturbation = perturbation.clone();
                    unit.variants.push(v);
                }
            }
            Perturbation::None => {}
        }
    }
    Ok(unit)
}

/// Renders the full evaluation matrix: one unit per anchor, identical
/// variant keys across units.
pub fn build_prompt_matrix(
    catalog: &AnchorCatalog,
    attrs: &AttributeCatalog,
    pers: &PersonalityCatalog,
    config: &AuditConfig,
    templates: &TemplateSet,
) -> Result<Vec<PromptUnit>, PromptError> {
    for locale in &config.locales {
        templates.get(locale, config.domain)?;
    }
    let clauses = enumerate_clauses(attrs, pers, config)?;
    catalog
        .anchors
        .iter()
        .map(|anchor| build_unit(anchor, &clauses, config, templates))
        .collect()
}

/// Re-renders a unit in another locale from its variant keys. Identity terms
/// go through `lexicon`; the anchor name is never translated. Typo variants
/// are perturbed again on the translated text.
pub fn localize(
    unit: &PromptUnit,
    locale: &str,
    templates: &TemplateSet,
    lexicon: &Lexicon,
) -> Result<PromptUnit, PromptError> {
    let template = templates.get(locale, unit.domain)?;
    let anchor = unit.anchor();
    let mut variants = Vec::with_capacity(unit.variants.len());
    for v in &unit.variants {
        let identity = v.key.clause.translated(locale, lexicon)?;
        let mut text = render_sensitive(template, &anchor, unit.k, &identity);
        match &v.key.perturbation {
            Perturbation::None => {}
            Perturbation::Typo { rate, seed } => {
                let span = text.identity_span.clone().expect("sensitive render records a span");
                text.text = perturb_typo(&text.text, span, &PerturbationSpec::typo(*rate, *seed))?;
            }
            Perturbation::Locale(_) => return Err(PromptError::AlreadyLocalized(unit.anchor_id.clone())),
        }
        variants.push(Variant {
            key: VariantKey {
                locale: locale.to_owned(),
                ..v.key.clone()
            },
            text,
        });
    }
    Ok(PromptUnit {
        locale: locale.to_owned(),
        neutral: render_neutral(template, &anchor, unit.k),
        locale_neutrals: BTreeMap::new(),
        variants,
        ..unit.clone()
    })
}

/// Writes one unit per line.
pub fn write_matrix<W: Write>(mut out: W, units: &[PromptUnit]) -> Result<(), PromptError> {
    for unit in units {
        serde_json::to_writer(&mut out, unit).map_err(|e| PromptError::Matrix(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix<R: BufRead>(input: R) -> Result<Vec<PromptUnit>, PromptError> {
    let mut units = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let unit = serde_json::from_str(&line).map_err(|e| PromptError::Matrix(format!("line {}: {e}", i + 1)))?;
        units.push(unit);
    }
    Ok(units)
}
