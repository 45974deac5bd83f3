//! Shared audit vocabulary: attributes, catalogs, ranked lists and the audit
//! configuration, plus configuration validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parse;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed catalog {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Recommendation domain of an audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Movie,
    Music,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Movie => "movie",
            Domain::Music => "music",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The eight audited sensitive attributes.
///
/// Declaration order is the canonical order used when joining the parts of an
/// identity clause (adjectives first, occupation last).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Religion,
    Race,
    Continent,
    Country,
    Age,
    Physical,
    Gender,
    Occupation,
}

impl Attribute {
    pub const ALL: [Attribute; 8] = [
        Attribute::Religion,
        Attribute::Race,
        Attribute::Continent,
        Attribute::Country,
        Attribute::Age,
        Attribute::Physical,
        Attribute::Gender,
        Attribute::Occupation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Religion => "religion",
            Attribute::Race => "race",
            Attribute::Continent => "continent",
            Attribute::Country => "country",
            Attribute::Age => "age",
            Attribute::Physical => "physical",
            Attribute::Gender => "gender",
            Attribute::Occupation => "occupation",
        }
    }

    /// Column heading used in rendered tables.
    pub fn title(self) -> &'static str {
        match self {
            Attribute::Religion => "Religion",
            Attribute::Race => "Race",
            Attribute::Continent => "Continent",
            Attribute::Country => "Country",
            Attribute::Age => "Age",
            Attribute::Physical => "Physical",
            Attribute::Gender => "Gender",
            Attribute::Occupation => "Occupation",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

/// Similarity between a neutral and a variant list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMetric {
    Jaccard,
    SerpStar,
    PragStar,
}

impl BaseMetric {
    pub const ALL: [BaseMetric; 3] = [BaseMetric::Jaccard, BaseMetric::SerpStar, BaseMetric::PragStar];

    pub fn as_str(self) -> &'static str {
        match self {
            BaseMetric::Jaccard => "jaccard",
            BaseMetric::SerpStar => "serp_star",
            BaseMetric::PragStar => "prag_star",
        }
    }

    /// Table label, e.g. `Jaccard@25`.
    pub fn label(self, k: usize) -> String {
        match self {
            BaseMetric::Jaccard => format!("Jaccard@{k}"),
            BaseMetric::SerpStar => format!("SERP*@{k}"),
            BaseMetric::PragStar => format!("PRAG*@{k}"),
        }
    }
}

impl fmt::Display for BaseMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaseMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown base metric `{s}`"))
    }
}

/// Denominator used by PRAG*@K.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PragNormalization {
    /// `k(k+1)/2`; identical lists score `(k-1)/(k+1)`.
    #[default]
    TableConsistent,
    /// `k(k+1)`; identical lists score `(k-1)/(2(k+1))`.
    PrintedEq6,
}

/// How recommended titles are matched across lists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    ExactCanonical,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_repetitions")]
    pub repetitions_per_prompt: u32,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_repetitions() -> u32 {
    1
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            repetitions_per_prompt: default_repetitions(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Typo,
    Locale,
}

/// One configured perturbation, as written in the audit config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Fraction of identity words edited (typo only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Target locale (locale only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locale: Option<String>,
}

impl PerturbationSpec {
    pub fn typo(rate: f64, seed: u64) -> Self {
        Self {
            kind: PerturbationKind::Typo,
            rate: Some(rate),
            seed,
            locale: None,
        }
    }

    pub fn locale(locale: impl Into<String>) -> Self {
        Self {
            kind: PerturbationKind::Locale,
            rate: None,
            seed: 0,
            locale: Some(locale.into()),
        }
    }
}

/// Audit configuration. Deserialization accepts any values; call
/// [`validate_config`] before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    pub domain: Domain,
    #[serde(default = "default_base_metrics")]
    pub base_metrics: Vec<BaseMetric>,
    #[serde(default = "default_pafs_metric")]
    pub pafs_base_metric: BaseMetric,
    #[serde(default)]
    pub prag_normalization: PragNormalization,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default = "default_locales")]
    pub locales: Vec<String>,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    /// Attribute tuples expanded into intersectional clauses.
    #[serde(default)]
    pub intersections: Vec<Vec<Attribute>>,
    /// Also render every personality trait combined with every single
    /// attribute value; feeds the per-attribute PAFS block.
    #[serde(default)]
    pub personality_attribute_cross: bool,
    #[serde(default)]
    pub match_mode: MatchMode,
    #[serde(default = "default_fuzzy_threshold")]
    pub fuzzy_threshold: f64,
}

fn default_k() -> usize {
    25
}

fn default_base_metrics() -> Vec<BaseMetric> {
    BaseMetric::ALL.to_vec()
}

fn default_pafs_metric() -> BaseMetric {
    BaseMetric::Jaccard
}

fn default_locales() -> Vec<String> {
    vec!["en".to_owned()]
}

fn default_fuzzy_threshold() -> f64 {
    0.9
}

impl AuditConfig {
    pub fn new(domain: Domain) -> Self {
        Self {
            k: default_k(),
            domain,
            base_metrics: default_base_metrics(),
            pafs_base_metric: default_pafs_metric(),
            prag_normalization: PragNormalization::default(),
            decoding: DecodingParams::default(),
            locales: default_locales(),
            perturbations: Vec::new(),
            intersections: Vec::new(),
            personality_attribute_cross: false,
            match_mode: MatchMode::default(),
            fuzzy_threshold: default_fuzzy_threshold(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        read_json(path)
    }

    /// Locale of the neutral prompt and unperturbed variants.
    pub fn base_locale(&self) -> &str {
        self.locales.first().map(String::as_str).unwrap_or("en")
    }

    /// Hex SHA-256 over the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn parse_policy(&self) -> parse::ParsePolicy {
        parse::ParsePolicy {
            k: self.k,
            match_mode: self.match_mode,
            fuzzy_threshold: self.fuzzy_threshold,
        }
    }
}

/// Values of every audited attribute.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeCatalog {
    pub attributes: BTreeMap<Attribute, Vec<String>>,
}

impl AttributeCatalog {
    pub fn values(&self, attribute: Attribute) -> &[String] {
        self.attributes.get(&attribute).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Attribute, &[String])> {
        self.attributes.iter().map(|(a, v)| (*a, v.as_slice()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonalityCatalog {
    pub traits: Vec<String>,
}

impl PersonalityCatalog {
    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CatalogFile {
    attributes: AttributeCatalog,
    #[serde(default)]
    personalities: PersonalityCatalog,
}

/// Loads `{"attributes": {...}, "personalities": [...]}`.
pub fn load_catalogs(path: &Path) -> Result<(AttributeCatalog, PersonalityCatalog), CatalogError> {
    let file: CatalogFile = read_json(path)?;
    Ok((file.attributes, file.personalities))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CatalogError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// A content anchor: the artist or director named in every prompt of a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: String,
    pub display_name: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorCatalog {
    pub domain: Domain,
    pub anchors: Vec<Anchor>,
}

/// A recommended title in canonical and verbatim form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalTitle {
    pub canonical: String,
    pub original: String,
}

impl CanonicalTitle {
    pub fn new(original: &str) -> Result<Self, parse::ParseError> {
        parse::canonicalize_title(original)
    }
}

/// An ordered, duplicate-free top-K list. Rank of `items[i]` is `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    items: Vec<CanonicalTitle>,
    /// Items parsed before deduplication and truncation.
    pub raw_count: usize,
}

impl RankedList {
    /// Keeps the first occurrence of each canonical form and at most `k`
    /// items.
    pub fn from_titles(titles: impl IntoIterator<Item = CanonicalTitle>, k: usize) -> Self {
        let mut seen = BTreeSet::new();
        let mut items = Vec::new();
        let mut raw_count = 0;
        for title in titles {
            raw_count += 1;
            if items.len() < k && seen.insert(title.canonical.clone()) {
                items.push(title);
            }
        }
        Self { items, raw_count }
    }

    /// Builds a list from pre-canonical strings; mostly useful in tests.
    pub fn from_canonical<S: AsRef<str>>(items: &[S], k: usize) -> Self {
        Self::from_titles(
            items.iter().map(|s| CanonicalTitle {
                canonical: s.as_ref().to_owned(),
                original: s.as_ref().to_owned(),
            }),
            k,
        )
    }

    pub fn items(&self) -> &[CanonicalTitle] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn canonical(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|t| t.canonical.as_str())
    }

    /// 1-based rank of an exact canonical match.
    pub fn rank_of(&self, canonical: &str) -> Option<usize> {
        self.items.iter().position(|t| t.canonical == canonical).map(|i| i + 1)
    }

    pub(crate) fn replace_canonical(&mut self, index: usize, canonical: String) {
        self.items[index].canonical = canonical;
    }
}

/// One failed invariant found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Checks every config and catalog invariant; an empty result means valid.
pub fn validate_config(
    config: &AuditConfig,
    attrs: &AttributeCatalog,
    pers: &PersonalityCatalog,
) -> Vec<Violation> {
    let mut out = Vec::new();

    if config.k < 2 {
        out.push(Violation::new("k", "k ≥ 2 required for PRAG*"));
    }
    if config.base_metrics.is_empty() {
        out.push(Violation::new("base_metrics", "at least one base metric required"));
    }
    let distinct: BTreeSet<_> = config.base_metrics.iter().collect();
    if distinct.len() != config.base_metrics.len() {
        out.push(Violation::new("base_metrics", "base metrics must be distinct"));
    }
    if !config.base_metrics.contains(&config.pafs_base_metric) {
        out.push(Violation::new(
            "pafs_base_metric",
            format!("`{}` is not one of base_metrics", config.pafs_base_metric),
        ));
    }

    let d = &config.decoding;
    if !(d.temperature.is_finite() && d.temperature >= 0.0) {
        out.push(Violation::new("decoding.temperature", "temperature must be a non-negative real"));
    }
    if d.max_tokens == 0 {
        out.push(Violation::new("decoding.max_tokens", "max_tokens must be positive"));
    }
    if d.repetitions_per_prompt == 0 {
        out.push(Violation::new("decoding.repetitions_per_prompt", "repetitions_per_prompt ≥ 1 required"));
    }

    if config.locales.is_empty() {
        out.push(Violation::new("locales", "at least one locale required"));
    }
    let locales: BTreeSet<_> = config.locales.iter().collect();
    if locales.len() != config.locales.len() {
        out.push(Violation::new("locales", "locales must be distinct"));
    }

    if config.match_mode == MatchMode::Fuzzy
        && !(config.fuzzy_threshold > 0.0 && config.fuzzy_threshold <= 1.0)
    {
        out.push(Violation::new("fuzzy_threshold", "fuzzy_threshold must lie in (0, 1]"));
    }

    let mut tags = BTreeSet::new();
    for (i, p) in config.perturbations.iter().enumerate() {
        let field = format!("perturbations[{i}]");
        match p.kind {
            PerturbationKind::Typo => match p.rate {
                Some(r) if r > 0.0 && r <= 1.0 => {}
                _ => out.push(Violation::new(format!("{field}.rate"), "typo rate must lie in (0, 1]")),
            },
            PerturbationKind::Locale => match &p.locale {
                None => out.push(Violation::new(format!("{field}.locale"), "locale perturbation needs a locale")),
                Some(l) if l == config.base_locale() => out.push(Violation::new(
                    format!("{field}.locale"),
                    format!("`{l}` is the base locale"),
                )),
                Some(l) if !config.locales.contains(l) => out.push(Violation::new(
                    format!("{field}.locale"),
                    format!("`{l}` is not listed in locales"),
                )),
                Some(_) => {}
            },
        }
        if let Ok(tag) = crate::prompt::Perturbation::from_spec(p) {
            if !tags.insert(tag.to_string()) {
                out.push(Violation::new(field, format!("duplicate perturbation `{tag}`")));
            }
        }
    }

    for (attribute, values) in attrs.iter() {
        let field = format!("attributes.{attribute}");
        if values.len() < 2 {
            out.push(Violation::new(&field, "attribute needs ≥ 2 values"));
        }
        let mut seen = BTreeSet::new();
        for v in values {
            if v.trim().is_empty() {
                out.push(Violation::new(&field, "attribute values must be non-empty"));
            } else if !seen.insert(fold(v)) {
                out.push(Violation::new(&field, format!("duplicate value `{v}` after case-folding")));
            }
        }
    }

    if !pers.traits.is_empty() {
        if pers.traits.len() < 2 {
            out.push(Violation::new("personalities", "personality catalog needs ≥ 2 traits"));
        }
        let mut seen = BTreeSet::new();
        for t in &pers.traits {
            if t.trim().is_empty() {
                out.push(Violation::new("personalities", "traits must be non-empty"));
            } else if !seen.insert(fold(t)) {
                out.push(Violation::new("personalities", format!("duplicate trait `{t}` after case-folding")));
            }
        }
    }
    if config.personality_attribute_cross && pers.traits.is_empty() {
        out.push(Violation::new(
            "personality_attribute_cross",
            "personality crossing requested but no traits are configured",
        ));
    }

    for (i, tuple) in config.intersections.iter().enumerate() {
        let field = format!("intersections[{i}]");
        let set: BTreeSet<_> = tuple.iter().collect();
        if tuple.len() < 2 {
            out.push(Violation::new(&field, "an intersection needs ≥ 2 attributes"));
        }
        if set.len() != tuple.len() {
            out.push(Violation::new(&field, "attribute repeated within intersection"));
        }
        for a in tuple {
            if attrs.values(*a).is_empty() {
                out.push(Violation::new(&field, format!("attribute `{a}` has no catalog values")));
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(values: &[(Attribute, &[&str])]) -> AttributeCatalog {
        AttributeCatalog {
            attributes: values
                .iter()
                .map(|(a, v)| (*a, v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }

    fn all_eight() -> AttributeCatalog {
        AttributeCatalog {
            attributes: Attribute::ALL
                .into_iter()
                .map(|a| (a, vec![format!("{a}-1"), format!("{a}-2")]))
                .collect(),
        }
    }

    #[test]
    fn default_config_with_full_catalog_is_valid() {
        let config = AuditConfig::new(Domain::Movie);
        assert_eq!(config.k, 25);
        assert!(validate_config(&config, &all_eight(), &PersonalityCatalog::default()).is_empty());
    }

    #[test]
    fn k_of_one_is_rejected() {
        let mut config = AuditConfig::new(Domain::Music);
        config.k = 1;
        let v = validate_config(&config, &all_eight(), &PersonalityCatalog::default());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "k");
        assert_eq!(v[0].message, "k ≥ 2 required for PRAG*");
    }

    #[test]
    fn singleton_attribute_is_rejected() {
        let config = AuditConfig::new(Domain::Movie);
        let attrs = catalog(&[(Attribute::Religion, &["Buddhist"])]);
        let v = validate_config(&config, &attrs, &PersonalityCatalog::default());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "attributes.religion");
        assert_eq!(v[0].message, "attribute needs ≥ 2 values");
    }

    #[test]
    fn case_folded_duplicates_are_rejected() {
        let config = AuditConfig::new(Domain::Movie);
        let attrs = catalog(&[(Attribute::Gender, &["Male", "male "])]);
        let pers = PersonalityCatalog {
            traits: vec!["Shy".into(), "shy".into()],
        };
        let v = validate_config(&config, &attrs, &pers);
        assert!(v.iter().any(|x| x.field == "attributes.gender"));
        assert!(v.iter().any(|x| x.field == "personalities"));
    }

    #[test]
    fn pafs_metric_must_be_configured() {
        let mut config = AuditConfig::new(Domain::Movie);
        config.base_metrics = vec![BaseMetric::SerpStar];
        let v = validate_config(&config, &all_eight(), &PersonalityCatalog::default());
        assert!(v.iter().any(|x| x.field == "pafs_base_metric"));
    }

    #[test]
    fn perturbation_checks() {
        let mut config = AuditConfig::new(Domain::Movie);
        config.perturbations = vec![
            PerturbationSpec::typo(0.0, 1),
            PerturbationSpec::locale("fr"),
            PerturbationSpec::locale("en"),
        ];
        let v = validate_config(&config, &all_eight(), &PersonalityCatalog::default());
        let fields: Vec<_> = v.iter().map(|x| x.field.as_str()).collect();
        assert_eq!(
            fields,
            ["perturbations[0].rate", "perturbations[1].locale", "perturbations[2].locale"]
        );
    }

    #[test]
    fn config_json_uses_field_names() {
        let json = r#"{"k": 10, "domain": "music", "base_metrics": ["jaccard", "prag_star"],
            "pafs_base_metric": "prag_star", "prag_normalization": "printed_eq6",
            "decoding": {"temperature": 0.7, "max_tokens": 800, "repetitions_per_prompt": 3},
            "locales": ["en", "fr"],
            "perturbations": [{"kind": "typo", "rate": 0.5, "seed": 7}, {"kind": "locale", "locale": "fr"}]}"#;
        let config: AuditConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.k, 10);
        assert_eq!(config.prag_normalization, PragNormalization::PrintedEq6);
        assert_eq!(config.decoding.repetitions_per_prompt, 3);
        assert_eq!(config.perturbations.len(), 2);
        assert!(validate_config(&config, &all_eight(), &PersonalityCatalog::default()).is_empty());
        assert_eq!(config.digest(), config.clone().digest());
    }

    #[test]
    fn ranked_list_dedups_and_truncates() {
        let list = RankedList::from_canonical(&["a", "b", "a", "c", "d"], 3);
        assert_eq!(list.canonical().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(list.raw_count, 5);
        assert_eq!(list.rank_of("c"), Some(3));
        assert_eq!(list.rank_of("d"), None);
    }
}
