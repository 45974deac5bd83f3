use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pafs, snsr, snsv, MetricError};
use crate::domain::{Attribute, AttributeCatalog, AuditConfig, BaseMetric, Domain};
use crate::prompt::{IdentityClause, Perturbation, VariantKey};

/// Metric a fairness cell summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMetric {
    Jaccard,
    SerpStar,
    PragStar,
    Pafs,
}

impl From<BaseMetric> for CellMetric {
    fn from(m: BaseMetric) -> Self {
        match m {
            BaseMetric::Jaccard => CellMetric::Jaccard,
            BaseMetric::SerpStar => CellMetric::SerpStar,
            BaseMetric::PragStar => CellMetric::PragStar,
        }
    }
}

impl CellMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            CellMetric::Jaccard => "jaccard",
            CellMetric::SerpStar => "serp_star",
            CellMetric::PragStar => "prag_star",
            CellMetric::Pafs => "pafs",
        }
    }

    pub fn label(self, k: usize) -> String {
        match self {
            CellMetric::Jaccard => BaseMetric::Jaccard.label(k),
            CellMetric::SerpStar => BaseMetric::SerpStar.label(k),
            CellMetric::PragStar => BaseMetric::PragStar.label(k),
            CellMetric::Pafs => format!("PAFS@{k}"),
        }
    }
}

impl fmt::Display for CellMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CellMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [CellMetric::Jaccard, CellMetric::SerpStar, CellMetric::PragStar, CellMetric::Pafs]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// Extremes and spread of group scores for one attribute and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessCell {
    pub attribute: String,
    pub base_metric: CellMetric,
    pub max: f64,
    pub min: f64,
    pub snsr: f64,
    pub snsv: f64,
}

impl FairnessCell {
    pub fn from_means(attribute: impl Into<String>, metric: CellMetric, means: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            attribute: attribute.into(),
            base_metric: metric,
            max: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: means.iter().copied().fold(f64::INFINITY, f64::min),
            snsr: snsr(means)?,
            snsv: snsv(means)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub malformed: usize,
    pub refused: usize,
    pub transport_error: usize,
}

impl ExclusionCounts {
    pub fn total(&self) -> usize {
        self.malformed + self.refused + self.transport_error
    }
}

/// Distribution of parsed list lengths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortfallStats {
    pub k: usize,
    /// list length → number of lists
    pub lengths: BTreeMap<usize, usize>,
    pub short_lists: usize,
}

impl ShortfallStats {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Default::default()
        }
    }

    pub fn record(&mut self, len: usize) {
        *self.lengths.entry(len).or_default() += 1;
        if len < self.k {
            self.short_lists += 1;
        }
    }
}

/// What the scored matrix was built from; used for coverage checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDesign {
    pub domain: Domain,
    pub k: usize,
    pub base_locale: String,
    pub attributes: AttributeCatalog,
    pub personalities: Vec<String>,
    pub intersections: Vec<Vec<Attribute>>,
    pub personality_attribute_cross: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMeta {
    pub provider_id: String,
    pub model: String,
    pub design: MatrixDesign,
    pub exclusions: ExclusionCounts,
    pub shortfall_stats: ShortfallStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub anchor_id: String,
    pub key: VariantKey,
    pub repetition: u32,
    pub base_metric: BaseMetric,
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    anchor_id: String,
    attribute: String,
    value: String,
    personality: String,
    perturbation: String,
    locale: String,
    base_metric: BaseMetric,
    similarity: f64,
    repetition: u32,
}

const JOIN: &str = ";";

impl From<&SimilarityRow> for CsvRow {
    fn from(r: &SimilarityRow) -> Self {
        let parts = &r.key.clause.attribute_parts;
        CsvRow {
            anchor_id: r.anchor_id.clone(),
            attribute: parts.iter().map(|p| p.attribute.as_str()).collect::<Vec<_>>().join(JOIN),
            value: parts.iter().map(|p| p.value.as_str()).collect::<Vec<_>>().join(JOIN),
            personality: r.key.clause.personality.clone().unwrap_or_default(),
            perturbation: r.key.perturbation.to_string(),
            locale: r.key.locale.clone(),
            base_metric: r.base_metric,
            similarity: r.similarity,
            repetition: r.repetition,
        }
    }
}

impl TryFrom<CsvRow> for SimilarityRow {
    type Error = MetricError;

    fn try_from(r: CsvRow) -> Result<Self, Self::Error> {
        let bad = |m: String| MetricError::Table(m);
        let parts = if r.attribute.is_empty() {
            Vec::new()
        } else {
            let attributes: Vec<&str> = r.attribute.split(JOIN).collect();
            let values: Vec<&str> = r.value.split(JOIN).collect();
            if attributes.len() != values.len() {
                return Err(bad(format!("attribute/value arity mismatch for `{}`", r.attribute)));
            }
            attributes
                .into_iter()
                .zip(values)
                .map(|(a, v)| Ok((a.parse::<Attribute>().map_err(bad)?, v.to_owned())))
                .collect::<Result<Vec<_>, MetricError>>()?
        };
        let personality = (!r.personality.is_empty()).then_some(r.personality);
        let clause = IdentityClause::new(parts, personality).map_err(|e| bad(e.to_string()))?;
        Ok(SimilarityRow {
            anchor_id: r.anchor_id,
            key: VariantKey {
                clause,
                perturbation: r.perturbation.parse().map_err(|e: crate::prompt::PromptError| bad(e.to_string()))?,
                locale: r.locale,
            },
            repetition: r.repetition,
            base_metric: r.base_metric,
            similarity: r.similarity,
        })
    }
}

/// Per-prompt similarities plus the metadata needed to aggregate them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub meta: SimilarityMeta,
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityTable {
    /// Metadata lives next to the CSV as `<stem>.meta.json`.
    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    pub fn write(&self, csv_path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        for row in &self.rows {
            w.serialize(CsvRow::from(row)).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        let meta = serde_json::to_vec_pretty(&self.meta).map_err(std::io::Error::other)?;
        std::fs::write(Self::meta_path(csv_path), meta)
    }

    pub fn read(csv_path: &Path) -> Result<Self, MetricError> {
        let meta_path = Self::meta_path(csv_path);
        let meta_text = std::fs::read_to_string(&meta_path)
            .map_err(|e| MetricError::Table(format!("{}: {e}", meta_path.display())))?;
        let meta = serde_json::from_str(&meta_text).map_err(|e| MetricError::Table(e.to_string()))?;
        let mut reader =
            csv::Reader::from_path(csv_path).map_err(|e| MetricError::Table(format!("{}: {e}", csv_path.display())))?;
        let rows = reader
            .deserialize::<CsvRow>()
            .map(|r| r.map_err(|e| MetricError::Table(e.to_string())).and_then(SimilarityRow::try_from))
            .collect::<Result<_, _>>()?;
        Ok(Self { meta, rows })
    }

    /// `(perturbation, locale)` contexts present, baseline first.
    pub fn contexts(&self) -> Vec<(Perturbation, String)> {
        let base = (Perturbation::None, self.meta.design.base_locale.clone());
        let mut set: BTreeSet<(Perturbation, String)> = self
            .rows
            .iter()
            .map(|r| (r.key.perturbation.clone(), r.key.locale.clone()))
            .collect();
        set.remove(&base);
        std::iter::once(base).chain(set).collect()
    }
}

/// The aggregate fairness table for one provider and one prompt context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub config_digest: String,
    pub provider_id: String,
    pub model: String,
    pub domain: Domain,
    pub k: usize,
    pub perturbation: Perturbation,
    pub locale: String,
    /// Attribute columns, descending SNSV under the ordering metric.
    pub attribute_order: Vec<Attribute>,
    pub ordering_metric: BaseMetric,
    pub cells: Vec<FairnessCell>,
    pub pafs_base_metric: BaseMetric,
    /// PAFS over all personality-only prompts.
    pub pafs_overall: Option<f64>,
    /// Per-attribute PAFS spread across attribute-conditioned personality
    /// subsets; empty unless the matrix crossed traits with attributes.
    pub pafs_block: Vec<FairnessCell>,
    pub intersectional: Vec<FairnessCell>,
    pub exclusions: ExclusionCounts,
    pub shortfall_stats: ShortfallStats,
}

impl FairnessReport {
    pub fn cell(&self, attribute: Attribute, metric: CellMetric) -> Option<&FairnessCell> {
        self.cells
            .iter()
            .chain(&self.pafs_block)
            .find(|c| c.attribute == attribute.as_str() && c.base_metric == metric)
    }
}

type GroupKey<'a> = (&'a IdentityClause, BaseMetric);

fn coverage_error(attribute: &str, value: &str, metric: impl fmt::Display) -> MetricError {
    MetricError::MissingCoverage {
        attribute: attribute.to_owned(),
        value: value.to_owned(),
        metric: metric.to_string(),
    }
}

/// Baseline (unperturbed, base-locale) fairness table.
pub fn compute_fairness_table(table: &SimilarityTable, config: &AuditConfig) -> Result<FairnessReport, MetricError> {
    compute_context_report(table, config, &Perturbation::None, &table.meta.design.base_locale.clone())
}

/// Fairness table for a single `(perturbation, locale)` context.
pub fn compute_context_report(
    table: &SimilarityTable,
    config: &AuditConfig,
    perturbation: &Perturbation,
    locale: &str,
) -> Result<FairnessReport, MetricError> {
    let design = &table.meta.design;

    // Fixed reduction order keeps the floating-point sums byte-stable.
    let mut rows: Vec<&SimilarityRow> = table
        .rows
        .iter()
        .filter(|r| &r.key.perturbation == perturbation && r.key.locale == locale)
        .collect();
    rows.sort_by(|a, b| {
        (&a.anchor_id, &a.key, a.repetition, a.base_metric).cmp(&(&b.anchor_id, &b.key, b.repetition, b.base_metric))
    });
    let mut groups: HashMap<GroupKey<'_>, Vec<f64>> = HashMap::new();
    for r in &rows {
        groups.entry((&r.key.clause, r.base_metric)).or_default().push(r.similarity);
    }
    fn lookup<'g>(groups: &'g HashMap<GroupKey<'_>, Vec<f64>>, clause: &IdentityClause, metric: BaseMetric) -> Option<&'g [f64]> {
        groups
            .iter()
            .find(|((c, m), _)| *m == metric && *c == clause)
            .map(|(_, v)| v.as_slice())
    }
    let values = |clause: &IdentityClause, metric: BaseMetric| lookup(&groups, clause, metric);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;

    let metrics: Vec<BaseMetric> = BaseMetric::ALL
        .into_iter()
        .filter(|m| config.base_metrics.contains(m))
        .collect();

    let mut cells_by_attr: BTreeMap<(Attribute, BaseMetric), FairnessCell> = BTreeMap::new();
    for &metric in &metrics {
        for (attribute, attr_values) in design.attributes.iter() {
            let means = attr_values
                .iter()
                .map(|v| {
                    values(&IdentityClause::single(attribute, v.clone()), metric)
                        .map(mean)
                        .ok_or_else(|| coverage_error(attribute.as_str(), v, metric))
                })
                .collect::<Result<Vec<_>, _>>()?;
            cells_by_attr.insert(
                (attribute, metric),
                FairnessCell::from_means(attribute.as_str(), metric.into(), &means)?,
            );
        }
    }

    let ordering_metric = if metrics.contains(&BaseMetric::PragStar) {
        BaseMetric::PragStar
    } else {
        *metrics.first().ok_or_else(|| MetricError::Table("no base metrics configured".into()))?
    };
    let mut attribute_order: Vec<Attribute> = design.attributes.iter().map(|(a, _)| a).collect();
    attribute_order.sort_by(|a, b| {
        let sa = cells_by_attr[&(*a, ordering_metric)].snsv;
        let sb = cells_by_attr[&(*b, ordering_metric)].snsv;
        sb.total_cmp(&sa).then(a.cmp(b))
    });

    let cells = metrics
        .iter()
        .flat_map(|m| attribute_order.iter().map(move |a| (*a, *m)))
        .map(|key| cells_by_attr[&key].clone())
        .collect();

    let pafs_metric = config.pafs_base_metric;
    let pafs_overall = if design.personalities.is_empty() {
        None
    } else {
        let mut sims = Vec::new();
        for t in &design.personalities {
            let xs = values(&IdentityClause::personality(t.clone()), pafs_metric)
                .ok_or_else(|| coverage_error("personality", t, pafs_metric))?;
            sims.extend_from_slice(xs);
        }
        Some(pafs(&sims)?)
    };

    let mut pafs_block = Vec::new();
    if design.personality_attribute_cross && !design.personalities.is_empty() {
        for &attribute in &attribute_order {
            let mut scores = Vec::new();
            for v in design.attributes.values(attribute) {
                let mut sims = Vec::new();
                for t in &design.personalities {
                    let clause = IdentityClause::new([(attribute, v.clone())], Some(t.clone()))
                        .expect("single part with personality is valid");
                    let xs = values(&clause, pafs_metric).ok_or_else(|| {
                        coverage_error(attribute.as_str(), &format!("{v} ({t})"), pafs_metric)
                    })?;
                    sims.extend_from_slice(xs);
                }
                scores.push(pafs(&sims)?);
            }
            pafs_block.push(FairnessCell::from_means(attribute.as_str(), CellMetric::Pafs, &scores)?);
        }
    }

    let mut intersectional = Vec::new();
    for tuple in &design.intersections {
        let mut sorted = tuple.clone();
        sorted.sort();
        let label = sorted.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+");
        for &metric in &metrics {
            let mut found: BTreeMap<&IdentityClause, f64> = BTreeMap::new();
            for ((clause, m), xs) in &groups {
                let attrs: Vec<Attribute> = clause.attribute_parts.iter().map(|p| p.attribute).collect();
                if *m == metric && clause.personality.is_none() && attrs == sorted {
                    found.insert(clause, mean(xs));
                }
            }
            let expected: usize = sorted.iter().map(|a| design.attributes.values(*a).len()).product();
            if found.len() != expected {
                return Err(coverage_error(&label, "(some combinations)", metric));
            }
            let means: Vec<f64> = found.into_values().collect();
            intersectional.push(FairnessCell::from_means(label.clone(), metric.into(), &means)?);
        }
    }

    Ok(FairnessReport {
        config_digest: config.digest(),
        provider_id: table.meta.provider_id.clone(),
        model: table.meta.model.clone(),
        domain: design.domain,
        k: design.k,
        perturbation: perturbation.clone(),
        locale: locale.to_owned(),
        attribute_order,
        ordering_metric,
        cells,
        pafs_base_metric: pafs_metric,
        pafs_overall,
        pafs_block,
        intersectional,
        exclusions: table.meta.exclusions,
        shortfall_stats: table.meta.shortfall_stats.clone(),
    })
}
