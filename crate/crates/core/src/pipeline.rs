//! File-staged audit pipeline: generate → run → score → report.
//!
//! Each stage reads its predecessor's files, writes its own, and records
//! the outputs with their SHA-256 in `manifest.json` under the workdir.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    load_catalogs, validate_config, AttributeCatalog, AuditConfig, CatalogError, PersonalityCatalog, RankedList,
    Violation,
};
use crate::gateway::{run_matrix, ExchangeStatus, Gateway, GatewayError, ProviderSpec, ReplayStore, RunSummary};
use crate::metrics::{
    compute_context_report, ExclusionCounts, FairnessReport, MatrixDesign, MetricError, ShortfallStats, SimilarityMeta,
    SimilarityRow, SimilarityTable,
};
use crate::parse::{align, extract_items, looks_like_refusal};
use crate::prompt::{build_prompt_matrix, load_anchor_catalog, read_matrix, write_matrix, PromptError, PromptUnit, TemplateSet, VariantKey};
use crate::report::write_report_files;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{} cache keys missing from the store:\n{}", .0.len(), .0.join("\n"))]
    MissingKeys(Vec<String>),
    #[error("coverage gap: {0}")]
    Coverage(String),
    #[error("{0} exchanges still failing after retries; rerun to resume")]
    TransportExhausted(usize),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StageError {
    /// 2 configuration, 3 missing input or coverage, 4 transport, 1 other I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Invalid(_) | StageError::Config(_) => 2,
            StageError::MissingInput(_) | StageError::MissingKeys(_) | StageError::Coverage(_) => 3,
            StageError::TransportExhausted(_) => 4,
            StageError::Io { .. } => 1,
        }
    }
}

impl From<CatalogError> for StageError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                StageError::MissingInput(path.into())
            }
            CatalogError::Io { path, source } => StageError::Io { path: path.into(), source },
            e @ CatalogError::Json { .. } => StageError::Config(e.to_string()),
        }
    }
}

impl From<PromptError> for StageError {
    fn from(e: PromptError) -> Self {
        StageError::Config(e.to_string())
    }
}

impl From<GatewayError> for StageError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                StageError::MissingInput(path)
            }
            GatewayError::Io { path, source } => StageError::Io { path, source },
            e => StageError::Config(e.to_string()),
        }
    }
}

impl From<MetricError> for StageError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::MissingCoverage { .. } => StageError::Coverage(e.to_string()),
            e => StageError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_owned(),
        source,
    }
}

fn require(path: &Path) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::MissingInput(path.to_owned()))
    }
}

/// Root that relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.root.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Run,
    Score,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl OutputFile {
    fn of(path: &Path) -> Result<Self, StageError> {
        Ok(Self {
            path: path.to_owned(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String, StageError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(io_err(path))?;
    Ok(hex::encode(h.finalize()))
}

/// What has run in a workdir, and what it produced.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub toolkit_version: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, OutputFile>,
    pub stages: BTreeMap<Stage, bool>,
}

impl RunManifest {
    /// Loads the workdir manifest, starting fresh if absent or if it belongs
    /// to a different configuration.
    pub fn load_or_new(path: &Path, config_digest: &str) -> Self {
        let existing = std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_digest == config_digest);
        existing.unwrap_or_else(|| RunManifest {
            config_digest: config_digest.to_owned(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            ..Default::default()
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StageError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    fn complete(&mut self, stage: Stage, outputs: &[(&str, &Path)]) -> Result<(), StageError> {
        for (name, path) in outputs {
            self.outputs.insert((*name).to_owned(), OutputFile::of(path)?);
        }
        self.stages.insert(stage, true);
        self.toolkit_version = env!("CARGO_PKG_VERSION").to_owned();
        Ok(())
    }

    /// Outputs whose file is missing or no longer matches its digest.
    pub fn verify(&self) -> Vec<String> {
        self.outputs
            .iter()
            .filter_map(|(name, out)| match sha256_file(&out.path) {
                Ok(h) if h == out.sha256 => None,
                Ok(_) => Some(format!("{name}: {} changed since it was recorded", out.path.display())),
                Err(_) => Some(format!("{name}: {} is missing", out.path.display())),
            })
            .collect()
    }
}

fn update_manifest(
    workdir: &Workdir,
    config: &AuditConfig,
    inputs: &[(&str, &Path)],
    stage: Stage,
    outputs: &[(&str, &Path)],
) -> Result<(), StageError> {
    let path = workdir.manifest_path();
    let mut m = RunManifest::load_or_new(&path, &config.digest());
    for (name, p) in inputs {
        m.inputs.insert((*name).to_owned(), p.to_path_buf());
    }
    m.complete(stage, outputs)?;
    m.save(&path)
}

pub fn load_config(path: &Path) -> Result<AuditConfig, StageError> {
    require(path)?;
    Ok(AuditConfig::load(path)?)
}

/// Config plus catalogs, validated together.
pub fn load_validated(
    config_path: &Path,
    catalog_path: &Path,
) -> Result<(AuditConfig, AttributeCatalog, PersonalityCatalog), StageError> {
    let config = load_config(config_path)?;
    require(catalog_path)?;
    let (attrs, pers) = load_catalogs(catalog_path)?;
    let violations = validate_config(&config, &attrs, &pers);
    if !violations.is_empty() {
        return Err(StageError::Invalid(violations));
    }
    Ok((config, attrs, pers))
}

pub fn load_units(path: &Path) -> Result<Vec<PromptUnit>, StageError> {
    require(path)?;
    let file = File::open(path).map_err(io_err(path))?;
    Ok(read_matrix(BufReader::new(file))?)
}

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub config: PathBuf,
    pub catalog: PathBuf,
    pub templates: PathBuf,
    pub anchors: PathBuf,
    pub out: PathBuf,
}

/// Renders the prompt matrix to JSONL. Returns the unit count.
pub fn generate(workdir: &Workdir, req: &GenerateRequest) -> Result<usize, StageError> {
    let config_path = workdir.resolve(&req.config);
    let catalog_path = workdir.resolve(&req.catalog);
    let templates_path = workdir.resolve(&req.templates);
    let anchors_path = workdir.resolve(&req.anchors);
    let out = workdir.resolve(&req.out);

    let (config, attrs, pers) = load_validated(&config_path, &catalog_path)?;
    require(&templates_path)?;
    let templates = TemplateSet::load(&templates_path)?;
    require(&anchors_path)?;
    let anchors = load_anchor_catalog(&anchors_path, config.domain)?;
    let units = build_prompt_matrix(&anchors, &attrs, &pers, &config, &templates)?;

    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(&out).map_err(io_err(&out))?);
    write_matrix(&mut w, &units)?;
    w.flush().map_err(io_err(&out))?;
    tracing::info!(units = units.len(), path = %out.display(), "matrix written");

    update_manifest(
        workdir,
        &config,
        &[
            ("config", &config_path),
            ("catalog", &catalog_path),
            ("templates", &templates_path),
            ("anchors", &anchors_path),
        ],
        Stage::Generate,
        &[("matrix", &out)],
    )?;
    Ok(units.len())
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config: PathBuf,
    pub matrix: PathBuf,
    pub provider: ProviderSpec,
    pub store: PathBuf,
    pub offline: bool,
}

/// Resolves the matrix against the store, dispatching what is missing.
pub async fn run(workdir: &Workdir, req: RunRequest) -> Result<RunSummary, StageError> {
    let config = load_config(&workdir.resolve(&req.config))?;
    let matrix = workdir.resolve(&req.matrix);
    let units = load_units(&matrix)?;
    let store_path = workdir.resolve(&req.store);
    let mut store = ReplayStore::open(&store_path)?;
    let gateway = Arc::new(Gateway::connect(req.provider, req.offline)?);
    let live = gateway.is_live();

    let set = run_matrix(gateway, &units, &config, &mut store).await?;
    let s = &set.summary;
    tracing::info!(
        ok = s.ok,
        malformed = s.malformed,
        refused = s.refused,
        transport_error = s.transport_error,
        dispatched = s.dispatched,
        "run complete"
    );
    if !s.missing.is_empty() {
        return Err(StageError::MissingKeys(s.missing.clone()));
    }
    if s.transport_error > 0 && live {
        return Err(StageError::TransportExhausted(s.transport_error));
    }
    let outputs: Vec<(&str, &Path)> = if store_path.exists() {
        vec![("store", &store_path)]
    } else {
        Vec::new()
    };
    update_manifest(workdir, &config, &[], Stage::Run, &outputs)?;
    Ok(set.summary)
}

#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub config: PathBuf,
    pub catalog: PathBuf,
    pub matrix: PathBuf,
    pub store: PathBuf,
    pub provider: ProviderSpec,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ParsedItem<'a> {
    rank: usize,
    canonical: &'a str,
    original: &'a str,
}

#[derive(Serialize)]
struct ParsedLine<'a> {
    cache_key: &'a str,
    anchor_id: &'a str,
    repetition: u32,
    /// `None` for a neutral prompt.
    variant_key: Option<&'a VariantKey>,
    locale: &'a str,
    items: Vec<ParsedItem<'a>>,
    raw_count: usize,
    status: ExchangeStatus,
}

/// Outcome of turning a stored exchange into a ranked list.
enum Parsed {
    List(RankedList),
    Excluded(ExchangeStatus),
}

/// Path of the parsed-lists export next to a similarity CSV.
pub fn parsed_path(similarities: &Path) -> PathBuf {
    similarities.with_extension("parsed.jsonl")
}

/// Parses every stored response and writes per-prompt similarities.
pub fn score(workdir: &Workdir, req: &ScoreRequest) -> Result<SimilarityTable, StageError> {
    let (config, attrs, pers) = load_validated(&workdir.resolve(&req.config), &workdir.resolve(&req.catalog))?;
    let units = load_units(&workdir.resolve(&req.matrix))?;
    let store_path = workdir.resolve(&req.store);
    require(&store_path)?;
    let store = ReplayStore::open(&store_path)?;
    if store.is_empty() {
        return Err(StageError::MissingInput(store_path));
    }
    let gateway = Gateway::connect(req.provider.clone(), true)?;
    let policy = config.parse_policy();
    let decoding = &config.decoding;

    let out = workdir.resolve(&req.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let parsed_out = parsed_path(&out);
    let mut parsed_w = BufWriter::new(File::create(&parsed_out).map_err(io_err(&parsed_out))?);

    let mut exclusions = ExclusionCounts::default();
    let mut shortfall = ShortfallStats::new(config.k);
    let mut rows = Vec::new();
    let mut missing = Vec::new();

    let mut parse_one = |prompt: &str,
                         rep: u32,
                         anchor_id: &str,
                         variant_key: Option<&VariantKey>,
                         locale: &str|
     -> Result<Option<Parsed>, StageError> {
        let key = gateway.key_for(prompt, decoding, rep);
        let Some(rec) = store.get(&key) else {
            missing.push(key);
            return Ok(None);
        };
        let parsed = match rec.status {
            ExchangeStatus::Ok => match extract_items(&rec.response_text, &policy) {
                Ok(list) => Parsed::List(list),
                Err(_) if looks_like_refusal(&rec.response_text) => Parsed::Excluded(ExchangeStatus::Refused),
                Err(_) => Parsed::Excluded(ExchangeStatus::Malformed),
            },
            status => Parsed::Excluded(status),
        };
        let (items, raw_count, status) = match &parsed {
            Parsed::List(list) => {
                shortfall.record(list.len());
                let items = list
                    .items()
                    .iter()
                    .enumerate()
                    .map(|(i, t)| ParsedItem {
                        rank: i + 1,
                        canonical: &t.canonical,
                        original: &t.original,
                    })
                    .collect();
                (items, list.raw_count, ExchangeStatus::Ok)
            }
            Parsed::Excluded(status) => {
                match status {
                    ExchangeStatus::Malformed => exclusions.malformed += 1,
                    ExchangeStatus::Refused => exclusions.refused += 1,
                    ExchangeStatus::TransportError => exclusions.transport_error += 1,
                    ExchangeStatus::Ok => unreachable!(),
                }
                (Vec::new(), 0, *status)
            }
        };
        let line = ParsedLine {
            cache_key: &key,
            anchor_id,
            repetition: rep,
            variant_key,
            locale,
            items,
            raw_count,
            status,
        };
        let json = serde_json::to_string(&line).expect("parsed line serializes");
        writeln!(parsed_w, "{json}").map_err(io_err(&parsed_out))?;
        Ok(Some(parsed))
    };

    for unit in &units {
        for rep in 0..decoding.repetitions_per_prompt {
            let mut neutrals: BTreeMap<&str, Option<RankedList>> = BTreeMap::new();
            let locales = std::iter::once((unit.locale.as_str(), &unit.neutral))
                .chain(unit.locale_neutrals.iter().map(|(l, p)| (l.as_str(), p)));
            for (locale, prompt) in locales {
                let list = match parse_one(prompt.as_str(), rep, &unit.anchor_id, None, locale)? {
                    Some(Parsed::List(l)) => Some(l),
                    _ => None,
                };
                neutrals.insert(locale, list);
            }
            for v in &unit.variants {
                let parsed = parse_one(v.text.as_str(), rep, &unit.anchor_id, Some(&v.key), &v.key.locale)?;
                let (Some(Parsed::List(list)), Some(Some(neutral))) = (parsed, neutrals.get(v.key.locale.as_str()))
                else {
                    continue;
                };
                let list = align(neutral, &list, &policy);
                for &metric in &config.base_metrics {
                    let similarity =
                        crate::metrics::similarity(metric, neutral, &list, config.k, config.prag_normalization)?;
                    rows.push(SimilarityRow {
                        anchor_id: unit.anchor_id.clone(),
                        key: v.key.clone(),
                        repetition: rep,
                        base_metric: metric,
                        similarity,
                    });
                }
            }
        }
    }
    drop(parse_one);
    parsed_w.flush().map_err(io_err(&parsed_out))?;
    drop(parsed_w);
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(StageError::MissingKeys(missing));
    }
    if exclusions.total() > 0 {
        tracing::warn!(
            malformed = exclusions.malformed,
            refused = exclusions.refused,
            transport_error = exclusions.transport_error,
            "responses excluded"
        );
    }

    let table = SimilarityTable {
        meta: SimilarityMeta {
            provider_id: req.provider.id.clone(),
            model: req.provider.model.clone(),
            design: MatrixDesign {
                domain: config.domain,
                k: config.k,
                base_locale: config.base_locale().to_owned(),
                attributes: attrs,
                personalities: pers.traits.clone(),
                intersections: config.intersections.clone(),
                personality_attribute_cross: config.personality_attribute_cross,
            },
            exclusions,
            shortfall_stats: shortfall,
        },
        rows,
    };
    table.write(&out).map_err(io_err(&out))?;
    let meta = SimilarityTable::meta_path(&out);
    update_manifest(
        workdir,
        &config,
        &[],
        Stage::Score,
        &[("similarities", &out), ("similarities_meta", &meta), ("parsed", &parsed_out)],
    )?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct ReportRequest {
    pub config: PathBuf,
    pub similarities: PathBuf,
    /// Further similarity tables to include in the plot data.
    pub compare: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub timestamp: DateTime<Utc>,
}

/// Every context report of a table, baseline first.
pub fn context_reports(table: &SimilarityTable, config: &AuditConfig) -> Result<Vec<FairnessReport>, StageError> {
    table
        .contexts()
        .iter()
        .map(|(p, l)| compute_context_report(table, config, p, l).map_err(StageError::from))
        .collect()
}

fn read_table(path: &Path) -> Result<SimilarityTable, StageError> {
    require(path)?;
    require(&SimilarityTable::meta_path(path))?;
    SimilarityTable::read(path).map_err(StageError::from)
}

/// Aggregates similarities into the four report files. Returns the run
/// directory they were written to.
pub fn report(workdir: &Workdir, req: &ReportRequest) -> Result<PathBuf, StageError> {
    let config = load_config(&workdir.resolve(&req.config))?;
    let table = read_table(&workdir.resolve(&req.similarities))?;
    let mut reports = context_reports(&table, &config)?;
    let baseline = reports[0].clone();
    for other in &req.compare {
        let t = read_table(&workdir.resolve(other))?;
        reports.extend(context_reports(&t, &config)?);
    }

    let dir = workdir
        .resolve(&req.out_dir)
        .join(crate::report::run_dir_name(&config.digest(), req.timestamp));
    let files = write_report_files(&dir, &baseline, &reports).map_err(io_err(&dir))?;
    let named: Vec<(&str, &Path)> = files
        .iter()
        .map(|p| (p.file_name().and_then(|n| n.to_str()).unwrap_or("report"), p.as_path()))
        .collect();
    update_manifest(workdir, &config, &[], Stage::Report, &named)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;

    #[test]
    fn exit_codes() {
        assert_eq!(StageError::Invalid(Vec::new()).exit_code(), 2);
        assert_eq!(StageError::MissingInput("x".into()).exit_code(), 3);
        assert_eq!(StageError::MissingKeys(vec!["k".into()]).exit_code(), 3);
        assert_eq!(StageError::Coverage("c".into()).exit_code(), 3);
        assert_eq!(StageError::TransportExhausted(1).exit_code(), 4);
        let missing = CatalogError::Io {
            path: "nope.json".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(StageError::from(missing).exit_code(), 3);
    }

    #[test]
    fn manifest_verification_detects_drift() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path());
        let out = dir.path().join("matrix.jsonl");
        std::fs::write(&out, "a\n").unwrap();
        let config = AuditConfig::new(Domain::Movie);
        update_manifest(&wd, &config, &[("config", Path::new("c.json"))], Stage::Generate, &[("matrix", &out)]).unwrap();

        let m = RunManifest::load_or_new(&wd.manifest_path(), &config.digest());
        assert_eq!(m.stages.get(&Stage::Generate), Some(&true));
        assert!(m.verify().is_empty());
        std::fs::write(&out, "b\n").unwrap();
        assert_eq!(m.verify().len(), 1);
        std::fs::remove_file(&out).unwrap();
        assert!(m.verify()[0].contains("missing"));

        let other = AuditConfig::new(Domain::Music);
        assert!(RunManifest::load_or_new(&wd.manifest_path(), &other.digest()).stages.is_empty());
    }

    #[test]
    fn missing_config_is_missing_input() {
        let err = load_config(Path::new("/definitely/not/here.json")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
