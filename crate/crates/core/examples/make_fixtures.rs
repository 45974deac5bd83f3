//! Regenerates the bundled replay store from the synthetic recommender.
//!
//! ```text
//! cargo run -p faireval-core --example make_fixtures -- [data-dir]
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use faireval::domain::{load_catalogs, AuditConfig};
use faireval::gateway::{run_matrix, Gateway, ProviderSpec, ReplayStore};
use faireval::prompt::{build_prompt_matrix, load_anchor_catalog, TemplateSet};
use faireval::synthetic::SyntheticRecommender;

const OVERLAPS: [(&str, usize); 8] = [
    ("female", 15),
    ("male", 22),
    ("non-binary", 12),
    ("young", 20),
    ("middle-aged", 23),
    ("old", 14),
    ("introverted", 21),
    ("extroverted", 24),
];

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let fixtures = data.join("fixtures");
    let config = AuditConfig::load(&fixtures.join("config.json"))?;
    let (attrs, pers) = load_catalogs(&fixtures.join("catalog.json"))?;
    let templates = TemplateSet::load(&data.join("templates.json"))?;
    let anchors = load_anchor_catalog(&fixtures.join("anchors.csv"), config.domain)?;
    let units = build_prompt_matrix(&anchors, &attrs, &pers, &config, &templates)?;

    let recommender = OVERLAPS.iter().fold(
        SyntheticRecommender::new(config.k, anchors.anchors.iter().map(|a| a.display_name.clone())),
        |r, (term, n)| r.with_overlap(*term, *n),
    );
    let provider = ProviderSpec {
        max_concurrency: 1,
        rate_limit: 1_000_000,
        ..ProviderSpec::replay("fixture", "synthetic-1")
    };
    let gateway = Arc::new(Gateway::with_transport(provider, Arc::new(recommender.into_transport()))?);

    let path = fixtures.join("store.jsonl");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let mut store = ReplayStore::open(&path)?;
    let set = run_matrix(gateway, &units, &config, &mut store).await?;
    println!("{} records written to {}", set.records.len(), path.display());
    Ok(())
}
