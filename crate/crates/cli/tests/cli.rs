use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn faireval(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faireval"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Copies the fixture inputs into a fresh workdir under default names.
fn fixture_workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = data();
    for (from, to) in [
        ("fixtures/config.json", "config.json"),
        ("fixtures/catalog.json", "catalog.json"),
        ("fixtures/anchors.csv", "anchors.csv"),
        ("fixtures/store.jsonl", "store.jsonl"),
        ("templates.json", "templates.json"),
        ("providers.json", "providers.json"),
    ] {
        std::fs::copy(d.join(from), dir.path().join(to)).unwrap();
    }
    dir
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

fn full_pipeline(wd: &Path) -> PathBuf {
    ok(faireval(wd, &["generate"]));
    ok(faireval(wd, &["run", "--provider", "fixture", "--offline"]));
    ok(faireval(wd, &["score", "--provider", "fixture"]));
    let out = ok(faireval(wd, &["report"]));
    let line = String::from_utf8(out.stdout).unwrap();
    PathBuf::from(line.trim().strip_prefix("report written to ").unwrap())
}

#[test]
fn minimal_generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    std::fs::write(wd.join("config.json"), r#"{"domain": "movie"}"#).unwrap();
    std::fs::write(wd.join("catalog.json"), r#"{"attributes": {"gender": ["female", "male"]}}"#).unwrap();
    std::fs::write(wd.join("anchors.csv"), "name\nChristopher Nolan\nGreta Gerwig\n").unwrap();
    std::fs::copy(data().join("templates.json"), wd.join("templates.json")).unwrap();

    ok(faireval(wd, &["generate"]));
    let first = std::fs::read(wd.join("matrix.jsonl")).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 2);
    ok(faireval(wd, &["generate"]));
    assert_eq!(std::fs::read(wd.join("matrix.jsonl")).unwrap(), first);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(wd.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"]["generate"], true);
    assert!(manifest["outputs"]["matrix"]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn invalid_config_exits_2() {
    let dir = fixture_workdir();
    std::fs::write(dir.path().join("catalog.json"), r#"{"attributes": {"religion": ["only"]}}"#).unwrap();
    let out = faireval(dir.path(), &["generate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("attribute needs ≥ 2 values"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_exit_3() {
    let dir = fixture_workdir();
    let wd = dir.path();
    assert_eq!(code(&faireval(wd, &["report"])), 3);
    assert_eq!(code(&faireval(wd, &["run", "--provider", "fixture", "--offline"])), 3);

    ok(faireval(wd, &["generate"]));
    std::fs::write(wd.join("empty.jsonl"), "").unwrap();
    let out = faireval(wd, &["score", "--provider", "fixture", "--store", "empty.jsonl"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn offline_run_reports_missing_keys() {
    let dir = fixture_workdir();
    let wd = dir.path();
    std::fs::write(wd.join("anchors.csv"), "name\nHans Zimmer\nSomeone New\n").unwrap();
    ok(faireval(wd, &["generate"]));
    let out = faireval(wd, &["run", "--provider", "fixture", "--offline"]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("59 cache keys missing"), "{err}");
    assert_eq!(err.lines().filter(|l| l.len() == 64).count(), 59);
}

#[test]
fn unknown_provider_is_a_config_error() {
    let dir = fixture_workdir();
    ok(faireval(dir.path(), &["generate"]));
    assert_eq!(code(&faireval(dir.path(), &["run", "--provider", "nope", "--offline"])), 2);
}

#[test]
fn live_provider_without_credentials_exits_2() {
    let dir = fixture_workdir();
    ok(faireval(dir.path(), &["generate"]));
    let out = Command::new(env!("CARGO_BIN_EXE_faireval"))
        .arg("--workdir")
        .arg(dir.path())
        .args(["run", "--provider", "gpt-4o"])
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("OPENAI_API_KEY"));
}

#[test]
fn replay_pipeline_is_byte_identical() {
    let a = fixture_workdir();
    let b = fixture_workdir();
    let ra = full_pipeline(a.path());
    let rb = full_pipeline(b.path());
    for name in ["report.json", "report.md", "report.csv", "plotdata.csv"] {
        assert_eq!(std::fs::read(ra.join(name)).unwrap(), std::fs::read(rb.join(name)).unwrap(), "{name}");
    }
    let md = std::fs::read_to_string(ra.join("report.md")).unwrap();
    assert!(md.contains("| Metric | Type |"));
    ok(faireval(a.path(), &["verify"]));

    std::fs::write(a.path().join("similarities.csv"), "tampered\n").unwrap();
    assert_eq!(code(&faireval(a.path(), &["verify"])), 3);
}

#[test]
fn excluded_responses_are_counted_and_dropped() {
    let dir = fixture_workdir();
    let wd = dir.path();
    let store = std::fs::read_to_string(wd.join("store.jsonl")).unwrap();
    let mut lines: Vec<serde_json::Value> = store.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let is_variant = |v: &serde_json::Value, term: &str| {
        v["prompt_text"].as_str().unwrap().starts_with(&format!("I am a {term} fan of Hans Zimmer"))
    };
    for rec in lines.iter_mut() {
        if is_variant(rec, "female") {
            rec["response_text"] = "I'm sorry, but I can't make recommendations based on gender.".into();
        } else if is_variant(rec, "old") {
            rec["response_text"] = "Here are some thoughts on film scores in general.".into();
        }
    }
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(wd.join("store.jsonl"), body).unwrap();

    ok(faireval(wd, &["generate"]));
    ok(faireval(wd, &["run", "--provider", "fixture", "--offline"]));
    ok(faireval(wd, &["score", "--provider", "fixture"]));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(wd.join("similarities.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["exclusions"]["refused"], 1);
    assert_eq!(meta["exclusions"]["malformed"], 1);
    let sims = std::fs::read_to_string(wd.join("similarities.csv")).unwrap();
    assert!(!sims.lines().any(|l| l.starts_with("hans-zimmer,gender,female,,none,")));
    assert!(sims.lines().any(|l| l.starts_with("bts,gender,female,,none,")));
    ok(faireval(wd, &["report"]));
}

#[test]
fn compare_spans_both_tables() {
    let dir = fixture_workdir();
    let wd = dir.path();
    let report_dir = full_pipeline(wd);
    let single = std::fs::read_to_string(report_dir.join("plotdata.csv")).unwrap().lines().count();

    std::fs::copy(wd.join("similarities.csv"), wd.join("other.csv")).unwrap();
    std::fs::copy(wd.join("similarities.meta.json"), wd.join("other.meta.json")).unwrap();
    let out = ok(faireval(wd, &["report", "--compare", "other.csv", "--out", "cmp"]));
    let line = String::from_utf8(out.stdout).unwrap();
    let dir = PathBuf::from(line.trim().strip_prefix("report written to ").unwrap());
    let plot = std::fs::read_to_string(dir.join("plotdata.csv")).unwrap();
    assert_eq!(plot.lines().count() - 1, 2 * (single - 1));
    assert!(plot.lines().any(|l| l.starts_with("fixture,typo:0.5:11,en,")));
}

#[test]
fn exhausted_transport_exits_4_and_records_failures() {
    let dir = fixture_workdir();
    let wd = dir.path();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let providers = format!(
        r#"{{"providers": [{{"id": "down", "kind": "openai_chat_compatible", "base_url": "http://127.0.0.1:{port}",
            "model": "m", "rate_limit": 100000, "max_concurrency": 8, "timeout": 2, "max_retries": 0}}]}}"#
    );
    std::fs::write(wd.join("providers.json"), providers).unwrap();
    ok(faireval(wd, &["generate"]));
    let out = faireval(wd, &["run", "--provider", "down", "--store", "down.jsonl"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let store = std::fs::read_to_string(wd.join("down.jsonl")).unwrap();
    assert_eq!(store.lines().count(), 177);
    assert!(store.lines().all(|l| l.contains(r#""status":"transport_error""#)));
}
