use std::path::Path;
use std::process::{Command, Output};

use esci_eval::catalog::write_dataset;
use esci_eval::fixtures;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_esci-eval"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    let body = format!(
        "pad_sizes = [0, 10]\napproaches = [\"random\", \"text\"]\nruns = 1\nmin_occurrences = 1\n{extra}\n[data]\nproducts = \"{}\"\nqueries = \"{}\"\njudgments = \"{}\"\n",
        s(&data.join("products.jsonl")),
        s(&data.join("queries.jsonl")),
        s(&data.join("judgments.jsonl")),
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_dataset(&raw, &fixtures::lexical_overlap()).unwrap();
    let cache = tmp.path().join("cache");
    let d = |name: &str| tmp.path().join(name);

    ok(&[
        "ingest",
        "--products",
        s(&raw.join("products.jsonl")),
        "--queries",
        s(&raw.join("queries.jsonl")),
        "--judgments",
        s(&raw.join("judgments.jsonl")),
        "--out-dir",
        s(&d("ingested")),
    ]);
    ok(&["filter", "--input", s(&d("ingested")), "--min-occurrences", "1", "--out-dir", s(&d("filtered"))]);
    let padded = ok(&[
        "pad",
        "--input",
        s(&d("filtered")),
        "--pad-size",
        "10",
        "--seed",
        "7",
        "--out-dir",
        s(&d("padded")),
    ]);
    let table = String::from_utf8(padded.stdout).unwrap();
    assert!(table.contains("E/Q Ratio"), "{table}");
    let again = ok(&[
        "pad",
        "--input",
        s(&d("filtered")),
        "--pad-size",
        "10",
        "--seed",
        "7",
        "--out-dir",
        s(&d("padded2")),
    ]);
    assert!(again.status.success());
    assert_eq!(
        std::fs::read(d("padded").join("judgments.jsonl")).unwrap(),
        std::fs::read(d("padded2").join("judgments.jsonl")).unwrap()
    );

    ok(&[
        "enrich",
        "--input",
        s(&d("padded")),
        "--captions",
        "--tags",
        "--cache-dir",
        s(&cache),
        "--out-dir",
        s(&d("enriched")),
    ]);
    let products = std::fs::read_to_string(d("enriched").join("products.jsonl")).unwrap();
    assert!(products.contains("caption("), "{products}");

    ok(&["preprocess-queries", "--input", s(&d("enriched")), "--cache-dir", s(&cache), "--out-dir", s(&d("pq"))]);
    assert_eq!(
        std::fs::read_to_string(d("pq").join("processed_queries.jsonl")).unwrap().lines().count(),
        30
    );

    ok(&[
        "embed",
        "--input",
        s(&d("enriched")),
        "--mode",
        "text_plus_img_gen",
        "--cache-dir",
        s(&cache),
        "--out-dir",
        s(&d("emb")),
    ]);
    assert!(d("emb").join("embeddings_text_plus_img_gen.jsonl").exists());

    ok(&["rank", "--input", s(&d("enriched")), "--approach", "text", "--out-dir", s(&d("ranked"))]);
    let evaluated = ok(&[
        "evaluate",
        "--input",
        s(&d("enriched")),
        "--rankings",
        s(&d("ranked").join("rankings.jsonl")),
        "--out-dir",
        s(&d("eval")),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&evaluated.stdout).unwrap();
    assert!(summary["mean_ndcg"].as_f64().unwrap() > 0.9, "{summary}");
}

#[test]
fn run_then_report_reproduces_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, &fixtures::lexical_overlap()).unwrap();
    let config = write_config(tmp.path(), &data, "");
    let out = tmp.path().join("out");
    let first = ok(&["run", "--config", s(&config), "--out-dir", s(&out), "--jobs", "2"]);
    for f in ["results.txt", "cells.jsonl", "report.json", "plot_data.json", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let again = tmp.path().join("again");
    let second = ok(&["run", "--config", s(&out.join("config.toml")), "--out-dir", s(&again)]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(
        std::fs::read(out.join("report.json")).unwrap(),
        std::fs::read(again.join("report.json")).unwrap()
    );

    let rendered = ok(&["report", "--input", s(&out.join("report.json")), "--out-dir", s(&tmp.path().join("re"))]);
    assert_eq!(rendered.stdout, first.stdout);

    let compared = ok(&["run", "--compare-backends", "--config", s(&config), "--out-dir", s(&tmp.path().join("cmp"))]);
    let text = String::from_utf8(compared.stdout).unwrap();
    assert!(text.contains("bi_encoder") && text.contains("cross_encoder"), "{text}");
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();

    // Usage errors.
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "runs = 0\n[data]\nproducts=\"a\"\nqueries=\"b\"\njudgments=\"c\"\n").unwrap();
    assert_eq!(run(&["run", "--config", s(&bad)]).status.code(), Some(1));

    // Data errors.
    let missing = write_config(tmp.path(), &tmp.path().join("absent"), "");
    assert_eq!(run(&["run", "--config", s(&missing)]).status.code(), Some(2));

    // Provider errors: nothing listens on the endpoint.
    let data = tmp.path().join("data");
    write_dataset(&data, &fixtures::lexical_overlap()).unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let http = write_config(
        tmp.path(),
        &data,
        &format!(
            "[providers.embed_text]\nkind = \"http\"\nbase_url = \"http://127.0.0.1:{port}\"\nprovider_id = \"p\"\nmodel_id = \"m\"\ntimeout_ms = 2000\nretry = {{ max_attempts = 1, initial_backoff_ms = 1, multiplier = 1.0 }}\n"
        ),
    );
    let out = run(&["run", "--config", s(&http), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
