use super::*;
use crate::fixtures;
use crate::metrics::KPolicy;

fn config(approaches: &[Approach], pads: &[usize], runs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(DataPaths::default());
    c.approaches = approaches.to_vec();
    c.pad_sizes = pads.to_vec();
    c.runs = runs;
    c.min_occurrences = 1;
    c
}

#[test]
fn minimal_grid_has_one_cell() {
    let d = fixtures::lexical_overlap();
    let mut c = config(&[Approach::Random], &[0], 1);
    c.eval_split = EvalSplit::All;
    let report = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    assert_eq!(report.cells.len(), 1);
    let cell = &report.cells[0];
    assert_eq!(cell.summary.runs, 1);
    assert_eq!(cell.summary.skipped_queries, 0);
    assert_eq!(cell.summary.scored_queries, 30);
}

#[test]
fn grid_is_complete_and_text_beats_random() {
    let d = fixtures::lexical_overlap();
    let c = config(&[Approach::Random, Approach::MostPopular, Approach::Text], &[0, 5, 10, 20], 2);
    let report = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    assert_eq!(report.cells.len(), 12);
    for &pad in &c.pad_sizes {
        for &a in &c.approaches {
            assert_eq!(report.cells.iter().filter(|x| x.approach == a && x.pad_size == pad).count(), 1);
        }
        let text = report.mean(Approach::Text, pad).unwrap();
        let random = report.mean(Approach::Random, pad).unwrap();
        assert!(text > random, "pad {pad}: text {text} <= random {random}");
    }
    assert_eq!(report.label_stats.len(), 4);
    assert!(report.provenance.providers.contains_key("embed_text"));
}

#[test]
fn report_is_deterministic() {
    let d = fixtures::lexical_overlap();
    let mut c = config(&[Approach::Random, Approach::TextPlusImgGen, Approach::CrossEncoder], &[0, 5], 2);
    c.preprocessing = vec![false, true];
    let a = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    c.jobs = Some(1);
    let b = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    c.jobs = None;
    assert_eq!(a.cells, b.cells);
    let again = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    assert_eq!(a.to_json(), again.to_json());
    assert_eq!(a.cells.len(), 3 * 2 * 2);
    assert!(a.provenance.prompt_hashes.contains_key("preprocess"));
}

#[test]
fn padding_is_shared_across_approaches() {
    let d = fixtures::lexical_overlap();
    let mut c = config(&[Approach::Random, Approach::Text], &[10], 1);
    c.eval_split = EvalSplit::All;
    let report = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    let one = config(&[Approach::Text], &[10], 1);
    let mut one = one;
    one.eval_split = EvalSplit::All;
    let alone = run_experiment_on(&one, &d, &RunContext::stubs()).unwrap();
    assert_eq!(report.cell(Approach::Text, 10, false), alone.cell(Approach::Text, 10, false));
}

#[test]
fn pinned_padding_uses_one_seed() {
    let mut c = config(&[Approach::Random], &[5], 3);
    c.resample_padding = false;
    let seeds: BTreeSet<u64> = (0..3).map(|r| pad_seed(&c, 5, r)).collect();
    assert_eq!(seeds.len(), 1);
    c.resample_padding = true;
    let seeds: BTreeSet<u64> = (0..3).map(|r| pad_seed(&c, 5, r)).collect();
    assert_eq!(seeds.len(), 3);
    assert_ne!(ranker_seed(&c, Approach::Random, 5, 0, 0), ranker_seed(&c, Approach::Random, 5, 0, 1));
}

#[test]
fn missing_images_abort_before_ranking() {
    let d = fixtures::standard(1);
    let c = config(&[Approach::Random, Approach::ImgGen], &[0], 1);
    match run_experiment_on(&c, &d, &RunContext::stubs()) {
        Err(RunnerError::Unresolvable { approach, .. }) => assert_eq!(approach, Approach::ImgGen),
        other => panic!("{:?}", other.map(|r| r.cells.len())),
    }
    let c = config(&[Approach::ImgDirect], &[0], 1);
    let err = run_experiment_on(&c, &d, &RunContext::stubs()).map(|_| ()).unwrap_err();
    assert!(matches!(err, RunnerError::Unresolvable { approach: Approach::ImgDirect, .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn popularity_without_train_split_is_unresolvable() {
    let d = fixtures::spelling(false);
    let c = config(&[Approach::MostPopular], &[0], 1);
    assert!(matches!(
        run_experiment_on(&c, &d, &RunContext::stubs()),
        Err(RunnerError::Unresolvable { .. })
    ));
}

#[test]
fn every_approach_runs_under_stubs() {
    let d = fixtures::lexical_overlap();
    let mut c = config(&Approach::ALL, &[0, 5], 1);
    c.k = KPolicy::Cutoff(5);
    let report = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    assert_eq!(report.cells.len(), Approach::ALL.len() * 2);
    for cell in &report.cells {
        assert!((0.0..=1.0).contains(&cell.summary.mean));
    }
}

#[test]
fn backends_tie_on_clean_text_and_bi_encoder_wins_on_misspellings() {
    let c = config(&[Approach::BiEncoder, Approach::CrossEncoder], &[0], 1);
    let clean = run_experiment_on(&c, &fixtures::spelling(false), &RunContext::stubs()).unwrap();
    let bi = clean.mean(Approach::BiEncoder, 0).unwrap();
    let cross = clean.mean(Approach::CrossEncoder, 0).unwrap();
    assert_eq!(bi, cross);
    assert_eq!(bi, 1.0);

    let noisy = run_experiment_on(&c, &fixtures::spelling(true), &RunContext::stubs()).unwrap();
    let bi = noisy.mean(Approach::BiEncoder, 0).unwrap();
    let cross = noisy.mean(Approach::CrossEncoder, 0).unwrap();
    assert!(bi > cross, "bi {bi} <= cross {cross}");
}

#[test]
fn emitted_files() {
    let d = fixtures::lexical_overlap();
    let c = config(&[Approach::Random, Approach::Text], &[0, 5, 10, 20], 1);
    let report = run_experiment_on(&c, &d, &RunContext::stubs()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    assert_eq!(files.len(), 5);

    let table = render_mean_table(&report);
    let numeric = table
        .split_whitespace()
        .filter(|t| t.parse::<f64>().is_ok() && t.contains('.'))
        .count();
    assert_eq!(numeric, 8);

    let plot: Vec<PlotSeries> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plot_data.json")).unwrap()).unwrap();
    assert_eq!(plot.len(), 2);
    assert!(plot.iter().all(|s| s.points.len() == 4));

    let jsonl = std::fs::read_to_string(dir.path().join("cells.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 8);

    let back = ExperimentReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, report);
    let snapshot = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(snapshot, report.config);

    let mut empty = report.clone();
    empty.cells.clear();
    assert!(matches!(emit_report(&empty, dir.path()), Err(RunnerError::EmptyGrid)));
}

#[test]
fn compare_backends_single_pad_gives_two_cells() {
    let dir = tempfile::tempdir().unwrap();
    let d = fixtures::spelling(false);
    crate::catalog::write_dataset(dir.path(), &d).unwrap();
    let mut c = config(&[Approach::Random], &[20], 1);
    c.data = DataPaths::in_dir(dir.path(), "jsonl");
    let report = compare_similarity_backends(&c).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.notes.len(), 1);
}
