mod common;

use std::fs;

use common::{planted_config, PLANTED};
use dnd_core::config::AugmentScope;
use dnd_core::pipeline::{run_dissect, DissectOptions, RunManifest, Stage};
use dnd_core::report::{emit_report, ReportFormat};
use dnd_core::selection::{DescriptionFile, ScoringFunction};
use dnd_core::text::contains_term;
use dnd_core::Error;

fn labels(files: &[DescriptionFile]) -> Vec<String> {
    files.iter().flat_map(|f| f.descriptions.iter().map(|d| d.label.clone())).collect()
}

#[test]
fn planted_concepts_are_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted_config(dir.path(), 3);
    let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert_eq!(out.exit_code(), 0);
    let got = labels(&out.descriptions);
    assert_eq!(got.len(), 8);
    for (label, tag) in got.iter().zip(PLANTED) {
        assert!(contains_term(label, tag), "{label} vs {tag}");
    }
    assert!(out.timing.unwrap().seconds_per_neuron >= 0.0);
    assert!(dir.path().join("run/candidates/pool/0.json").exists());
}

#[test]
fn per_neuron_augmentation_and_all_scorers_recover() {
    for scoring in ScoringFunction::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = planted_config(dir.path(), 11);
        cfg.augment_scope = AugmentScope::PerNeuron;
        cfg.scoring = scoring;
        let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
        for (label, tag) in labels(&out.descriptions).iter().zip(PLANTED) {
            assert!(contains_term(label, tag), "{scoring}: {label} vs {tag}");
        }
    }
}

#[test]
fn rerun_is_served_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted_config(dir.path(), 5);
    let first = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert!(first.cache_misses > 0);
    let again = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.cache_misses, 0);
    assert_eq!(first.descriptions, again.descriptions);

    // Dropping the outputs forces the stages to rerun, but every backend
    // answer now comes from the cache.
    fs::remove_dir_all(dir.path().join("run/candidates")).unwrap();
    fs::remove_file(RunManifest::path(&cfg.run_dir)).unwrap();
    let cached = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert!(cached.executed.contains(&Stage::Candidates));
    assert_eq!(cached.cache_misses, 0);
    assert!(cached.cache_hits > 0);
    assert_eq!(first.descriptions, cached.descriptions);
}

#[test]
fn interrupted_runs_resume_to_the_same_result() {
    let straight = tempfile::tempdir().unwrap();
    let cfg = planted_config(straight.path(), 8);
    let reference = run_dissect(&cfg, DissectOptions::default()).unwrap();

    for stop in [Stage::Augment, Stage::Candidates] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_config(dir.path(), 8);
        let partial = run_dissect(&cfg, DissectOptions { stop_after: Some(stop) }).unwrap();
        assert!(partial.descriptions.is_empty());
        assert!(matches!(emit_report(&cfg.run_dir, ReportFormat::Json), Err(Error::IncompleteRun(_))));
        let resumed = run_dissect(&cfg, DissectOptions::default()).unwrap();
        assert!(!resumed.executed.contains(&stop));
        assert_eq!(labels(&resumed.descriptions), labels(&reference.descriptions));
        for (a, b) in resumed.descriptions.iter().zip(&reference.descriptions) {
            for (x, y) in a.descriptions.iter().zip(&b.descriptions) {
                assert_eq!(x.score_table, y.score_table);
                assert_eq!(x.runner_ups, y.runner_ups);
            }
        }
    }
}

#[test]
fn skip_selection_returns_first_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted_config(dir.path(), 4);
    cfg.skip_selection = true;
    let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
    for d in &out.descriptions[0].descriptions {
        let path = dnd_core::pipeline::candidates_path(&cfg.run_dir, &d.neuron);
        let set: dnd_core::concepts::CandidateConceptSet = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        assert_eq!(d.label, set.concepts[0]);
        assert!(d.scoring.is_none());
    }

    // Switching selection back on reuses the candidates.
    cfg.skip_selection = false;
    let full = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert_eq!(full.executed, vec![Stage::Selection]);
}

#[test]
fn changed_parameters_rerun_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted_config(dir.path(), 2);
    run_dissect(&cfg, DissectOptions::default()).unwrap();
    cfg.beta = 2;
    assert_eq!(run_dissect(&cfg, DissectOptions::default()).unwrap().executed, vec![Stage::Selection]);
    cfg.n = 4;
    assert_eq!(
        run_dissect(&cfg, DissectOptions::default()).unwrap().executed,
        vec![Stage::Candidates, Stage::Selection]
    );
}

#[test]
fn failing_neurons_are_reported_and_others_continue() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted_config(dir.path(), 6);
    // n above what the offline summarizer can produce makes every neuron fail.
    cfg.n = 11;
    cfg.neurons = dnd_core::config::NeuronSelection::Spec("0-1".into());
    let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert_eq!(out.exit_code(), 2);
    assert_eq!(out.failures.len(), 2);
    assert!(out.descriptions[0].descriptions.is_empty());
}

#[test]
fn empty_selection_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted_config(dir.path(), 1);
    cfg.neurons = dnd_core::config::NeuronSelection::Spec(String::new());
    let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
    assert!(out.descriptions[0].descriptions.is_empty());
    let files = emit_report(&cfg.run_dir, ReportFormat::Json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&files[0]).unwrap()).unwrap();
    assert_eq!(v["neurons"].as_array().unwrap().len(), 0);
}

#[test]
fn references_are_evaluated_and_reports_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = planted_config(dir.path(), 9);
    cfg.neurons = dnd_core::config::NeuronSelection::Spec("0-3".into());
    let refs: serde_json::Map<String, serde_json::Value> =
        (0..3).map(|i| (format!("pool#{i}"), serde_json::json!([PLANTED[i], format!("{} photo", PLANTED[i])]))).collect();
    let refs_path = dir.path().join("refs.json");
    fs::write(&refs_path, serde_json::to_vec(&refs).unwrap()).unwrap();
    cfg.references = Some(refs_path);

    let out = run_dissect(&cfg, DissectOptions::default()).unwrap();
    let report = out.evaluation.unwrap();
    assert_eq!(report.per_neuron.len(), 3);
    assert_eq!(report.missing, vec![dnd_core::activation::NeuronId::new("pool", 3)]);
    assert_eq!(report.reference_aggregation, "mean");
    assert!(report.means.values().all(|v| (0.0..=1.0 + 1e-9).contains(v)));
    assert!(cfg.run_dir.join("evaluation/report.csv").exists());
    let manifest = RunManifest::load(&cfg.run_dir).unwrap().unwrap();
    assert!(manifest.stages.contains_key(&Stage::Evaluate));

    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Html] {
        let first = emit_report(&cfg.run_dir, format).unwrap();
        let a: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
        let second = emit_report(&cfg.run_dir, format).unwrap();
        let b: Vec<Vec<u8>> = second.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(a, b);
    }
    let html = fs::read_to_string(cfg.run_dir.join("report/index.html")).unwrap();
    assert_eq!(html.matches("data:image/png;base64").count(), 4 * cfg.k);
    let csv = fs::read_to_string(cfg.run_dir.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
