use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dnd_core::backends::MockWorld;
use dnd_core::config::{ModelSpec, NeuronSelection, RunConfig};
use dnd_core::dataset::{ProbeDataset, ProbeImage};
use dnd_core::raster::ImagePayload;

const TAGS: [&str; 3] = ["dog", "car", "boat"];

fn dnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnd")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(root: &Path) -> String {
    let world = MockWorld::default();
    let mut images = Vec::new();
    for tag in TAGS.iter().chain(["sky"].iter()) {
        for i in 0..5u32 {
            let x0 = 2 + 4 * i;
            let img = world.render_regions(40, 40, &[(tag, x0, 6, x0 + 18, 6 + 16 + i)]);
            images.push(ProbeImage::original(format!("{tag}_{i}"), ImagePayload::encode_png(&img)));
        }
    }
    ProbeDataset::new("cli", images).unwrap().save_dir(&root.join("probe")).unwrap();
    let cfg = RunConfig {
        model: ModelSpec::ColorDetector { name: "cli".into(), tags: TAGS.iter().map(|s| s.to_string()).collect(), pool: 4 },
        layers: vec!["pool".into()],
        neurons: NeuronSelection::Spec("all".into()),
        datasets: vec![root.join("probe")],
        k: 5,
        n: 3,
        q: 4,
        beta: 2,
        t: 4,
        run_dir: root.join("run"),
        ..Default::default()
    };
    let path = root.join("run.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn dissect_then_analyse() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = dnd(&["dissect", "--config", &config, "--scoring", "topk-ip"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for (i, tag) in TAGS.iter().enumerate() {
        let line = text.lines().find(|l| l.starts_with(&format!("pool#{i}\t"))).unwrap();
        assert!(line.contains(tag), "{line}");
    }

    let out = dnd(&["report", "--run-dir", run_s, "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(run.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + TAGS.len());

    let out = dnd(&["cluster", "--run-dir", run_s, "--phi", "0.8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("analysis/clusters.json").exists());

    let out = dnd(&["term-freq", "--run-dir", run_s, "--terms", "dog,zebra"]);
    assert_eq!(stdout(&out), format!("dog\t{:.4}\nzebra\t0.0000\n", 1.0 / 3.0));

    let mask = tmp.path().join("mask.json");
    let out = dnd(&["prune-mask", "--run-dir", run_s, "--layer", "pool", "--terms", "car", "--out", mask.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&mask).unwrap()).unwrap();
    assert_eq!(m["indices"], serde_json::json!([1]));

    let refs = tmp.path().join("refs.json");
    let labels: serde_json::Value = serde_json::from_slice(&fs::read(run.join("descriptions/pool.json")).unwrap()).unwrap();
    let mut map = serde_json::Map::new();
    for d in labels["descriptions"].as_array().unwrap() {
        let n = &d["neuron"];
        map.insert(format!("{}#{}", n["layer"].as_str().unwrap(), n["index"]), d["label"].clone());
    }
    fs::write(&refs, serde_json::to_vec(&map).unwrap()).unwrap();
    let eval_dir = tmp.path().join("eval");
    let out = dnd(&[
        "evaluate",
        "--descriptions",
        run.join("descriptions/pool.json").to_str().unwrap(),
        "--references",
        refs.to_str().unwrap(),
        "--metrics",
        "embed_cos_a,pair_f1",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(eval_dir.join("evaluation.json")).unwrap()).unwrap();
    assert!((rep["means"]["embed_cos_a"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!((rep["means"]["pair_f1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn skip_selection_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let out = dnd(&["dissect", "--config", &config, "--skip-selection", "--neurons", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cand: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("run/candidates/pool/0.json")).unwrap()).unwrap();
    let first = cand["concepts"][0].as_str().unwrap();
    assert_eq!(stdout(&out), format!("pool#0\t{first}\n"));
}

#[test]
fn partial_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let mut cfg = RunConfig::load(Path::new(&config)).unwrap();
    cfg.n = 11;
    cfg.save(Path::new(&config)).unwrap();
    let out = dnd(&["dissect", "--config", &config, "--skip-selection"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed pool#0"));
}

#[test]
fn fatal_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(dnd(&["dissect", "--config", tmp.path().join("nope.json").to_str().unwrap()]).status.code(), Some(1));
    let out = dnd(&["report", "--run-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ood_auroc_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("s.json");
    fs::write(&p, r#"{"scores":[1,2,3,4],"labels":[0,0,1,1]}"#).unwrap();
    assert_eq!(stdout(&dnd(&["ood-auroc", "--scores", p.to_str().unwrap()])), "1.000000\n");
    fs::write(&p, r#"{"scores":[1,2],"labels":[1,1]}"#).unwrap();
    assert_eq!(dnd(&["ood-auroc", "--scores", p.to_str().unwrap()]).status.code(), Some(1));
}
