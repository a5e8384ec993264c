#![allow(dead_code)]

use std::path::Path;

use dnd_core::backends::MockWorld;
use dnd_core::config::{ModelSpec, NeuronSelection, RunConfig};
use dnd_core::dataset::{ProbeDataset, ProbeImage};
use dnd_core::raster::ImagePayload;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PLANTED: [&str; 8] = ["dog", "car", "boat", "tree", "striped", "fishing", "red", "snow"];
pub const DISTRACTORS: [&str; 3] = ["sky", "grass", "sand"];

/// Probe images: each carries one tag in a random rectangle on a gray
/// background. Every planted tag appears on `per_tag` images.
pub fn probe_set(seed: u64, per_tag: usize) -> ProbeDataset {
    let world = MockWorld::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for tag in PLANTED.iter().chain(DISTRACTORS.iter()) {
        for i in 0..per_tag {
            let (w, h) = (48u32, 48u32);
            let bw = rng.gen_range(12..30);
            let bh = rng.gen_range(12..30);
            let x0 = rng.gen_range(0..w - bw);
            let y0 = rng.gen_range(0..h - bh);
            let img = world.render_regions(w, h, &[(tag, x0, y0, x0 + bw, y0 + bh)]);
            images.push(ProbeImage::original(format!("{tag}_{i:02}"), ImagePayload::encode_png(&img)));
        }
    }
    ProbeDataset::new(format!("planted-{seed}"), images).unwrap()
}

/// A run over the planted-concept detector with mock backends.
pub fn planted_config(root: &Path, seed: u64) -> RunConfig {
    let data = root.join("probe");
    if !data.exists() {
        probe_set(seed, 6).save_dir(&data).unwrap();
    }
    RunConfig {
        model: ModelSpec::ColorDetector {
            name: "planted".into(),
            tags: PLANTED.iter().map(|s| s.to_string()).collect(),
            pool: 4,
        },
        layers: vec!["pool".into()],
        neurons: NeuronSelection::Spec("all".into()),
        datasets: vec![data],
        k: 10,
        n: 5,
        q: 6,
        beta: 3,
        t: 6,
        seed,
        run_dir: root.join("run"),
        ..Default::default()
    }
}
