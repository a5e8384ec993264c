use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dnd_core::activation::{record_activations, NeuronId, SummaryMethod};
use dnd_core::analysis::concept_similarity;
use dnd_core::backends::{MockEmbedder, MockImageGenerator, MockWorld};
use dnd_core::concepts::CandidateConceptSet;
use dnd_core::config::ModelSpec;
use dnd_core::crop::{augment_probe_set, CropParams};
use dnd_core::dataset::{ProbeDataset, ProbeImage};
use dnd_core::raster::ImagePayload;
use dnd_core::selection::{select_concept, Provenance, SelectionParams};
use dnd_core::Exec;

const TAGS: [&str; 8] = ["dog", "car", "boat", "tree", "striped", "fishing", "red", "snow"];

fn probe(world: &MockWorld, per_tag: u32) -> ProbeDataset {
    let mut images = Vec::new();
    for (t, tag) in TAGS.iter().enumerate() {
        for i in 0..per_tag {
            let x0 = (i * 7 + t as u32 * 3) % 30;
            let y0 = (i * 5 + t as u32 * 11) % 30;
            let img = world.render_regions(64, 64, &[(tag, x0, y0, x0 + 24, y0 + 20)]);
            images.push(ProbeImage::original(format!("{tag}_{i:03}"), ImagePayload::encode_png(&img)));
        }
    }
    ProbeDataset::new("bench", images).unwrap()
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn benches(c: &mut Criterion) {
    let world = MockWorld::default();
    let model = ModelSpec::ColorDetector {
        name: "bench".into(),
        tags: TAGS.iter().map(|s| s.to_string()).collect(),
        pool: 4,
    }
    .build(&world)
    .unwrap();
    let data = probe(&world, 16);
    let neurons: Vec<NeuronId> = (0..TAGS.len()).map(|i| NeuronId::new("pool", i)).collect();
    let store = record_activations(model.as_ref(), &data, "pool", Exec::Sequential).unwrap();

    let mut g = c.benchmark_group("record_activations");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| record_activations(model.as_ref(), &data, "pool", exec).unwrap())
        });
    }
    g.finish();

    let params = CropParams { alpha: 3, iou_limit: 0.4, min_region_px: 4 };
    let mut g = c.benchmark_group("augment_probe_set");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| augment_probe_set(&data, &store, &neurons, &params, 10, SummaryMethod::SpatialMean, exec).unwrap())
        });
    }
    g.finish();

    let embedder = MockEmbedder::new(world.clone());
    let sets: Vec<(NeuronId, Vec<String>)> = (0..64)
        .map(|i| {
            let labels = (0..5).map(|j| format!("{} {}", TAGS[(i + j) % 8], TAGS[(i * 3 + j) % 8])).collect();
            (NeuronId::new("pool", i), labels)
        })
        .collect();
    let mut g = c.benchmark_group("concept_similarity");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| concept_similarity(&sets, &embedder, exec).unwrap())
        });
    }
    g.finish();

    let generator = MockImageGenerator::new(world.clone());
    let candidates = CandidateConceptSet {
        neuron: NeuronId::new("pool", 0),
        concepts: ["dog", "dog objects", "car", "boat", "tree"].iter().map(|s| s.to_string()).collect(),
        captions: Vec::new(),
        skipped: Vec::new(),
        config_fingerprint: String::new(),
    };
    let top: Vec<ImagePayload> = data.images()[..10].iter().map(|i| i.payload.clone()).collect();
    let sel = SelectionParams { q: 10, beta: 5, t: 10, ..Default::default() };
    let mut g = c.benchmark_group("select_concept");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                select_concept(&candidates, &top, model.as_ref(), &generator, &embedder, &sel, Provenance::default(), exec)
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = pipeline;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(pipeline);
