//! Resumable batch runs: record activations and augment the probe set,
//! generate candidates, select the best concept, and optionally evaluate.
//!
//! Every stage writes its artifacts under the run directory and is marked
//! complete in `manifest.json` together with a fingerprint of the
//! configuration it depends on, so a rerun skips finished stages and redoes
//! any whose inputs changed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::activation::{record_activations, top_k_images_where, ActivationStore, NeuronId, TargetModel, ACTIVATIONS_DIR};
use crate::backends::ContentCache;
use crate::concepts::{describe_candidates, CandidateConceptSet};
use crate::config::{AugmentScope, Backends, RunConfig};
use crate::crop::augment_probe_set;
use crate::dataset::ProbeDataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_against_references, Metric, MetricBackends, ReferenceSet, SimilarityReport};
use crate::exec::Exec;
use crate::selection::{select_concept, DescriptionFile, NeuronDescription, Provenance};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CANDIDATES_DIR: &str = "candidates";
pub const AUGMENT_DIR: &str = "augment";
pub const EVALUATION_DIR: &str = "evaluation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Augment,
    Candidates,
    Selection,
    Evaluate,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Augment, Stage::Candidates, Stage::Selection, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Augment => "augment",
            Stage::Candidates => "candidates",
            Stage::Selection => "selection",
            Stage::Evaluate => "evaluate",
        }
    }

    fn fingerprint(self, cfg: &RunConfig) -> String {
        match self {
            Stage::Augment => cfg.augment_fingerprint(),
            Stage::Candidates => cfg.candidates_fingerprint(),
            Stage::Selection => cfg.selection_fingerprint(),
            Stage::Evaluate => cfg.evaluate_fingerprint(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronFailure {
    pub neuron: NeuronId,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub neurons: usize,
    pub seconds_total: f64,
    pub seconds_per_neuron: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub model_fingerprint: String,
    pub backend_ids: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageRecord>,
    #[serde(default)]
    pub failures: Vec<NeuronFailure>,
    #[serde(default)]
    pub timing: Option<Timing>,
    pub created_at: u64,
    pub updated_at: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let p = Self::path(run_dir);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    pub fn save(&mut self, run_dir: &Path) -> Result<()> {
        self.updated_at = now();
        fs::create_dir_all(run_dir)?;
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, Self::path(run_dir))?;
        Ok(())
    }

    pub fn is_done(&self, stage: Stage, fingerprint: &str) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.fingerprint == fingerprint)
    }

    /// Stages that must be complete for a finished run, in order, that are not.
    pub fn missing_stages(&self, needs_evaluate: bool) -> Vec<String> {
        Stage::ORDER
            .iter()
            .filter(|&&s| s != Stage::Evaluate || needs_evaluate)
            .filter(|s| !self.stages.contains_key(s))
            .map(|s| s.name().to_string())
            .collect()
    }

    fn complete(&mut self, stage: Stage, fingerprint: String) {
        self.stages.insert(stage, StageRecord { fingerprint, completed_at: now() });
    }

    /// Forgets `stage` and everything after it.
    fn reopen(&mut self, stage: Stage) {
        self.stages.retain(|s, _| *s < stage);
        self.failures.retain(|f| f.stage < stage);
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DissectOptions {
    /// Stop once this stage is complete (used to split long runs).
    pub stop_after: Option<Stage>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub descriptions: Vec<DescriptionFile>,
    pub failures: Vec<NeuronFailure>,
    pub evaluation: Option<SimilarityReport>,
    pub timing: Option<Timing>,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Stages this invocation actually ran.
    pub executed: Vec<Stage>,
}

impl RunOutcome {
    /// 0 when every neuron was described, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Everything a stage needs, built once per invocation.
struct Ctx<'a> {
    cfg: &'a RunConfig,
    run_dir: &'a Path,
    model: Box<dyn TargetModel>,
    backends: Backends,
    exec: Exec,
}

/// Probe images and activations of one layer after augmentation.
struct LayerState {
    dataset: ProbeDataset,
    store: ActivationStore,
    neurons: Vec<NeuronId>,
}

pub fn candidates_path(run_dir: &Path, neuron: &NeuronId) -> PathBuf {
    run_dir.join(CANDIDATES_DIR).join(&neuron.layer).join(format!("{}.json", neuron.index))
}

fn originals_dir(run_dir: &Path, layer: &str) -> PathBuf {
    run_dir.join(ACTIVATIONS_DIR).join(layer)
}

fn crops_dir(run_dir: &Path, layer: &str) -> PathBuf {
    run_dir.join(AUGMENT_DIR).join(layer).join("crops")
}

fn crop_activations_dir(run_dir: &Path, layer: &str) -> PathBuf {
    run_dir.join(AUGMENT_DIR).join(layer).join(ACTIVATIONS_DIR)
}

impl Ctx<'_> {
    fn neurons(&self, layer: &str) -> Result<Vec<NeuronId>> {
        let channels = self.model.channels(layer)?;
        Ok(self.cfg.neurons.resolve(channels)?.into_iter().map(|i| NeuronId::new(layer, i)).collect())
    }

    /// Activations of the original probe images, reusing a saved store
    /// recorded from the same images and model.
    fn original_store(&self, dataset: &ProbeDataset, layer: &str) -> Result<ActivationStore> {
        let dir = originals_dir(self.run_dir, layer);
        let digest = dataset.digest();
        let fp = self.model.fingerprint();
        if let Ok(index) = ActivationStore::read_index(&dir) {
            if index.dataset_digest == digest && index.model_fingerprint == fp && index.summary_method == self.cfg.summary {
                return Ok(ActivationStore::load(&dir)?.0);
            }
        }
        let store = record_activations(&self.model, dataset, layer, self.exec)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        store.save(&dir, self.cfg.shard_size, &digest, &fp, self.cfg.summary)?;
        Ok(store)
    }

    fn run_augment(&self, originals: &ProbeDataset) -> Result<()> {
        for layer in &self.cfg.layers {
            let store = self.original_store(originals, layer)?;
            let (crops_dir, acts_dir) = (crops_dir(self.run_dir, layer), crop_activations_dir(self.run_dir, layer));
            for d in [&crops_dir, &acts_dir] {
                if d.exists() {
                    fs::remove_dir_all(d)?;
                }
            }
            if !self.cfg.augment {
                continue;
            }
            let neurons = self.neurons(layer)?;
            let augmented = augment_probe_set(
                originals,
                &store,
                &neurons,
                &self.cfg.crop_params(),
                self.cfg.crop_k(),
                self.cfg.summary,
                self.exec,
            )?;
            let crops: Vec<_> = augmented.images().iter().filter(|i| i.crop.is_some()).cloned().collect();
            log::info!("{layer}: {} attention crops from {} neurons", crops.len(), neurons.len());
            if crops.is_empty() {
                continue;
            }
            let crop_set = ProbeDataset::new(format!("{}-crops-{layer}", originals.name()), crops)?;
            crop_set.save_dir(&crops_dir)?;
            let crop_store = record_activations(&self.model, &crop_set, layer, self.exec)?;
            crop_store.save(&acts_dir, self.cfg.shard_size, &crop_set.digest(), &self.model.fingerprint(), self.cfg.summary)?;
        }
        Ok(())
    }

    fn layer_state(&self, originals: &ProbeDataset, layer: &str) -> Result<LayerState> {
        let mut store = self.original_store(originals, layer)?;
        let mut dataset = originals.clone();
        let cdir = crops_dir(self.run_dir, layer);
        if self.cfg.augment && cdir.exists() {
            let crops = ProbeDataset::load_dir(&cdir)?;
            let (crop_store, _) = ActivationStore::load(&crop_activations_dir(self.run_dir, layer))?;
            dataset = dataset.extended(crops.images().to_vec())?;
            store.extend(crop_store)?;
        }
        Ok(LayerState { dataset, store, neurons: self.neurons(layer)? })
    }

    fn candidates_for(&self, st: &LayerState, neuron: &NeuronId, crop_owner: &HashMap<String, NeuronId>) -> Result<CandidateConceptSet> {
        let path = candidates_path(self.run_dir, neuron);
        let fp = self.cfg.candidates_fingerprint();
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(set) = serde_json::from_slice::<CandidateConceptSet>(&bytes) {
                if set.config_fingerprint == fp && set.neuron == *neuron {
                    return Ok(set);
                }
            }
        }
        let keep = |id: &str| match self.cfg.augment_scope {
            AugmentScope::Global => true,
            AugmentScope::PerNeuron => crop_owner.get(id).is_none_or(|owner| owner == neuron),
        };
        let topk = top_k_images_where(&st.store, neuron, self.cfg.k, self.cfg.summary, keep)?;
        let set = describe_candidates(
            &topk,
            &st.dataset,
            &self.backends.captioner,
            &self.backends.summarizer,
            self.cfg.n,
            self.cfg.temperature,
            &fp,
            self.exec,
        )?;
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&path, serde_json::to_vec_pretty(&set)?)?;
        Ok(set)
    }

    fn run_candidates(&self, originals: &ProbeDataset) -> Result<Vec<NeuronFailure>> {
        let mut failures = Vec::new();
        for layer in &self.cfg.layers {
            let st = self.layer_state(originals, layer)?;
            let crop_owner: HashMap<String, NeuronId> = st
                .dataset
                .images()
                .iter()
                .filter_map(|i| i.crop.as_ref().map(|c| (i.id.clone(), c.neuron.clone())))
                .collect();
            let results = self.exec.map(&st.neurons, |n| self.candidates_for(&st, n, &crop_owner));
            for (n, r) in st.neurons.iter().zip(results) {
                if let Err(e) = r {
                    log::warn!("{n}: candidate generation failed: {e}");
                    failures.push(NeuronFailure { neuron: n.clone(), stage: Stage::Candidates, error: e.to_string() });
                }
            }
        }
        Ok(failures)
    }

    fn describe(&self, st: &LayerState, set: &CandidateConceptSet, provenance: Provenance) -> Result<NeuronDescription> {
        if self.cfg.skip_selection {
            return NeuronDescription::first_candidate(set, provenance);
        }
        let top: Vec<_> = set
            .captions
            .iter()
            .filter_map(|c| st.dataset.get(&c.image_id).map(|i| i.payload.clone()))
            .collect();
        select_concept(
            set,
            &top,
            &self.model,
            &self.backends.generator,
            &self.backends.embedder,
            &self.cfg.selection_params(),
            provenance,
            self.exec,
        )
    }

    fn run_selection(&self, originals: &ProbeDataset, skip: &[NeuronId]) -> Result<(Vec<DescriptionFile>, Vec<NeuronFailure>)> {
        let provenance = Provenance {
            config_fingerprint: self.cfg.selection_fingerprint(),
            backend_ids: self.backends.ids().into_values().collect(),
        };
        let mut files = Vec::new();
        let mut failures = Vec::new();
        for layer in &self.cfg.layers {
            let st = self.layer_state(originals, layer)?;
            let todo: Vec<&NeuronId> = st.neurons.iter().filter(|n| !skip.contains(n)).collect();
            let results = self.exec.map(&todo, |n| {
                let set: CandidateConceptSet = serde_json::from_slice(&fs::read(candidates_path(self.run_dir, n))?)?;
                self.describe(&st, &set, provenance.clone())
            });
            let mut descs = Vec::new();
            for (n, r) in todo.into_iter().zip(results) {
                match r {
                    Ok(d) => descs.push(d),
                    Err(e) => {
                        log::warn!("{n}: concept selection failed: {e}");
                        failures.push(NeuronFailure { neuron: n.clone(), stage: Stage::Selection, error: e.to_string() });
                    }
                }
            }
            let file = DescriptionFile::new(layer.clone(), descs);
            file.write(&DescriptionFile::path(self.run_dir, layer))?;
            files.push(file);
        }
        Ok((files, failures))
    }

    fn run_evaluate(&self, refs_path: &Path, files: &[DescriptionFile]) -> Result<SimilarityReport> {
        let refs = ReferenceSet::load(refs_path)?;
        let descs = description_pairs(files);
        let backends = MetricBackends {
            embed_a: self.backends.embedder.as_ref(),
            embed_b: self.backends.embedder_b.as_ref(),
            pair: self.backends.pair_scorer.as_ref(),
        };
        let report = evaluate_against_references(&descs, &refs, &Metric::ALL, &backends, self.exec)?;
        report.write(&self.run_dir.join(EVALUATION_DIR), "report")?;
        Ok(report)
    }
}

/// `(neuron, label)` for every description in `files`.
pub fn description_pairs(files: &[DescriptionFile]) -> Vec<(NeuronId, String)> {
    files.iter().flat_map(|f| f.descriptions.iter().map(|d| (d.neuron.clone(), d.label.clone()))).collect()
}

fn read_descriptions(run_dir: &Path, layers: &[String]) -> Result<Vec<DescriptionFile>> {
    layers.iter().map(|l| DescriptionFile::read(&DescriptionFile::path(run_dir, l))).collect()
}

/// Runs (or resumes) the whole pipeline described by `cfg`.
pub fn run_dissect(cfg: &RunConfig, opts: DissectOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let exec = cfg.exec();
    exec.scoped(cfg.workers, || run_inner(cfg, opts, exec))
}

fn run_inner(cfg: &RunConfig, opts: DissectOptions, exec: Exec) -> Result<RunOutcome> {
    let run_dir = cfg.run_dir.as_path();
    fs::create_dir_all(run_dir)?;
    cfg.save(&run_dir.join(CONFIG_FILE))?;

    let world = cfg.world()?;
    let cache = if cfg.cache { Some(Arc::new(ContentCache::new(cfg.cache_root())?)) } else { None };
    let ctx = Ctx {
        cfg,
        run_dir,
        model: cfg.model.build(&world)?,
        backends: cfg.backends.build(&world, cache.clone())?,
        exec,
    };
    let originals = cfg.load_datasets()?;
    for layer in &cfg.layers {
        ctx.model.channels(layer)?;
    }

    let mut manifest = RunManifest::load(run_dir)?.unwrap_or(RunManifest {
        config_fingerprint: String::new(),
        model_fingerprint: String::new(),
        backend_ids: BTreeMap::new(),
        stages: BTreeMap::new(),
        failures: Vec::new(),
        timing: None,
        created_at: now(),
        updated_at: 0,
    });
    manifest.config_fingerprint = cfg.fingerprint();
    manifest.model_fingerprint = ctx.model.fingerprint();
    manifest.backend_ids = ctx.backends.ids();
    for stage in Stage::ORDER {
        if !manifest.is_done(stage, &stage.fingerprint(cfg)) {
            manifest.reopen(stage);
            break;
        }
    }
    manifest.save(run_dir)?;

    let mut executed = Vec::new();
    let stop = |s: Stage| opts.stop_after == Some(s);
    let mut timed = 0.0f64;

    let fp = Stage::Augment.fingerprint(cfg);
    if !manifest.is_done(Stage::Augment, &fp) {
        ctx.run_augment(&originals)?;
        manifest.complete(Stage::Augment, fp);
        manifest.save(run_dir)?;
        executed.push(Stage::Augment);
    }
    if stop(Stage::Augment) {
        return finish(manifest, run_dir, executed, vec![], None, &cache);
    }

    let fp = Stage::Candidates.fingerprint(cfg);
    if !manifest.is_done(Stage::Candidates, &fp) {
        let t0 = Instant::now();
        let failures = ctx.run_candidates(&originals)?;
        timed += t0.elapsed().as_secs_f64();
        manifest.failures.extend(failures);
        manifest.complete(Stage::Candidates, fp);
        manifest.save(run_dir)?;
        executed.push(Stage::Candidates);
    }
    if stop(Stage::Candidates) {
        return finish(manifest, run_dir, executed, vec![], None, &cache);
    }

    let fp = Stage::Selection.fingerprint(cfg);
    let files = if manifest.is_done(Stage::Selection, &fp) {
        read_descriptions(run_dir, &cfg.layers)?
    } else {
        let failed: Vec<NeuronId> = manifest.failures.iter().map(|f| f.neuron.clone()).collect();
        let t0 = Instant::now();
        let (files, failures) = ctx.run_selection(&originals, &failed)?;
        timed += t0.elapsed().as_secs_f64();
        manifest.failures.extend(failures);
        let described: usize = files.iter().map(|f| f.descriptions.len()).sum();
        let neurons = described + manifest.failures.len();
        if neurons > 0 {
            manifest.timing = Some(Timing { neurons, seconds_total: timed, seconds_per_neuron: timed / neurons as f64 });
        }
        manifest.complete(Stage::Selection, fp);
        manifest.save(run_dir)?;
        executed.push(Stage::Selection);
        files
    };
    if stop(Stage::Selection) {
        return finish(manifest, run_dir, executed, files, None, &cache);
    }

    let mut evaluation = None;
    if let Some(refs) = &cfg.references {
        let fp = Stage::Evaluate.fingerprint(cfg);
        let saved = run_dir.join(EVALUATION_DIR).join("report.json");
        let report = if manifest.is_done(Stage::Evaluate, &fp) && saved.exists() {
            serde_json::from_slice(&fs::read(saved)?)?
        } else {
            let report = ctx.run_evaluate(refs, &files)?;
            manifest.complete(Stage::Evaluate, fp);
            manifest.save(run_dir)?;
            executed.push(Stage::Evaluate);
            report
        };
        evaluation = Some(report);
    }
    finish(manifest, run_dir, executed, files, evaluation, &cache)
}

fn finish(
    manifest: RunManifest,
    run_dir: &Path,
    executed: Vec<Stage>,
    descriptions: Vec<DescriptionFile>,
    evaluation: Option<SimilarityReport>,
    cache: &Option<Arc<ContentCache>>,
) -> Result<RunOutcome> {
    let (cache_hits, cache_misses) = cache.as_ref().map_or((0, 0), |c| (c.stats().hits(), c.stats().misses()));
    if let Some(t) = &manifest.timing {
        log::info!("{} neurons, {:.3} s per neuron", t.neurons, t.seconds_per_neuron);
    }
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        descriptions,
        failures: manifest.failures,
        evaluation,
        timing: manifest.timing,
        cache_hits,
        cache_misses,
        executed,
    })
}

/// Fails with [`Error::IncompleteRun`] unless every required stage of the
/// run in `run_dir` has finished.
pub fn require_complete(run_dir: &Path) -> Result<(RunConfig, RunManifest)> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let Some(manifest) = RunManifest::load(run_dir)? else {
        return Err(Error::IncompleteRun(Stage::ORDER[..3].iter().map(|s| s.name().to_string()).collect()));
    };
    let mut missing = manifest.missing_stages(cfg.references.is_some());
    for s in [Stage::Augment, Stage::Candidates, Stage::Selection] {
        if manifest.stages.get(&s).is_some_and(|r| r.fingerprint != s.fingerprint(&cfg)) {
            missing.push(format!("{} (stale)", s.name()));
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteRun(missing));
    }
    Ok((cfg, manifest))
}
