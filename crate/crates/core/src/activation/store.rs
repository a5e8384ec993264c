use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ActivationMap, NeuronId, SummaryMethod, TargetModel};
use crate::dataset::ProbeDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const ACTIVATIONS_DIR: &str = "activations";
const INDEX_FILE: &str = "index.json";

/// An image that could not be processed, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub image_id: String,
    pub reason: String,
}

/// Activations of every channel of one layer over a probe dataset.
///
/// Immutable once recorded; grids may differ in size between images (crops).
#[derive(Debug, Clone)]
pub struct ActivationStore {
    layer: String,
    channels: usize,
    image_ids: Vec<String>,
    maps: Vec<Array3<f32>>,
    index: HashMap<String, usize>,
    skipped: Vec<SkipRecord>,
}

/// On-disk index: `<run_dir>/activations/<layer>/index.json` plus one
/// little-endian `f32` shard per recording batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub layer: String,
    pub channels: usize,
    pub dataset_digest: String,
    pub model_fingerprint: String,
    pub summary_method: SummaryMethod,
    pub shards: Vec<ShardEntry>,
    #[serde(default)]
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    /// `(image_id, height, width)` in shard order.
    pub images: Vec<(String, usize, usize)>,
}

/// Runs `model` over every image of `dataset` and keeps `layer`'s output.
///
/// Images that fail to decode are skipped and recorded. `batch` sets the
/// shard granularity used by [`ActivationStore::save`].
pub fn record_activations<M: TargetModel + ?Sized>(
    model: &M,
    dataset: &ProbeDataset,
    layer: &str,
    exec: Exec,
) -> Result<ActivationStore> {
    if dataset.is_empty() {
        return Err(Error::pre("cannot record activations over an empty dataset"));
    }
    let channels = model.channels(layer)?;
    let results = exec.map(dataset.images(), |img| {
        let raster = img.payload.decode()?;
        model.forward(&raster, layer)
    });

    let mut store = ActivationStore::empty(layer, channels);
    for (img, res) in dataset.images().iter().zip(results) {
        match res {
            Ok(maps) => store.push(img.id.clone(), maps)?,
            Err(Error::MalformedImage(reason)) => {
                log::warn!("skipping image {}: {reason}", img.id);
                store.skipped.push(SkipRecord { image_id: img.id.clone(), reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(store)
}

impl ActivationStore {
    pub fn empty(layer: impl Into<String>, channels: usize) -> Self {
        ActivationStore {
            layer: layer.into(),
            channels,
            image_ids: Vec::new(),
            maps: Vec::new(),
            index: HashMap::new(),
            skipped: Vec::new(),
        }
    }

    pub fn push(&mut self, image_id: String, maps: Array3<f32>) -> Result<()> {
        let (c, h, w) = maps.dim();
        if c != self.channels || h == 0 || w == 0 {
            return Err(Error::pre(format!(
                "image {image_id}: expected {} channels with a non-empty grid, got {c}x{h}x{w}",
                self.channels
            )));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(Error::pre(format!("image {image_id}: non-finite activation")));
        }
        if self.index.insert(image_id.clone(), self.image_ids.len()).is_some() {
            return Err(Error::pre(format!("image {image_id} recorded twice")));
        }
        self.image_ids.push(image_id);
        self.maps.push(maps);
        Ok(())
    }

    /// Adds every image of `other` (same layer and width).
    pub fn extend(&mut self, other: ActivationStore) -> Result<()> {
        if other.layer != self.layer || other.channels != self.channels {
            return Err(Error::pre("cannot merge stores of different layers"));
        }
        for (id, maps) in other.image_ids.into_iter().zip(other.maps) {
            self.push(id, maps)?;
        }
        self.skipped.extend(other.skipped);
        Ok(())
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn skipped(&self) -> &[SkipRecord] {
        &self.skipped
    }

    pub fn contains_image(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    fn check_neuron(&self, neuron: &NeuronId) -> Result<()> {
        if neuron.layer != self.layer || neuron.index >= self.channels {
            return Err(Error::UnknownNeuron(neuron.to_string()));
        }
        Ok(())
    }

    pub fn grid(&self, neuron: &NeuronId, image_id: &str) -> Result<ArrayView2<'_, f32>> {
        self.check_neuron(neuron)?;
        let i = *self
            .index
            .get(image_id)
            .ok_or_else(|| Error::pre(format!("image {image_id} not in activation store")))?;
        Ok(self.maps[i].index_axis(Axis(0), neuron.index))
    }

    pub fn map(&self, neuron: &NeuronId, image_id: &str) -> Result<ActivationMap> {
        let grid: Array2<f32> = self.grid(neuron, image_id)?.to_owned();
        ActivationMap::new(grid, neuron.clone(), image_id)
    }

    /// `(image_id, g(map))` for every recorded image, in recording order.
    pub fn summaries(&self, neuron: &NeuronId, method: SummaryMethod) -> Result<Vec<(String, f64)>> {
        self.check_neuron(neuron)?;
        Ok(self
            .image_ids
            .iter()
            .zip(&self.maps)
            .map(|(id, m)| (id.clone(), method.apply(m.index_axis(Axis(0), neuron.index))))
            .collect())
    }

    pub fn save(
        &self,
        dir: &Path,
        batch: usize,
        dataset_digest: &str,
        model_fingerprint: &str,
        summary_method: SummaryMethod,
    ) -> Result<StoreIndex> {
        if batch == 0 {
            return Err(Error::pre("batch must be positive"));
        }
        fs::create_dir_all(dir)?;
        let mut shards = Vec::new();
        for (n, chunk) in self.image_ids.chunks(batch).enumerate() {
            let file = format!("shard_{n:05}.f32");
            let mut bytes = Vec::new();
            let mut images = Vec::with_capacity(chunk.len());
            for id in chunk {
                let m = &self.maps[self.index[id]];
                let (_, h, w) = m.dim();
                images.push((id.clone(), h, w));
                for v in m.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(dir.join(&file), bytes)?;
            shards.push(ShardEntry { file, images });
        }
        let index = StoreIndex {
            layer: self.layer.clone(),
            channels: self.channels,
            dataset_digest: dataset_digest.to_string(),
            model_fingerprint: model_fingerprint.to_string(),
            summary_method,
            shards,
            skipped: self.skipped.clone(),
        };
        fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
        Ok(index)
    }

    pub fn read_index(dir: &Path) -> Result<StoreIndex> {
        Ok(serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?)
    }

    pub fn load(dir: &Path) -> Result<(ActivationStore, StoreIndex)> {
        let index = Self::read_index(dir)?;
        let mut store = ActivationStore::empty(index.layer.clone(), index.channels);
        for shard in &index.shards {
            let bytes = fs::read(dir.join(&shard.file))?;
            let mut values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            for (id, h, w) in &shard.images {
                let n = index.channels * h * w;
                let data: Vec<f32> = values.by_ref().take(n).collect();
                if data.len() != n {
                    return Err(Error::pre(format!("shard {} is truncated", shard.file)));
                }
                let arr = Array3::from_shape_vec((index.channels, *h, *w), data)
                    .map_err(|e| Error::pre(e.to_string()))?;
                store.push(id.clone(), arr)?;
            }
        }
        store.skipped = index.skipped.clone();
        Ok((store, index))
    }
}
