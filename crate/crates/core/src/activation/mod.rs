//! Recording per-neuron activation maps and ranking probe images by them.

mod model;
mod store;

use std::cmp::Ordering;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use model::{LayerOp, NamedLayer, SequentialNet, TargetModel};
pub use store::{record_activations, ActivationStore, SkipRecord, StoreIndex, ACTIVATIONS_DIR};

use crate::error::{Error, Result};

/// A channel of a named layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: String,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: impl Into<String>, index: usize) -> Self {
        NeuronId { layer: layer.into(), index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.layer, self.index)
    }
}

impl std::str::FromStr for NeuronId {
    type Err = Error;

    /// Parses `layer#index`.
    fn from_str(s: &str) -> Result<Self> {
        let (layer, idx) = s
            .rsplit_once('#')
            .ok_or_else(|| Error::Config(format!("neuron `{s}` is not of the form layer#index")))?;
        let index = idx.parse().map_err(|_| Error::Config(format!("bad neuron index in `{s}`")))?;
        if layer.is_empty() {
            return Err(Error::Config(format!("empty layer name in `{s}`")));
        }
        Ok(NeuronId::new(layer, index))
    }
}

/// Reduction of a 2-D activation map to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMethod {
    #[default]
    SpatialMean,
    SpatialMax,
}

impl SummaryMethod {
    pub fn apply(self, grid: ArrayView2<'_, f32>) -> f64 {
        match self {
            SummaryMethod::SpatialMean => {
                grid.iter().map(|&v| v as f64).sum::<f64>() / grid.len() as f64
            }
            SummaryMethod::SpatialMax => {
                grid.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
            }
        }
    }
}

/// One neuron's activation grid on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub grid: Array2<f32>,
    pub neuron: NeuronId,
    pub image_id: String,
}

impl ActivationMap {
    pub fn new(grid: Array2<f32>, neuron: NeuronId, image_id: impl Into<String>) -> Result<Self> {
        if grid.nrows() == 0 || grid.ncols() == 0 {
            return Err(Error::pre("activation map must be at least 1x1"));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::pre("activation map contains non-finite entries"));
        }
        Ok(ActivationMap { grid, neuron, image_id: image_id.into() })
    }
}

pub fn summarize(map: &ActivationMap, method: SummaryMethod) -> f64 {
    method.apply(map.grid.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKResult {
    pub neuron: NeuronId,
    /// `(image_id, summary)` in descending summary order.
    pub entries: Vec<(String, f64)>,
}

impl TopKResult {
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Descending by value, ties by ascending id.
pub(crate) fn rank_desc(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// The `k` highest-summary images for `neuron`, ties broken by ascending image id.
pub fn top_k_images(store: &ActivationStore, neuron: &NeuronId, k: usize, method: SummaryMethod) -> Result<TopKResult> {
    top_k_images_where(store, neuron, k, method, |_| true)
}

/// As [`top_k_images`], restricted to images accepted by `keep`.
pub fn top_k_images_where(
    store: &ActivationStore,
    neuron: &NeuronId,
    k: usize,
    method: SummaryMethod,
    keep: impl Fn(&str) -> bool,
) -> Result<TopKResult> {
    if k == 0 {
        return Err(Error::pre("k must be positive"));
    }
    let mut all: Vec<(String, f64)> = store
        .summaries(neuron, method)?
        .into_iter()
        .filter(|(id, _)| keep(id))
        .collect();
    all.sort_by(rank_desc);
    all.truncate(k);
    Ok(TopKResult { neuron: neuron.clone(), entries: all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map(grid: Array2<f32>) -> ActivationMap {
        ActivationMap::new(grid, NeuronId::new("l", 0), "img").unwrap()
    }

    #[test]
    fn summary_hand_values() {
        let m = map(array![[1.0, 3.0], [5.0, 7.0]]);
        assert_eq!(summarize(&m, SummaryMethod::SpatialMean), 4.0);
        assert_eq!(summarize(&m, SummaryMethod::SpatialMax), 7.0);
        let c = map(Array2::from_elem((3, 4), 2.5));
        assert_eq!(summarize(&c, SummaryMethod::SpatialMean), 2.5);
        assert_eq!(summarize(&c, SummaryMethod::SpatialMax), 2.5);
    }

    #[test]
    fn map_validation() {
        assert!(ActivationMap::new(Array2::zeros((0, 3)), NeuronId::new("l", 0), "x").is_err());
        assert!(ActivationMap::new(array![[f32::NAN]], NeuronId::new("l", 0), "x").is_err());
    }

    #[test]
    fn neuron_display() {
        assert_eq!(NeuronId::new("layer4", 12).to_string(), "layer4#12");
    }
}
