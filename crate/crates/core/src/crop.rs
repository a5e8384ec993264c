//! Attention cropping: Otsu-threshold each highly activating map, take the
//! connected salient regions, and add non-overlapping crops of the source
//! images to the probing set.

use std::collections::VecDeque;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::activation::{top_k_images_where, ActivationMap, ActivationStore, NeuronId, SummaryMethod};
use crate::dataset::{CropProvenance, ProbeDataset, ProbeImage};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Best foreground/background split of a set of values.
///
/// Foreground is every value strictly greater than `threshold`; `threshold`
/// is the largest background value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuSplit {
    pub threshold: f64,
    pub variance: f64,
    pub w_b: f64,
    pub w_f: f64,
    pub mu_b: f64,
    pub mu_f: f64,
}

/// Exact Otsu threshold over the sorted distinct values.
///
/// Every split between two consecutive distinct values is a candidate; the
/// one maximizing `w_b * w_f * (mu_b - mu_f)^2` wins, ties going to the lower
/// threshold.
pub fn otsu_threshold(values: &[f64]) -> Result<OtsuSplit> {
    if values.is_empty() {
        return Err(Error::pre("otsu_threshold needs at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::pre("otsu_threshold needs finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();

    let mut best: Option<OtsuSplit> = None;
    let mut count_b = 0usize;
    let mut sum_b = 0.0;
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        while i < n && sorted[i] == v {
            sum_b += sorted[i];
            count_b += 1;
            i += 1;
        }
        if i == n {
            break;
        }
        let w_b = count_b as f64 / n as f64;
        let w_f = 1.0 - w_b;
        let mu_b = sum_b / count_b as f64;
        let mu_f = (total - sum_b) / (n - count_b) as f64;
        let variance = w_b * w_f * (mu_b - mu_f).powi(2);
        if best.is_none_or(|b| variance > b.variance) {
            best = Some(OtsuSplit { threshold: v, variance, w_b, w_f, mu_b, mu_f });
        }
    }
    best.ok_or(Error::DegenerateSplit(n))
}

/// A box `[x0, x1) x [y0, y1)` tied to the image and neuron it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub source_image: String,
    pub neuron: NeuronId,
}

impl CropBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Maximum crops per (neuron, image).
    pub alpha: usize,
    /// A crop is kept only if its IoU with every kept crop is below this.
    pub iou_limit: f64,
    /// Salient regions with fewer map cells are ignored.
    pub min_region_px: usize,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { alpha: 3, iou_limit: 0.4, min_region_px: 4 }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if !(self.iou_limit > 0.0 && self.iou_limit <= 1.0) {
            return Err(Error::Config("crop IoU limit must lie in (0, 1]".into()));
        }
        if self.min_region_px == 0 {
            return Err(Error::Config("min_region_px must be positive".into()));
        }
        Ok(())
    }
}

/// Tight boxes (map coordinates) of the 8-connected components of
/// `grid > split.threshold`, in raster order of their first cell.
pub fn extract_regions(map: &ActivationMap, split: &OtsuSplit, min_region_px: usize) -> Vec<CropBox> {
    component_boxes(map.grid.view(), split.threshold, min_region_px)
        .into_iter()
        .map(|[x0, y0, x1, y1]| CropBox { x0, y0, x1, y1, source_image: map.image_id.clone(), neuron: map.neuron.clone() })
        .collect()
}

pub(crate) fn component_boxes(grid: ArrayView2<'_, f32>, threshold: f64, min_region_px: usize) -> Vec<[u32; 4]> {
    let (h, w) = grid.dim();
    let fg = |y: usize, x: usize| grid[[y, x]] as f64 > threshold;
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !fg(sy, sx) {
                continue;
            }
            seen[sy * w + sx] = true;
            queue.push_back((sy, sx));
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            let mut size = 0usize;
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !seen[ny * w + nx] && fg(ny, nx) {
                            seen[ny * w + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            if size >= min_region_px {
                out.push([x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1]);
            }
        }
    }
    out
}

/// Intersection over union by pixel area.
pub fn iou(a: &CropBox, b: &CropBox) -> f64 {
    iou_coords(a.coords(), b.coords())
}

pub(crate) fn iou_coords(a: [u32; 4], b: [u32; 4]) -> f64 {
    let iw = a[2].min(b[2]).saturating_sub(a[0].max(b[0])) as u64;
    let ih = a[3].min(b[3]).saturating_sub(a[1].max(b[1])) as u64;
    let inter = iw * ih;
    let area = |c: [u32; 4]| (c[2] - c[0]) as u64 * (c[3] - c[1]) as u64;
    let union = area(a) + area(b) - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Maps a box from a `map_dims` grid onto a `image_dims` raster, flooring
/// the near corner and ceiling the far one.
pub fn scale_box(b: &CropBox, map_dims: (u32, u32), image_dims: (u32, u32)) -> CropBox {
    let (mw, mh) = (map_dims.0 as u64, map_dims.1 as u64);
    let (iw, ih) = (image_dims.0 as u64, image_dims.1 as u64);
    let floor = |v: u32, num: u64, den: u64| (v as u64 * num / den) as u32;
    let ceil = |v: u32, num: u64, den: u64| ((v as u64 * num).div_ceil(den)) as u32;
    CropBox {
        x0: floor(b.x0, iw, mw),
        y0: floor(b.y0, ih, mh),
        x1: ceil(b.x1, iw, mw).min(image_dims.0),
        y1: ceil(b.y1, ih, mh).min(image_dims.1),
        source_image: b.source_image.clone(),
        neuron: b.neuron.clone(),
    }
}

/// Scales map boxes to image space, then greedily keeps the largest boxes
/// whose IoU with every kept box stays below the limit, up to `alpha`.
pub fn select_crops(
    boxes: &[CropBox],
    params: &CropParams,
    map_dims: (u32, u32),
    image_dims: (u32, u32),
) -> Vec<CropBox> {
    let mut scaled: Vec<CropBox> = boxes.iter().map(|b| scale_box(b, map_dims, image_dims)).collect();
    scaled.sort_by(|a, b| b.area().cmp(&a.area()));
    let mut kept: Vec<CropBox> = Vec::new();
    for b in scaled {
        if kept.len() >= params.alpha {
            break;
        }
        if kept.iter().all(|k| iou(k, &b) < params.iou_limit) {
            kept.push(b);
        }
    }
    kept
}

/// Crop image id: source id plus neuron and crop ordinal.
pub fn crop_id(source: &str, neuron: &NeuronId, n: usize) -> String {
    format!("{source}@{}.{}.crop{n}", neuron.layer, neuron.index)
}

/// Crops of one neuron's `k_images` highest activating original images.
pub fn neuron_crops(
    dataset: &ProbeDataset,
    store: &ActivationStore,
    neuron: &NeuronId,
    params: &CropParams,
    k_images: usize,
    method: SummaryMethod,
) -> Result<Vec<ProbeImage>> {
    let top = top_k_images_where(store, neuron, k_images, method, |id| {
        dataset.get(id).is_some_and(|img| img.crop.is_none())
    })?;
    let mut out = Vec::new();
    for (image_id, _) in &top.entries {
        let map = store.map(neuron, image_id)?;
        let values: Vec<f64> = map.grid.iter().map(|&v| v as f64).collect();
        let split = match otsu_threshold(&values) {
            Ok(s) => s,
            // a flat map has no salient sub-region; the whole image is already probed
            Err(Error::DegenerateSplit(_)) => continue,
            Err(e) => return Err(e),
        };
        let regions = extract_regions(&map, &split, params.min_region_px);
        if regions.is_empty() {
            continue;
        }
        let source = dataset.get(image_id).expect("top-k restricted to dataset images");
        let raster = source.payload.decode()?;
        let map_dims = (map.grid.ncols() as u32, map.grid.nrows() as u32);
        for b in select_crops(&regions, params, map_dims, raster.dimensions()) {
            let sub = image::imageops::crop_imm(&raster, b.x0, b.y0, b.width(), b.height()).to_image();
            let id = crop_id(image_id, neuron, out.len());
            out.push(ProbeImage {
                id: id.clone(),
                payload: crate::raster::ImagePayload::encode_png(&sub),
                crop: Some(CropProvenance {
                    image_id: id,
                    source_image: image_id.clone(),
                    neuron: neuron.clone(),
                    bbox: b.coords(),
                }),
            });
        }
    }
    Ok(out)
}

/// Returns the probing set plus attention crops for every neuron in
/// `neurons`. Original entries are left untouched.
pub fn augment_probe_set(
    dataset: &ProbeDataset,
    store: &ActivationStore,
    neurons: &[NeuronId],
    params: &CropParams,
    k_images: usize,
    method: SummaryMethod,
    exec: Exec,
) -> Result<ProbeDataset> {
    params.validate()?;
    let per_neuron = exec.map(neurons, |n| neuron_crops(dataset, store, n, params, k_images, method));
    let mut crops = Vec::new();
    for r in per_neuron {
        crops.extend(r?);
    }
    if crops.is_empty() {
        return Ok(dataset.clone());
    }
    dataset.extended(crops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Exhaustive oracle: evaluates every candidate threshold from scratch.
    fn oracle(values: &[f64]) -> Option<(f64, f64)> {
        let mut distinct = values.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let mut best: Option<(f64, f64)> = None;
        for &t in &distinct[..distinct.len().saturating_sub(1)] {
            let bg: Vec<f64> = values.iter().copied().filter(|&v| v <= t).collect();
            let fg: Vec<f64> = values.iter().copied().filter(|&v| v > t).collect();
            let n = values.len() as f64;
            let (wb, wf) = (bg.len() as f64 / n, fg.len() as f64 / n);
            let mb = bg.iter().sum::<f64>() / bg.len() as f64;
            let mf = fg.iter().sum::<f64>() / fg.len() as f64;
            let var = wb * wf * (mb - mf) * (mb - mf);
            if best.is_none_or(|(_, v)| var > v) {
                best = Some((t, var));
            }
        }
        best
    }

    fn nb(c: [u32; 4]) -> CropBox {
        CropBox { x0: c[0], y0: c[1], x1: c[2], y1: c[3], source_image: "i".into(), neuron: NeuronId::new("l", 0) }
    }

    #[test]
    fn otsu_hand_cases() {
        let s = otsu_threshold(&[0.0, 0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(s.threshold, 0.0);
        assert!((s.variance - 24.0).abs() < 1e-9);
        assert!((s.w_b - 0.6).abs() < 1e-12 && (s.w_f - 0.4).abs() < 1e-12);
        let s = otsu_threshold(&[0.0, 10.0]).unwrap();
        assert!((s.variance - 25.0).abs() < 1e-9);
        assert!(matches!(otsu_threshold(&[5.0, 5.0, 5.0]), Err(Error::DegenerateSplit(3))));
        assert!(otsu_threshold(&[]).is_err());
    }

    #[test]
    fn regions_hand_cases() {
        let mut g = Array2::<f32>::zeros((6, 6));
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (4, 4), (4, 5), (5, 4), (5, 5)] {
            g[[y, x]] = 1.0;
        }
        let boxes = component_boxes(g.view(), 0.0, 1);
        assert_eq!(boxes, vec![[0, 0, 2, 2], [4, 4, 6, 6]]);
        let full = Array2::<f32>::ones((3, 4));
        assert_eq!(component_boxes(full.view(), 0.5, 1), vec![[0, 0, 4, 3]]);
        let one = array![[0.0f32, 0.0], [0.0, 2.0]];
        assert_eq!(component_boxes(one.view(), 0.0, 1), vec![[1, 1, 2, 2]]);
        assert!(component_boxes(one.view(), 0.0, 2).is_empty());
        // diagonal neighbours join under 8-connectivity
        let diag = array![[1.0f32, 0.0], [0.0, 1.0]];
        assert_eq!(component_boxes(diag.view(), 0.5, 1), vec![[0, 0, 2, 2]]);
    }

    #[test]
    fn iou_hand_cases() {
        assert_eq!(iou(&nb([0, 0, 2, 2]), &nb([0, 0, 2, 2])), 1.0);
        assert_eq!(iou(&nb([0, 0, 2, 2]), &nb([5, 5, 6, 6])), 0.0);
        assert!((iou(&nb([0, 0, 2, 2]), &nb([1, 0, 3, 2])) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn select_hand_cases() {
        let nested = [nb([0, 0, 10, 10]), nb([0, 0, 9, 9]), nb([0, 0, 8, 8])];
        let p = CropParams { alpha: 5, iou_limit: 0.4, min_region_px: 1 };
        let kept = select_crops(&nested, &p, (10, 10), (10, 10));
        assert_eq!(kept, vec![nb([0, 0, 10, 10])]);

        let disjoint = [nb([0, 0, 1, 1]), nb([2, 2, 4, 4]), nb([5, 5, 8, 8])];
        let p1 = CropParams { alpha: 1, ..p };
        assert_eq!(select_crops(&disjoint, &p1, (10, 10), (10, 10)), vec![nb([5, 5, 8, 8])]);
        let all = CropParams { alpha: usize::MAX, ..p };
        assert_eq!(select_crops(&disjoint, &all, (10, 10), (10, 10)).len(), 3);
        assert!(select_crops(&[], &p, (1, 1), (1, 1)).is_empty());
    }

    #[test]
    fn scaling_floors_and_ceils() {
        let b = scale_box(&nb([1, 1, 2, 3]), (3, 3), (10, 10));
        assert_eq!(b.coords(), [3, 3, 7, 10]);
        let b = scale_box(&nb([0, 0, 4, 8]), (8, 8), (32, 32));
        assert_eq!(b.coords(), [0, 0, 16, 32]);
    }

    fn small_multiset() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0u8..8, 2..64).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn otsu_matches_exhaustive_search(values in small_multiset()) {
            match (otsu_threshold(&values), oracle(&values)) {
                (Ok(s), Some((_, best))) => {
                    prop_assert!((s.variance - best).abs() <= 1e-9 * best.max(1.0));
                    prop_assert!((s.w_b + s.w_f - 1.0).abs() < 1e-9);
                    let recomputed = s.w_b * s.w_f * (s.mu_b - s.mu_f).powi(2);
                    prop_assert!((s.variance - recomputed).abs() < 1e-9);
                }
                (Err(Error::DegenerateSplit(_)), None) => {}
                (a, b) => prop_assert!(false, "mismatch {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn components_partition_foreground(cells in prop::collection::vec(any::<bool>(), 1..80), w in 1usize..10) {
            let h = cells.len().div_ceil(w);
            let mut g = Array2::<f32>::zeros((h, w));
            for (i, &c) in cells.iter().enumerate() {
                g[[i / w, i % w]] = if c { 1.0 } else { 0.0 };
            }
            // oracle labelling: repeated neighbour relaxation until fixpoint
            let mut label: Vec<Option<usize>> = (0..h * w).map(|i| (g[[i / w, i % w]] > 0.5).then_some(i)).collect();
            loop {
                let mut changed = false;
                for i in 0..h * w {
                    let Some(li) = label[i] else { continue };
                    for j in 0..h * w {
                        let (dy, dx) = ((i / w) as isize - (j / w) as isize, (i % w) as isize - (j % w) as isize);
                        if dy.abs() <= 1 && dx.abs() <= 1 {
                            if let Some(lj) = label[j] {
                                if lj > li {
                                    label[j] = Some(li);
                                    changed = true;
                                }
                            }
                        }
                    }
                }
                if !changed { break; }
            }
            let mut roots: Vec<usize> = label.iter().flatten().copied().collect();
            roots.sort();
            roots.dedup();
            let boxes = component_boxes(g.view(), 0.5, 1);
            prop_assert_eq!(boxes.len(), roots.len());
            // every foreground cell lies in the box of its component
            for i in 0..h * w {
                if label[i].is_some() {
                    let (y, x) = ((i / w) as u32, (i % w) as u32);
                    prop_assert!(boxes.iter().any(|b| x >= b[0] && x < b[2] && y >= b[1] && y < b[3]));
                }
            }
        }

        #[test]
        fn selection_respects_limits(
            raw in prop::collection::vec((0u32..20, 0u32..20, 1u32..10, 1u32..10), 0..20),
            alpha in 1usize..6,
            limit in 0.05f64..1.0,
        ) {
            let boxes: Vec<CropBox> = raw.iter().map(|&(x, y, w, h)| nb([x, y, (x + w).min(30), (y + h).min(30)])).collect();
            let p = CropParams { alpha, iou_limit: limit, min_region_px: 1 };
            let kept = select_crops(&boxes, &p, (30, 30), (60, 45));
            prop_assert!(kept.len() <= alpha);
            for i in 0..kept.len() {
                prop_assert!(kept[i].x1 <= 60 && kept[i].y1 <= 45);
                for j in 0..i {
                    prop_assert!(iou(&kept[i], &kept[j]) < limit);
                }
            }
        }
    }
}
