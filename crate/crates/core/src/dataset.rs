//! Probing datasets: the original images plus any attention crops added to them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::NeuronId;
use crate::error::{Error, Result};
use crate::raster::ImagePayload;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Original,
    Cropped,
}

/// Where an attention crop came from. Serialized as
/// `{image_id, source_image, neuron: {layer, index}, box: [x0, y0, x1, y1]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropProvenance {
    pub image_id: String,
    pub source_image: String,
    pub neuron: NeuronId,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeImage {
    pub id: String,
    pub payload: ImagePayload,
    pub crop: Option<CropProvenance>,
}

impl ProbeImage {
    pub fn original(id: impl Into<String>, payload: ImagePayload) -> Self {
        ProbeImage { id: id.into(), payload, crop: None }
    }

    pub fn source_tag(&self) -> SourceTag {
        if self.crop.is_some() {
            SourceTag::Cropped
        } else {
            SourceTag::Original
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeDataset {
    name: String,
    images: Vec<ProbeImage>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    images: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image_id: String,
    file: String,
    source_tag: SourceTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neuron: Option<NeuronId>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<[u32; 4]>,
}

impl ProbeDataset {
    pub fn new(name: impl Into<String>, images: Vec<ProbeImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::pre("probe dataset must not be empty"));
        }
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id.clone(), i).is_some() {
                return Err(Error::pre(format!("duplicate image id `{}`", img.id)));
            }
        }
        Ok(ProbeDataset { name: name.into(), images, index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[ProbeImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProbeImage> {
        self.index.get(id).map(|&i| &self.images[i])
    }

    pub fn originals(&self) -> impl Iterator<Item = &ProbeImage> {
        self.images.iter().filter(|i| i.crop.is_none())
    }

    /// Appends images, rejecting id collisions.
    pub fn extended(&self, extra: Vec<ProbeImage>) -> Result<Self> {
        let mut images = self.images.clone();
        images.extend(extra);
        ProbeDataset::new(self.name.clone(), images)
    }

    /// Content digest over ids and payload bytes, in dataset order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for img in &self.images {
            h.update(img.id.as_bytes());
            h.update([0u8]);
            h.update(img.payload.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Loads `manifest.json` from `dir` when present, otherwise every PNG/JPEG
    /// file in the directory (sorted by file name, id = file stem).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
            let mut images = Vec::with_capacity(manifest.images.len());
            for e in manifest.images {
                let payload = ImagePayload::from_bytes(fs::read(dir.join(&e.file))?);
                let crop = match (e.source_tag, e.source_image, e.neuron, e.bbox) {
                    (SourceTag::Original, ..) => None,
                    (SourceTag::Cropped, Some(source_image), Some(neuron), Some(bbox)) => Some(CropProvenance {
                        image_id: e.image_id.clone(),
                        source_image,
                        neuron,
                        bbox,
                    }),
                    (SourceTag::Cropped, ..) => {
                        return Err(Error::Config(format!("crop `{}` lacks provenance", e.image_id)))
                    }
                };
                images.push(ProbeImage { id: e.image_id, payload, crop });
            }
            return ProbeDataset::new(manifest.name, images);
        }

        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()).map(|s| s.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        let images = files
            .iter()
            .map(|p| {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                Ok(ProbeImage::original(id, ImagePayload::from_bytes(fs::read(p)?)))
            })
            .collect::<Result<Vec<_>>>()?;
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("probe").to_string();
        ProbeDataset::new(name, images)
    }

    /// Writes every image plus a manifest carrying crop provenance.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let ext = match image::guess_format(img.payload.bytes()) {
                Ok(image::ImageFormat::Jpeg) => "jpg",
                Ok(image::ImageFormat::Png) => "png",
                _ => "bin",
            };
            let file = format!("{}.{ext}", sanitize_file_stem(&img.id));
            fs::write(dir.join(&file), img.payload.bytes())?;
            entries.push(ManifestEntry {
                image_id: img.id.clone(),
                file,
                source_tag: img.source_tag(),
                source_image: img.crop.as_ref().map(|c| c.source_image.clone()),
                neuron: img.crop.as_ref().map(|c| c.neuron.clone()),
                bbox: img.crop.as_ref().map(|c| c.bbox),
            });
        }
        let manifest = Manifest { name: self.name.clone(), images: entries };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

fn sanitize_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn tiny(v: u8) -> ImagePayload {
        ImagePayload::encode_png(&RgbImage::from_pixel(2, 2, Rgb([v, v, v])))
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(ProbeDataset::new("d", vec![]).is_err());
        let imgs = vec![ProbeImage::original("a", tiny(1)), ProbeImage::original("a", tiny(2))];
        assert!(ProbeDataset::new("d", imgs).is_err());
    }

    #[test]
    fn manifest_round_trip_keeps_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let crop = ProbeImage {
            id: "a__crop".into(),
            payload: tiny(3),
            crop: Some(CropProvenance {
                image_id: "a__crop".into(),
                source_image: "a".into(),
                neuron: NeuronId::new("conv", 2),
                bbox: [0, 0, 1, 1],
            }),
        };
        let ds = ProbeDataset::new("d", vec![ProbeImage::original("a", tiny(1)), crop]).unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = ProbeDataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.digest(), ds.digest());
        assert_eq!(back.images()[1].crop, ds.images()[1].crop);
        let raw: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(raw["images"][1]["neuron"]["layer"], "conv");
        assert_eq!(raw["images"][1]["box"], serde_json::json!([0, 0, 1, 1]));
    }
}
