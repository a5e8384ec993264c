//! Encoded image payloads and the few raster operations the pipeline needs.

use std::fmt;
use std::io::Cursor;
use std::sync::Arc;

use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An encoded image (PNG or JPEG bytes), cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload(Arc<[u8]>);

impl ImagePayload {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        ImagePayload(Arc::from(bytes.into()))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.0))
    }

    pub fn decode(&self) -> Result<RgbImage> {
        if self.0.is_empty() {
            return Err(Error::MalformedImage("zero-byte payload".into()));
        }
        let img = image::load_from_memory(&self.0)
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        let rgb = img.to_rgb8();
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(Error::MalformedImage("empty raster".into()));
        }
        Ok(rgb)
    }

    /// PNG-encodes a raster. The encoder is deterministic, so equal rasters
    /// produce equal payloads.
    pub fn encode_png(img: &RgbImage) -> Self {
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        ImagePayload::from_bytes(buf.into_inner())
    }

    /// Crops `[x0, x1) × [y0, y1)` out of the decoded image and re-encodes it.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        let img = self.decode()?;
        if x0 >= x1 || y0 >= y1 || x1 > img.width() || y1 > img.height() {
            return Err(Error::pre(format!(
                "crop box ({x0},{y0},{x1},{y1}) outside {}x{} image",
                img.width(),
                img.height()
            )));
        }
        let sub = image::imageops::crop_imm(&img, x0, y0, x1 - x0, y1 - y0).to_image();
        Ok(ImagePayload::encode_png(&sub))
    }
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImagePayload({} bytes)", self.0.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn zero_bytes_is_malformed() {
        let err = ImagePayload::from_bytes(Vec::new()).decode().unwrap_err();
        assert!(matches!(err, Error::MalformedImage(_)));
        let err = ImagePayload::from_bytes(vec![1, 2, 3]).decode().unwrap_err();
        assert!(matches!(err, Error::MalformedImage(_)));
    }

    #[test]
    fn crop_keeps_pixels() {
        let img = RgbImage::from_fn(8, 4, |x, _| if x < 4 { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) });
        let payload = ImagePayload::encode_png(&img);
        let left = payload.crop(0, 0, 4, 4).unwrap().decode().unwrap();
        assert_eq!(left.dimensions(), (4, 4));
        assert!(left.pixels().all(|p| *p == Rgb([255, 0, 0])));
        assert!(payload.crop(0, 0, 9, 4).is_err());
        assert_eq!(payload, ImagePayload::encode_png(&img));
    }
}
