use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A vision network whose intermediate channels can be read out.
///
/// Implementations own their preprocessing (resize, normalization) and must
/// be deterministic: the same image always yields the same maps.
pub trait TargetModel: Send + Sync {
    /// Stable identifier of architecture and weights.
    fn fingerprint(&self) -> String;

    fn layers(&self) -> Vec<String>;

    fn channels(&self, layer: &str) -> Result<usize>;

    /// Activations at `layer`, shaped `(channels, height, width)`.
    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>>;

    /// As [`forward`](Self::forward) with `channels` of `mask_layer` forced
    /// to zero. Models that cannot propagate a mask to later layers only
    /// support `layer == mask_layer`.
    fn forward_masked(&self, image: &RgbImage, layer: &str, mask_layer: &str, channels: &[usize]) -> Result<Array3<f32>> {
        if layer != mask_layer {
            return Err(Error::Config(format!(
                "{} cannot propagate a mask on `{mask_layer}` to `{layer}`",
                self.fingerprint()
            )));
        }
        let mut out = self.forward(image, layer)?;
        zero_channels(&mut out, channels)?;
        Ok(out)
    }
}

pub(crate) fn zero_channels(x: &mut Array3<f32>, channels: &[usize]) -> Result<()> {
    for &c in channels {
        if c >= x.dim().0 {
            return Err(Error::UnknownNeuron(format!("channel {c} of a {}-channel layer", x.dim().0)));
        }
        x.slice_mut(s![c, .., ..]).fill(0.0);
    }
    Ok(())
}

impl<M: TargetModel + ?Sized> TargetModel for &M {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn layers(&self) -> Vec<String> {
        (**self).layers()
    }
    fn channels(&self, layer: &str) -> Result<usize> {
        (**self).channels(layer)
    }
    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>> {
        (**self).forward(image, layer)
    }
    fn forward_masked(&self, image: &RgbImage, layer: &str, mask_layer: &str, channels: &[usize]) -> Result<Array3<f32>> {
        (**self).forward_masked(image, layer, mask_layer, channels)
    }
}

impl<M: TargetModel + ?Sized> TargetModel for Box<M> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn layers(&self) -> Vec<String> {
        (**self).layers()
    }
    fn channels(&self, layer: &str) -> Result<usize> {
        (**self).channels(layer)
    }
    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>> {
        (**self).forward(image, layer)
    }
    fn forward_masked(&self, image: &RgbImage, layer: &str, mask_layer: &str, channels: &[usize]) -> Result<Array3<f32>> {
        (**self).forward_masked(image, layer, mask_layer, channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    /// Weights are laid out `[out][in][kernel][kernel]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    /// Non-overlapping pooling; trailing rows/columns that do not fill a
    /// window are dropped, but the output is always at least 1x1.
    AvgPool { size: usize },
    MaxPool { size: usize },
    /// Per-pixel colour detector: channel `c` outputs
    /// `max(0, 1 - |p - prototype_c|^2 / radius^2)` on RGB scaled to `[0, 1]`.
    ColorMatch { prototypes: Vec<[f32; 3]>, radius: f32 },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
}

/// A small feed-forward network with fixed weights, described in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialNet {
    pub name: String,
    /// Optional `[width, height]` the input is resized to.
    #[serde(default)]
    pub input_size: Option<[u32; 2]>,
    pub layers: Vec<NamedLayer>,
}

impl SequentialNet {
    /// Colour-detector network: layer `detect` fires on pixels close to one
    /// prototype per channel, layer `pool` average-pools it by `pool`.
    pub fn color_detector(name: impl Into<String>, colors: &[[u8; 3]], pool: usize) -> Self {
        let prototypes = colors
            .iter()
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        SequentialNet {
            name: name.into(),
            input_size: None,
            layers: vec![
                NamedLayer { name: "detect".into(), op: LayerOp::ColorMatch { prototypes, radius: 0.15 } },
                NamedLayer { name: "pool".into(), op: LayerOp::AvgPool { size: pool.max(1) } },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut channels = 3usize;
        for layer in &self.layers {
            channels = out_channels(&layer.op, channels)
                .map_err(|e| Error::Config(format!("layer `{}`: {e}", layer.name)))?;
        }
        Ok(())
    }

    fn input_tensor(&self, image: &RgbImage) -> Array3<f32> {
        match self.input_size {
            Some([w, h]) if (w, h) != image.dimensions() => {
                to_tensor(&image::imageops::resize(image, w, h, FilterType::Triangle))
            }
            _ => to_tensor(image),
        }
    }

    fn layer_position(&self, layer: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }
}

fn out_channels(op: &LayerOp, input: usize) -> std::result::Result<usize, String> {
    match op {
        LayerOp::Conv2d { in_channels, out_channels, kernel, stride, weights, bias, .. } => {
            if *in_channels != input {
                return Err(format!("expects {in_channels} input channels, got {input}"));
            }
            if *kernel == 0 || *stride == 0 {
                return Err("kernel and stride must be positive".into());
            }
            if weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != *out_channels {
                return Err("weight or bias length mismatch".into());
            }
            Ok(*out_channels)
        }
        LayerOp::Relu => Ok(input),
        LayerOp::AvgPool { size } | LayerOp::MaxPool { size } => {
            if *size == 0 {
                return Err("pool size must be positive".into());
            }
            Ok(input)
        }
        LayerOp::ColorMatch { prototypes, radius } => {
            if input != 3 {
                return Err("colour matching needs the RGB input".into());
            }
            if *radius <= 0.0 || prototypes.is_empty() {
                return Err("colour matching needs prototypes and a positive radius".into());
            }
            Ok(prototypes.len())
        }
    }
}

fn to_tensor(image: &RgbImage) -> Array3<f32> {
    let (w, h) = image.dimensions();
    let mut t = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            t[[c, y as usize, x as usize]] = p[c] as f32 / 255.0;
        }
    }
    t
}

fn apply(op: &LayerOp, x: &Array3<f32>) -> Array3<f32> {
    let (c_in, h, w) = x.dim();
    match op {
        LayerOp::Conv2d { out_channels, kernel, stride, padding, weights, bias, .. } => {
            let (k, s, p) = (*kernel, *stride, *padding);
            let oh = ((h + 2 * p).saturating_sub(k)) / s + 1;
            let ow = ((w + 2 * p).saturating_sub(k)) / s + 1;
            let mut out = Array3::zeros((*out_channels, oh, ow));
            for o in 0..*out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for i in 0..c_in {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let wgt = weights[((o * c_in + i) * k + ky) * k + kx];
                                    acc += wgt * x[[i, iy as usize, ix as usize]];
                                }
                            }
                        }
                        out[[o, oy, ox]] = acc;
                    }
                }
            }
            out
        }
        LayerOp::Relu => x.mapv(|v| v.max(0.0)),
        LayerOp::AvgPool { size } | LayerOp::MaxPool { size } => {
            let sz = *size;
            let oh = (h / sz).max(1);
            let ow = (w / sz).max(1);
            let mut out = Array3::zeros((c_in, oh, ow));
            for c in 0..c_in {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let win = x.slice(s![c, oy * sz..((oy + 1) * sz).min(h), ox * sz..((ox + 1) * sz).min(w)]);
                        out[[c, oy, ox]] = match op {
                            LayerOp::MaxPool { .. } => win.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)),
                            _ => win.iter().sum::<f32>() / win.len() as f32,
                        };
                    }
                }
            }
            out
        }
        LayerOp::ColorMatch { prototypes, radius } => {
            let r2 = radius * radius;
            let mut out = Array3::zeros((prototypes.len(), h, w));
            for (c, proto) in prototypes.iter().enumerate() {
                for y in 0..h {
                    for xx in 0..w {
                        let d2: f32 = (0..3).map(|i| (x[[i, y, xx]] - proto[i]).powi(2)).sum();
                        out[[c, y, xx]] = (1.0 - d2 / r2).max(0.0);
                    }
                }
            }
            out
        }
    }
}

impl TargetModel for SequentialNet {
    fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("network serializes");
        format!("{}:{}", self.name, &hex::encode(Sha256::digest(bytes))[..16])
    }

    fn layers(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn channels(&self, layer: &str) -> Result<usize> {
        let pos = self.layer_position(layer)?;
        let mut channels = 3;
        for l in &self.layers[..=pos] {
            channels = out_channels(&l.op, channels).map_err(Error::Config)?;
        }
        Ok(channels)
    }

    fn forward(&self, image: &RgbImage, layer: &str) -> Result<Array3<f32>> {
        let pos = self.layer_position(layer)?;
        let mut x = self.input_tensor(image);
        for l in &self.layers[..=pos] {
            x = apply(&l.op, &x);
        }
        Ok(x)
    }

    fn forward_masked(&self, image: &RgbImage, layer: &str, mask_layer: &str, channels: &[usize]) -> Result<Array3<f32>> {
        let pos = self.layer_position(layer)?;
        let mask_pos = self.layer_position(mask_layer)?;
        let mut x = self.input_tensor(image);
        for (i, l) in self.layers[..=pos].iter().enumerate() {
            x = apply(&l.op, &x);
            if i == mask_pos {
                zero_channels(&mut x, channels)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn unknown_layer() {
        let net = SequentialNet::color_detector("t", &[[255, 0, 0]], 2);
        let img = RgbImage::new(4, 4);
        assert!(matches!(net.forward(&img, "nonexistent"), Err(Error::UnknownLayer(_))));
        assert!(matches!(net.channels("nope"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn color_detector_fires_on_its_colour_only() {
        let net = SequentialNet::color_detector("t", &[[255, 0, 0], [0, 0, 255]], 2);
        let img = RgbImage::from_fn(4, 4, |x, _| if x < 2 { Rgb([255, 0, 0]) } else { Rgb([128, 128, 128]) });
        let out = net.forward(&img, "pool").unwrap();
        assert_eq!(out.dim(), (2, 2, 2));
        assert_eq!(out[[0, 0, 0]], 1.0);
        assert_eq!(out[[0, 0, 1]], 0.0);
        assert!(out.slice(s![1, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(net.channels("pool").unwrap(), 2);
    }

    #[test]
    fn json_description_round_trips() {
        let net = SequentialNet::color_detector("t", &[[1, 2, 3]], 4);
        let json = serde_json::to_string(&net).unwrap();
        let back: SequentialNet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.fingerprint(), net.fingerprint());
        assert!(json.contains("\"op\":\"color_match\""));
    }

    #[test]
    fn invalid_conv_is_rejected() {
        let net = SequentialNet {
            name: "bad".into(),
            input_size: None,
            layers: vec![NamedLayer {
                name: "c".into(),
                op: LayerOp::Conv2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    weights: vec![0.0; 5],
                    bias: vec![0.0; 2],
                },
            }],
        };
        assert!(net.validate().is_err());
    }
}
