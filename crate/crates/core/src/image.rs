//! Decoding, resizing, normalization and encoding of RGB images.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize * Self::CHANNELS {
            return Err(Error::InvalidTensor(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width as usize * height as usize * Self::CHANNELS,
                pixels.len()
            )));
        }
        Ok(RawImage { width, height, pixels })
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }
}

/// Declared value interval of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Every element in `[0, 1]`.
    Unit,
    /// Per-channel mean-subtracted, std-scaled values fed to a backbone.
    Backbone,
}

impl ValueRange {
    fn name(self) -> &'static str {
        match self {
            ValueRange::Unit => "UNIT",
            ValueRange::Backbone => "BACKBONE",
        }
    }
}

/// `H × W × 3` float image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidSize(format!("{height}x{width} image")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::InvalidTensor(format!(
                "{height}x{width}x3 tensor needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite element {bad}")));
        }
        if range == ValueRange::Unit {
            if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidTensor(format!("UNIT tensor element {bad} outside [0, 1]")));
            }
        }
        Ok(ImageTensor {
            height,
            width,
            data,
            range,
        })
    }

    /// Constant-valued tensor.
    pub fn filled(height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    fn expect_range(&self, expected: ValueRange) -> Result<()> {
        if self.range != expected {
            return Err(Error::RangeMismatch {
                expected: expected.name(),
                found: self.range.name(),
            });
        }
        Ok(())
    }

    /// `[1, 3, H, W]` engine tensor.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * 3 + c] as f64;
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], out).expect("nchw shape")
    }

    /// Inverse of [`ImageTensor::to_nchw`] for one `[3, H, W]` or `[1, 3, H, W]` sample.
    /// UNIT tensors are clipped into `[0, 1]` on the way back.
    pub fn from_chw(t: &Tensor, range: ValueRange) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            _ => return Err(Error::ShapeMismatch(format!("expected one CHW image, got {s:?}"))),
        };
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        let src = t.data();
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = src[(ch * h + y) * w + x];
                    data[(y * w + x) * 3 + ch] = match range {
                        ValueRange::Unit => v.clamp(0.0, 1.0) as f32,
                        ValueRange::Backbone => v as f32,
                    };
                }
            }
        }
        Self::new(h, w, data, range)
    }
}

/// Backbone input preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
}

impl PreprocessSpec {
    pub fn new(target_size: usize, channel_means: [f32; 3], channel_stds: [f32; 3]) -> Result<Self> {
        let spec = PreprocessSpec {
            target_size,
            channel_means,
            channel_stds,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ImageNet statistics used by published VGG weights.
    pub fn imagenet(target_size: usize) -> Self {
        PreprocessSpec {
            target_size,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "target_size {} below minimum 32",
                self.target_size
            )));
        }
        if self.channel_stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("channel stds must be positive".into()));
        }
        Ok(())
    }

    /// Per-channel `[lo, hi]` interval that UNIT values map onto.
    pub fn normalized_bounds(&self) -> [(f64, f64); 3] {
        std::array::from_fn(|c| {
            let (m, s) = (self.channel_means[c] as f64, self.channel_stds[c] as f64);
            (-m / s, (1.0 - m) / s)
        })
    }
}

/// Decodes a PNG or JPEG stream into 8-bit RGB, dropping any alpha channel.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    let format = image::guess_format(bytes).map_err(|_| Error::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::UnsupportedFormat);
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (width, height) = rgb.dimensions();
    RawImage::new(width, height, rgb.into_raw())
}

pub fn to_unit_tensor(img: &RawImage) -> ImageTensor {
    let data = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    ImageTensor::new(img.height as usize, img.width as usize, data, ValueRange::Unit)
        .expect("RawImage invariants give a valid UNIT tensor")
}

/// Bilinear resize to `side × side` using half-pixel centres with edge clamping.
pub fn resize(t: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side < 1 {
        return Err(Error::InvalidSize("resize side must be at least 1".into()));
    }
    if side == t.height && side == t.width {
        return Ok(t.clone());
    }
    let axis = |out: usize, len: usize| -> (usize, usize, f64) {
        let scale = len as f64 / side as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut data = vec![0.0f32; side * side * 3];
    for oy in 0..side {
        let (y0, y1, fy) = axis(oy, t.height);
        for ox in 0..side {
            let (x0, x1, fx) = axis(ox, t.width);
            for c in 0..3 {
                let p = |y: usize, x: usize| t.get(y, x, c) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let mut v = (top * (1.0 - fy) + bottom * fy) as f32;
                if t.range == ValueRange::Unit {
                    v = v.clamp(0.0, 1.0);
                }
                data[(oy * side + ox) * 3 + c] = v;
            }
        }
    }
    ImageTensor::new(side, side, data, t.range)
}

/// Per-channel `(v − mean) / std`; UNIT in, BACKBONE out.
pub fn normalize(t: &ImageTensor, spec: &PreprocessSpec) -> Result<ImageTensor> {
    t.expect_range(ValueRange::Unit)?;
    let data = t
        .data
        .chunks(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - spec.channel_means[c]) / spec.channel_stds[c]))
        .collect();
    ImageTensor::new(t.height, t.width, data, ValueRange::Backbone)
}

/// Per-channel `v · std + mean`, clipped to `[0, 1]`; BACKBONE in, UNIT out.
pub fn denormalize(t: &ImageTensor, spec: &PreprocessSpec) -> Result<ImageTensor> {
    t.expect_range(ValueRange::Backbone)?;
    let data = t
        .data
        .chunks(3)
        .flat_map(|px| {
            (0..3).map(move |c| (px[c] * spec.channel_stds[c] + spec.channel_means[c]).clamp(0.0, 1.0))
        })
        .collect();
    ImageTensor::new(t.height, t.width, data, ValueRange::Unit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodeFormat {
    Png,
    Jpeg,
}

/// Quantizes a UNIT tensor (clip, scale to 255, round half up) and encodes it.
pub fn encode_image(t: &ImageTensor, format: EncodeFormat) -> Result<Vec<u8>> {
    t.expect_range(ValueRange::Unit)?;
    let pixels: Vec<u8> = t.data.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    let (w, h) = (t.width as u32, t.height as u32);
    let res = match format {
        EncodeFormat::Png => PngEncoder::new(Cursor::new(&mut out)).write_image(&pixels, w, h, ExtendedColorType::Rgb8),
        EncodeFormat::Jpeg => {
            JpegEncoder::new_with_quality(Cursor::new(&mut out), 95).write_image(&pixels, w, h, ExtendedColorType::Rgb8)
        }
    };
    res.map_err(|e| Error::CorruptImage(format!("encode failed: {e}")))?;
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    let scaled = v.clamp(0.0, 1.0) as f64 * 255.0;
    (scaled + 0.5).floor().min(255.0) as u8
}
