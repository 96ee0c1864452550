//! Convolutional feature backbone built from a declarative layer list.
//!
//! Only three layer kinds exist: 3×3 convolution (stride 1, zero padding 1),
//! ReLU and 2×2 max pooling. The 19-layer VGG preset and a tiny preset for
//! desk-scale runs are both plain layer lists; weights come from a
//! [`WeightArchive`] keyed `<layer_id>.weight` / `<layer_id>.bias`.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{ImageTensor, PreprocessSpec, ValueRange};
use crate::params::he_conv;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2x2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(id: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            layer_id: id.into(),
            kind: LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            },
        }
    }

    pub fn relu(id: impl Into<String>) -> Self {
        LayerSpec {
            layer_id: id.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn pool(id: impl Into<String>) -> Self {
        LayerSpec {
            layer_id: id.into(),
            kind: LayerKind::MaxPool2x2,
        }
    }
}

/// The 19-layer VGG layer list (16 convolutions, block names `convB_I`).
pub fn vgg19_spec() -> Vec<LayerSpec> {
    let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
    let mut specs = Vec::new();
    let mut in_ch = 3;
    for (b, &(width, convs)) in blocks.iter().enumerate() {
        for i in 1..=convs {
            specs.push(LayerSpec::conv(format!("conv{}_{i}", b + 1), in_ch, width));
            specs.push(LayerSpec::relu(format!("relu{}_{i}", b + 1)));
            in_ch = width;
        }
        specs.push(LayerSpec::pool(format!("pool{}", b + 1)));
    }
    specs
}

/// One conv + ReLU per block, pooling between blocks, using VGG-style names.
pub fn tiny_spec(widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut in_ch = 3;
    for (b, &width) in widths.iter().enumerate() {
        if b > 0 {
            specs.push(LayerSpec::pool(format!("pool{b}")));
        }
        specs.push(LayerSpec::conv(format!("conv{}_1", b + 1), in_ch, width));
        specs.push(LayerSpec::relu(format!("relu{}_1", b + 1)));
        in_ch = width;
    }
    specs
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
}

/// Immutable backbone with bound weights.
#[derive(Clone, Debug)]
pub struct BackboneModel {
    layers: Vec<Layer>,
    input_spec: PreprocessSpec,
}

/// Activations of one layer for one image, `channels × spatial`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer_id: String,
    pub channels: usize,
    pub spatial: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(layer_id: impl Into<String>, channels: usize, spatial: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * spatial {
            return Err(Error::ShapeMismatch(format!(
                "feature map {channels}x{spatial} needs {} values, got {}",
                channels * spatial,
                data.len()
            )));
        }
        Ok(FeatureMap {
            layer_id: layer_id.into(),
            channels,
            spatial,
            data,
        })
    }

    /// Splits an NCHW tensor into one map per sample.
    pub fn from_batch(layer_id: &str, t: &Tensor) -> Vec<FeatureMap> {
        let s = t.shape();
        let (c, m) = (s[1], s[2] * s[3]);
        t.data()
            .chunks(c * m)
            .map(|d| FeatureMap {
                layer_id: layer_id.to_string(),
                channels: c,
                spatial: m,
                data: d.to_vec(),
            })
            .collect()
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.spatial..(channel + 1) * self.spatial]
    }
}

/// Channel inner products of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub size: usize,
    pub data: Vec<f64>,
}

impl GramMatrix {
    pub fn from_data(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::ShapeMismatch(format!("{size}x{size} gram needs {} values", size * size)));
        }
        Ok(GramMatrix { size, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }
}

/// `G[i][j] = Σ_k f[i][k] f[j][k]`, unnormalized. The upper triangle is
/// computed and mirrored, so the result is exactly symmetric.
pub fn gram_matrix(f: &FeatureMap) -> GramMatrix {
    let c = f.channels;
    let mut data = vec![0.0; c * c];
    gemm(c, f.spatial, c, &f.data, false, &f.data, true, &mut data, 0.0);
    for i in 0..c {
        for j in 0..i {
            data[i * c + j] = data[j * c + i];
        }
    }
    GramMatrix { size: c, data }
}

fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    let mut channels = 3;
    for l in spec {
        if !seen.insert(l.layer_id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate layer id {}", l.layer_id)));
        }
        if let LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } = l.kind
        {
            if in_channels != channels {
                return Err(Error::ShapeMismatch(format!(
                    "{} expects {in_channels} input channels but receives {channels}",
                    l.layer_id
                )));
            }
            channels = out_channels;
        }
    }
    Ok(())
}

/// Binds every conv layer of `expected_spec` to its archive tensors.
pub fn load_weights(
    archive: &WeightArchive,
    expected_spec: &[LayerSpec],
    input_spec: PreprocessSpec,
) -> Result<BackboneModel> {
    archive.validate()?;
    validate_spec(expected_spec)?;
    let mut layers = Vec::with_capacity(expected_spec.len());
    for spec in expected_spec {
        let (weight, bias) = match spec.kind {
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => {
                let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                    let name = format!("{}.{suffix}", spec.layer_id);
                    let t = archive.tensor(&name)?;
                    if t.shape() != shape {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {}: {name} is {:?}, expected {shape:?}",
                            spec.layer_id,
                            t.shape()
                        )));
                    }
                    Ok(t)
                };
                (
                    Some(fetch("weight", &[out_channels, in_channels, 3, 3])?),
                    Some(fetch("bias", &[out_channels])?),
                )
            }
            _ => (None, None),
        };
        layers.push(Layer {
            spec: spec.clone(),
            weight,
            bias,
        });
    }
    Ok(BackboneModel { layers, input_spec })
}

impl BackboneModel {
    /// Seeded He-initialized weights with zero biases.
    pub fn random(spec: &[LayerSpec], input_spec: PreprocessSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = WeightArchive::new();
        for l in spec {
            if let LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } = l.kind
            {
                archive.insert(format!("{}.weight", l.layer_id), &he_conv(&mut rng, out_channels, in_channels, 3))?;
                archive.insert(format!("{}.bias", l.layer_id), &Tensor::zeros(&[out_channels]))?;
            }
        }
        load_weights(&archive, spec, input_spec)
    }

    /// Tiny three-conv backbone (8/16/16 channels) used for desk-scale runs.
    pub fn tiny(seed: u64) -> Self {
        Self::random(&tiny_spec(&[8, 16, 16]), PreprocessSpec::imagenet(64), seed).expect("tiny preset is valid")
    }

    pub fn to_archive(&self) -> Result<WeightArchive> {
        let mut archive = WeightArchive::new();
        for l in &self.layers {
            if let (Some(w), Some(b)) = (&l.weight, &l.bias) {
                archive.insert(format!("{}.weight", l.spec.layer_id), w)?;
                archive.insert(format!("{}.bias", l.spec.layer_id), b)?;
            }
        }
        Ok(archive)
    }

    pub fn input_spec(&self) -> &PreprocessSpec {
        &self.input_spec
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.spec.layer_id.as_str())
    }

    pub fn has_layer(&self, id: &str) -> bool {
        self.position(id).is_some()
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.layer_id == id)
    }

    /// Mutable access to a conv layer's weight and bias (for building test fixtures).
    pub fn conv_params_mut(&mut self, id: &str) -> Option<(&mut Tensor, &mut Tensor)> {
        let l = self.layers.iter_mut().find(|l| l.spec.layer_id == id)?;
        match (&mut l.weight, &mut l.bias) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        }
    }

    /// Runs the layers on an NCHW node and returns the nodes of the requested layers.
    pub fn forward_graph<S: AsRef<str>>(&self, g: &mut Graph, input: Var, layers: &[S]) -> Result<BTreeMap<String, Var>> {
        let mut wanted = BTreeMap::new();
        let mut last = 0;
        for id in layers {
            let id = id.as_ref();
            let pos = self.position(id).ok_or_else(|| Error::UnknownLayer(id.to_string()))?;
            wanted.insert(pos, id.to_string());
            last = last.max(pos);
        }
        let mut out = BTreeMap::new();
        if wanted.is_empty() {
            return Ok(out);
        }
        let mut x = input;
        for (i, layer) in self.layers[..=last].iter().enumerate() {
            x = match layer.spec.kind {
                LayerKind::Conv3x3 { .. } => {
                    let w = g.constant(layer.weight.clone().expect("bound conv"));
                    let b = g.constant(layer.bias.clone().expect("bound conv"));
                    g.conv2d(x, w, Some(b), 1, 1)
                }
                LayerKind::Relu => g.relu(x),
                LayerKind::MaxPool2x2 => g.max_pool2(x),
            };
            if let Some(id) = wanted.get(&i) {
                out.insert(id.clone(), x);
            }
        }
        Ok(out)
    }

    /// Maps a UNIT-range NCHW node into this backbone's normalized input space.
    pub fn normalize_graph(&self, g: &mut Graph, unit: Var) -> Var {
        let s = &self.input_spec;
        let scale: Vec<f64> = s.channel_stds.iter().map(|&d| 1.0 / d as f64).collect();
        let shift: Vec<f64> = (0..3)
            .map(|c| -(s.channel_means[c] as f64) / s.channel_stds[c] as f64)
            .collect();
        let scale = g.constant(Tensor::from_vec(&[1, 3], scale).expect("3 channels"));
        let shift = g.constant(Tensor::from_vec(&[1, 3], shift).expect("3 channels"));
        g.channel_affine(unit, scale, shift)
    }

    /// Feature maps of `img` (already normalized) at the requested layers.
    pub fn extract_features<S: AsRef<str>>(&self, img: &ImageTensor, layers: &[S]) -> Result<BTreeMap<String, FeatureMap>> {
        if img.range() != ValueRange::Backbone {
            return Err(Error::RangeMismatch {
                expected: "BACKBONE",
                found: "UNIT",
            });
        }
        let mut g = Graph::new();
        let x = g.constant(img.to_nchw());
        let nodes = self.forward_graph(&mut g, x, layers)?;
        Ok(nodes
            .into_iter()
            .map(|(id, v)| {
                let fm = FeatureMap::from_batch(&id, g.value(v)).remove(0);
                (id, fm)
            })
            .collect())
    }
}
