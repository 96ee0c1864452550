//! Optimization-based style transfer: gradient descent on the pixels of a
//! generated image against content and Gram-matrix style targets.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, FeatureMap, GramMatrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{ImageTensor, ValueRange};
use crate::params::{Adam, Sgd};
use crate::tensor::Tensor;

/// `½ Σ (F − P)²`.
pub fn content_loss(generated: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if generated.channels != target.channels || generated.spatial != target.spatial {
        return Err(Error::ShapeMismatch(format!(
            "content features {}x{} vs {}x{}",
            generated.channels, generated.spatial, target.channels, target.spatial
        )));
    }
    Ok(0.5
        * generated
            .data
            .iter()
            .zip(&target.data)
            .map(|(f, p)| (f - p) * (f - p))
            .sum::<f64>())
}

/// Per-layer style error `1/(4N²M²) Σ (Gx − Ga)²` for `N` channels over `M` positions.
pub fn layer_style_error(generated: &GramMatrix, target: &GramMatrix, channels: usize, spatial: usize) -> Result<f64> {
    if generated.size != target.size || generated.size != channels {
        return Err(Error::ShapeMismatch(format!(
            "gram sizes {} / {} for {channels} channels",
            generated.size, target.size
        )));
    }
    if spatial == 0 {
        return Err(Error::ShapeMismatch("spatial extent must be positive".into()));
    }
    let (n, m) = (channels as f64, spatial as f64);
    let sq: f64 = generated
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (4.0 * n * n * m * m))
}

/// `Σ w_l E_l`.
pub fn style_loss(errors: &[f64], weights: &[f64]) -> Result<f64> {
    if errors.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer errors but {} weights",
            errors.len(),
            weights.len()
        )));
    }
    Ok(errors.iter().zip(weights).map(|(e, w)| e * w).sum())
}

/// `α · content + β · style`.
pub fn total_loss(content: f64, style: f64, content_weight: f64, style_weight: f64) -> f64 {
    content_weight * content + style_weight * style
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    ContentCopy,
    Noise,
}

/// Pixel update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelOptimizer {
    /// Fixed-step gradient descent; `momentum = 0` is the plain method.
    GradientDescent { momentum: f64 },
    /// Per-pixel adaptive steps of size roughly `step_size`.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatysConfig {
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub layer_weights: Vec<f64>,
    pub content_weight: f64,
    pub style_weight: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub optimizer: PixelOptimizer,
    pub init: Init,
    pub seed: u64,
}

impl GatysConfig {
    fn with_layers(content: &[&str], style: &[&str]) -> Self {
        GatysConfig {
            content_layers: content.iter().map(|s| s.to_string()).collect(),
            style_layers: style.iter().map(|s| s.to_string()).collect(),
            layer_weights: vec![1.0 / style.len() as f64; style.len()],
            content_weight: 1.0,
            style_weight: 1e3,
            iterations: 100,
            step_size: 0.02,
            optimizer: PixelOptimizer::GradientDescent { momentum: 0.0 },
            init: Init::ContentCopy,
            seed: 0,
        }
    }

    /// Content at `conv4_2`, style at `conv1_1`…`conv5_1` with equal weights.
    pub fn vgg19() -> Self {
        Self::with_layers(&["conv4_2"], &["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"])
    }

    /// Layer choice for [`BackboneModel::tiny`].
    pub fn tiny() -> Self {
        Self::with_layers(&["conv2_1"], &["conv1_1", "conv2_1", "conv3_1"])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layer_weights.len() != self.style_layers.len() {
            return bad("layer_weights must have one entry per style layer");
        }
        if self.layer_weights.iter().any(|w| !(*w >= 0.0)) || !(self.layer_weights.iter().sum::<f64>() > 0.0) {
            return bad("layer weights must be non-negative with a positive sum");
        }
        if !(self.content_weight > 0.0) || !(self.style_weight > 0.0) {
            return bad("content and style weights must be positive");
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub per_layer_e: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub losses: Vec<LossBreakdown>,
    pub wall_times: Vec<f64>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.total).collect()
    }
}

/// The total loss as a function of the generated image, with precomputed targets.
pub struct GatysObjective<'a> {
    model: &'a BackboneModel,
    cfg: GatysConfig,
    content_targets: Vec<Tensor>,
    style_targets: Vec<Tensor>,
}

impl<'a> GatysObjective<'a> {
    /// `content` and `style` must already be normalized for `model`.
    pub fn new(model: &'a BackboneModel, content: &ImageTensor, style: &ImageTensor, cfg: &GatysConfig) -> Result<Self> {
        cfg.validate()?;
        for img in [content, style] {
            if img.range() != ValueRange::Backbone {
                return Err(Error::RangeMismatch {
                    expected: "BACKBONE",
                    found: "UNIT",
                });
            }
        }
        let mut g = Graph::new();
        let c = g.constant(content.to_nchw());
        let feats = model.forward_graph(&mut g, c, &cfg.content_layers)?;
        let content_targets = cfg.content_layers.iter().map(|l| g.value(feats[l]).clone()).collect();
        let s = g.constant(style.to_nchw());
        let feats = model.forward_graph(&mut g, s, &cfg.style_layers)?;
        let style_targets = cfg
            .style_layers
            .iter()
            .map(|l| {
                let gram = g.gram(feats[l]);
                g.value(gram).clone()
            })
            .collect();
        Ok(GatysObjective {
            model,
            cfg: cfg.clone(),
            content_targets,
            style_targets,
        })
    }

    fn build(&self, g: &mut Graph, x: Var) -> Result<(Var, LossBreakdown)> {
        let mut layers: Vec<&String> = self.cfg.content_layers.iter().collect();
        layers.extend(&self.cfg.style_layers);
        let feats = self.model.forward_graph(g, x, &layers)?;

        let mut content_terms = Vec::new();
        for (layer, target) in self.cfg.content_layers.iter().zip(&self.content_targets) {
            let p = g.constant(target.clone());
            let d = g.sub(feats[layer], p);
            let sq = g.sum_squares(d);
            content_terms.push((sq, 0.5));
        }
        let content = g.lin_comb(&content_terms);

        let mut style_terms = Vec::new();
        let mut per_layer_e = Vec::new();
        for ((layer, target), w) in self.cfg.style_layers.iter().zip(&self.style_targets).zip(&self.cfg.layer_weights) {
            let s = g.value(feats[layer]).shape().to_vec();
            let (n, m) = (s[1] as f64, (s[2] * s[3]) as f64);
            let gram = g.gram(feats[layer]);
            let a = g.constant(target.clone());
            let d = g.sub(gram, a);
            let sq = g.sum_squares(d);
            let e = g.scale(sq, 1.0 / (4.0 * n * n * m * m));
            per_layer_e.push(g.value(e).item());
            style_terms.push((e, *w));
        }
        let style = g.lin_comb(&style_terms);
        let total = g.lin_comb(&[(content, self.cfg.content_weight), (style, self.cfg.style_weight)]);
        let breakdown = LossBreakdown {
            content: g.value(content).item(),
            style: g.value(style).item(),
            per_layer_e,
            total: g.value(total).item(),
        };
        Ok((total, breakdown))
    }

    /// Loss at a normalized `[1, 3, H, W]` image.
    pub fn loss(&self, x: &Tensor) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        Ok(self.build(&mut g, xv)?.1)
    }

    /// Loss and its gradient with respect to every pixel of `x`.
    pub fn loss_and_gradient(&self, x: &Tensor) -> Result<(LossBreakdown, Tensor)> {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let (total, breakdown) = self.build(&mut g, xv)?;
        let grads = g.backward(total);
        let grad = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((breakdown, grad))
    }
}

/// Optimizes a generated image for `cfg.iterations` steps and returns it in UNIT range.
pub fn run_gatys(
    content: &ImageTensor,
    style: &ImageTensor,
    model: &BackboneModel,
    cfg: &GatysConfig,
) -> Result<(ImageTensor, IterationTrace)> {
    let objective = GatysObjective::new(model, content, style, cfg)?;
    let spec = model.input_spec();
    let bounds = spec.normalized_bounds();
    let (h, w) = (content.height(), content.width());

    let mut x = match cfg.init {
        Init::ContentCopy => content.to_nchw(),
        Init::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut t = Tensor::zeros(&[1, 3, h, w]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let c = i / (h * w);
                let u: f64 = rng.gen_range(0.0..=1.0);
                *v = (u - spec.channel_means[c] as f64) / spec.channel_stds[c] as f64;
            }
            t
        }
    };

    let mut sgd = Sgd::new(cfg.step_size, 0.0);
    let mut adam = Adam::new(cfg.step_size, 0.9, 0.999, 1e-8);
    if let PixelOptimizer::GradientDescent { momentum } = cfg.optimizer {
        sgd.momentum = momentum;
    }

    let mut trace = IterationTrace::default();
    for iteration in 0..cfg.iterations {
        let start = Instant::now();
        let (breakdown, grad) = objective.loss_and_gradient(&x)?;
        if !breakdown.total.is_finite() || !grad.is_finite() {
            return Err(Error::DivergedLoss { iteration });
        }
        match cfg.optimizer {
            PixelOptimizer::GradientDescent { .. } => sgd.step(0, x.data_mut(), grad.data()),
            PixelOptimizer::Adam => adam.step(0, x.data_mut(), grad.data()),
        }
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let (lo, hi) = bounds[i / (h * w)];
            *v = v.clamp(lo, hi);
        }
        trace.losses.push(breakdown);
        trace.wall_times.push(start.elapsed().as_secs_f64());
    }

    let mut unit = x;
    for (i, v) in unit.data_mut().iter_mut().enumerate() {
        let c = i / (h * w);
        *v = *v * spec.channel_stds[c] as f64 + spec.channel_means[c] as f64;
    }
    let out = ImageTensor::from_chw(&unit, ValueRange::Unit)?;
    Ok((out, trace))
}
