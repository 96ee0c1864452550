//! Arbitrary style transfer through predicted normalization parameters.
//!
//! A [`StylePredictor`] maps a style image to a [`StyleEmbedding`]: one
//! `(γ, β̂)` pair per channel of every conditional instance-normalization site
//! in the [`TransferNetwork`]. Sites, in embedding order:
//!
//! | site   | channels | position                                  |
//! |--------|----------|-------------------------------------------|
//! | `in`   | `w`      | after the 3×3 input convolution           |
//! | `down` | `2w`     | after the stride-2 convolution            |
//! | `mid`  | `2w`     | inside the residual block                 |
//! | `up`   | `w`      | after the ×2 upsample + 3×3 convolution   |
//!
//! so the embedding dimension is `6w`. Both networks consume UNIT-range
//! images; the transfer network ends in a sigmoid and emits UNIT range.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::backbone::{BackboneModel, FeatureMap, GramMatrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{ImageTensor, ValueRange};
use crate::params::{he_conv, uniform_matrix, Adam, ParamStore};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub const SITE_NAMES: [&str; 4] = ["in", "down", "mid", "up"];

/// Concatenated per-channel scales and shifts of every normalization site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
}

impl StyleEmbedding {
    pub fn new(scales: Vec<f64>, shifts: Vec<f64>) -> Result<Self> {
        if scales.len() != shifts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scales vs {} shifts",
                scales.len(),
                shifts.len()
            )));
        }
        if scales.iter().chain(&shifts).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor("non-finite embedding coordinate".into()));
        }
        Ok(StyleEmbedding { scales, shifts })
    }

    /// `γ = 1, β̂ = 0`: plain instance normalization at every site.
    pub fn identity(dimension: usize) -> Self {
        StyleEmbedding {
            scales: vec![1.0; dimension],
            shifts: vec![0.0; dimension],
        }
    }

    pub fn dimension(&self) -> usize {
        self.scales.len()
    }

    fn to_rows(&self) -> (Tensor, Tensor) {
        let d = self.dimension();
        (
            Tensor::from_vec(&[1, d], self.scales.clone()).expect("row"),
            Tensor::from_vec(&[1, d], self.shifts.clone()).expect("row"),
        )
    }
}

/// Weighted styles to combine.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendSpec {
    pub entries: Vec<(StyleEmbedding, f64)>,
}

impl BlendSpec {
    pub fn new(entries: Vec<(StyleEmbedding, f64)>) -> Self {
        BlendSpec { entries }
    }
}

/// Coordinate-wise `Σ wᵢ eᵢ` over both scales and shifts.
pub fn blend_embeddings(spec: &BlendSpec) -> Result<StyleEmbedding> {
    let first = spec
        .entries
        .first()
        .ok_or_else(|| Error::InvalidWeights("blend needs at least one entry".into()))?;
    let d = first.0.dimension();
    if let Some((e, _)) = spec.entries.iter().find(|(e, _)| e.dimension() != d) {
        return Err(Error::DimensionMismatch(format!("embeddings of dimension {d} and {}", e.dimension())));
    }
    if let Some((_, w)) = spec.entries.iter().find(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
    }
    let sum: f64 = spec.entries.iter().map(|(_, w)| w).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
    }
    let combine = |pick: fn(&StyleEmbedding) -> &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let mut acc = spec.entries[0].1 * pick(&spec.entries[0].0)[i];
                for (e, w) in &spec.entries[1..] {
                    acc += w * pick(e)[i];
                }
                acc
            })
            .collect()
    };
    Ok(StyleEmbedding {
        scales: combine(|e| &e.scales),
        shifts: combine(|e| &e.shifts),
    })
}

/// `α · style + (1 − α) · content`; α = 0 keeps the content's own style.
pub fn strength_blend(content: &StyleEmbedding, style: &StyleEmbedding, strength: f64) -> Result<StyleEmbedding> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidStrength(strength));
    }
    blend_embeddings(&BlendSpec::new(vec![(style.clone(), strength), (content.clone(), 1.0 - strength)]))
}

fn unit_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let mut samples = Vec::with_capacity(images.len());
    for img in images {
        if img.range() != ValueRange::Unit {
            return Err(Error::RangeMismatch {
                expected: "UNIT",
                found: "BACKBONE",
            });
        }
        let t = img.to_nchw();
        let s = t.shape().to_vec();
        samples.push(t.reshape(&s[1..])?);
    }
    Tensor::stack(&samples)
}

/// Two stride-2 convolutions, global average pooling and an affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePredictor {
    params: ParamStore,
    dimension: usize,
}

impl StylePredictor {
    /// Head bias starts at `γ = 1, β̂ = 0`; head weights are small.
    pub fn new(width: usize, dimension: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push("conv1.weight", he_conv(&mut rng, width, 3, 3));
        params.push("conv1.bias", Tensor::zeros(&[width]));
        params.push("conv2.weight", he_conv(&mut rng, 2 * width, width, 3));
        params.push("conv2.bias", Tensor::zeros(&[2 * width]));
        params.push("head.weight", uniform_matrix(&mut rng, 2 * dimension, 2 * width, 0.1));
        let mut bias = vec![0.0; 2 * dimension];
        bias[..dimension].fill(1.0);
        params.push("head.bias", Tensor::from_vec(&[2 * dimension], bias).expect("bias"));
        StylePredictor { params, dimension }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn from_params(params: ParamStore) -> Result<Self> {
        let head = params
            .by_name("head.bias")
            .ok_or_else(|| Error::MissingTensor("head.bias".into()))?;
        let dimension = head.numel() / 2;
        Ok(StylePredictor { params, dimension })
    }

    /// `[N, 2D]` node holding `γ ‖ β̂` per sample.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], style: Var) -> Var {
        let h = g.conv2d(style, vars[0], Some(vars[1]), 2, 1);
        let h = g.relu(h);
        let h = g.conv2d(h, vars[2], Some(vars[3]), 2, 1);
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h);
        g.linear(pooled, vars[4], vars[5])
    }
}

pub fn predict_style(predictor: &StylePredictor, style: &ImageTensor) -> Result<StyleEmbedding> {
    if style.height() < 4 || style.width() < 4 {
        return Err(Error::ShapeMismatch(format!(
            "style image {}x{} is smaller than 4x4",
            style.height(),
            style.width()
        )));
    }
    let mut g = Graph::new();
    let vars = predictor.params.bind(&mut g, false);
    let x = g.constant(unit_batch(&[style])?);
    let out = predictor.forward(&mut g, &vars, x);
    let row = g.value(out).data();
    let d = predictor.dimension;
    StyleEmbedding::new(row[..d].to_vec(), row[d..2 * d].to_vec())
}

/// Encoder/decoder with conditional instance normalization at four sites.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferNetwork {
    params: ParamStore,
    width: usize,
}

impl TransferNetwork {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut conv = |params: &mut ParamStore, name: &str, out_ch: usize, in_ch: usize| {
            params.push(format!("{name}.weight"), he_conv(&mut rng, out_ch, in_ch, 3));
            params.push(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        };
        conv(&mut params, "conv_in", width, 3);
        conv(&mut params, "conv_down", 2 * width, width);
        conv(&mut params, "conv_mid", 2 * width, 2 * width);
        conv(&mut params, "conv_up", width, 2 * width);
        conv(&mut params, "conv_out", 3, width);
        TransferNetwork { params, width }
    }

    fn from_params(params: ParamStore) -> Result<Self> {
        let w = params
            .by_name("conv_in.weight")
            .ok_or_else(|| Error::MissingTensor("conv_in.weight".into()))?;
        let width = w.shape()[0];
        Ok(TransferNetwork { params, width })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Channels per site, in embedding order.
    pub fn site_channels(&self) -> [usize; 4] {
        let w = self.width;
        [w, 2 * w, 2 * w, w]
    }

    pub fn embedding_dimension(&self) -> usize {
        self.site_channels().iter().sum()
    }

    /// Stylizes an NCHW UNIT batch. `scales`/`shifts` are `[N, D]` or `[1, D]`.
    /// Returns the output node and each site's modulated (pre-ReLU) activation.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], content: Var, scales: Var, shifts: Var) -> (Var, Vec<Var>) {
        let s = g.value(content).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let mut offset = 0;
        let mut sites = Vec::with_capacity(4);
        let channels = self.site_channels();
        let mut cin = |g: &mut Graph, x: Var, site: usize, sites: &mut Vec<Var>| {
            let c = channels[site];
            let normed = g.instance_norm(x, INSTANCE_NORM_EPS);
            let gamma = g.slice_cols(scales, offset, c);
            let beta = g.slice_cols(shifts, offset, c);
            offset += c;
            let y = g.channel_affine(normed, gamma, beta);
            sites.push(y);
            g.relu(y)
        };
        let x = g.conv2d(content, vars[0], Some(vars[1]), 1, 1);
        let x = cin(g, x, 0, &mut sites);
        let down = g.conv2d(x, vars[2], Some(vars[3]), 2, 1);
        let down = cin(g, down, 1, &mut sites);
        let mid = g.conv2d(down, vars[4], Some(vars[5]), 1, 1);
        let mid = cin(g, mid, 2, &mut sites);
        let merged = g.add(down, mid);
        let up = g.upsample2(merged);
        let up = g.crop(up, h, w);
        let up = g.conv2d(up, vars[6], Some(vars[7]), 1, 1);
        let up = cin(g, up, 3, &mut sites);
        let out = g.conv2d(up, vars[8], Some(vars[9]), 1, 1);
        (g.sigmoid(out), sites)
    }

    /// Modulated activations at every site for one content image.
    pub fn site_activations(&self, content: &ImageTensor, emb: &StyleEmbedding) -> Result<Vec<Tensor>> {
        let (g, _, sites) = self.run(content, emb)?;
        Ok(sites.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn run(&self, content: &ImageTensor, emb: &StyleEmbedding) -> Result<(Graph, Var, Vec<Var>)> {
        if emb.dimension() != self.embedding_dimension() {
            return Err(Error::DimensionMismatch(format!(
                "embedding has {} coordinates, network expects {}",
                emb.dimension(),
                self.embedding_dimension()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(unit_batch(&[content])?);
        let (sc, sh) = emb.to_rows();
        let sc = g.constant(sc);
        let sh = g.constant(sh);
        let (out, sites) = self.forward(&mut g, &vars, x, sc, sh);
        Ok((g, out, sites))
    }
}

pub fn stylize(net: &TransferNetwork, content: &ImageTensor, emb: &StyleEmbedding) -> Result<ImageTensor> {
    let (g, out, _) = net.run(content, emb)?;
    ImageTensor::from_chw(g.value(out), ValueRange::Unit)
}

/// Predictor and transfer network persisted together.
#[derive(Clone, Debug, PartialEq)]
pub struct AstModel {
    pub predictor: StylePredictor,
    pub transfer: TransferNetwork,
}

impl AstModel {
    /// Desk-scale pair: transfer width `width`, predictor width `width`.
    pub fn new(width: usize, seed: u64) -> Self {
        let transfer = TransferNetwork::new(width, seed);
        let predictor = StylePredictor::new(width, transfer.embedding_dimension(), seed.wrapping_add(1));
        AstModel { predictor, transfer }
    }

    pub fn to_archive(&self) -> Result<WeightArchive> {
        let mut a = WeightArchive::new();
        self.predictor.params.write_into(&mut a, "predictor.")?;
        self.transfer.params.write_into(&mut a, "transfer.")?;
        Ok(a)
    }

    /// Rebuilds both networks; widths are read from tensor shapes.
    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let conv_in = archive.tensor("transfer.conv_in.weight")?;
        let width = conv_in.shape()[0];
        let p_conv1 = archive.tensor("predictor.conv1.weight")?;
        let mut transfer = TransferNetwork::new(width, 0);
        transfer.params.read_from(archive, "transfer.")?;
        let mut predictor = StylePredictor::new(p_conv1.shape()[0], transfer.embedding_dimension(), 0);
        predictor.params.read_from(archive, "predictor.")?;
        let predictor = StylePredictor::from_params(predictor.params)?;
        let transfer = TransferNetwork::from_params(transfer.params)?;
        if predictor.dimension != transfer.embedding_dimension() {
            return Err(Error::DimensionMismatch("predictor and transfer network disagree".into()));
        }
        Ok(AstModel { predictor, transfer })
    }

    /// Stylizes `content` toward `style` at the given strength.
    pub fn transfer(&self, content: &ImageTensor, style: &ImageTensor, strength: f64) -> Result<ImageTensor> {
        let style_emb = predict_style(&self.predictor, style)?;
        let emb = if strength == 1.0 {
            style_emb
        } else {
            let content_emb = predict_style(&self.predictor, content)?;
            strength_blend(&content_emb, &style_emb, strength)?
        };
        stylize(&self.transfer, content, &emb)
    }
}

/// `Σ_i (1/n_i) ‖Gx_i − Gs_i‖²_F` over `(generated, style, n_i)` triples.
pub fn style_loss_from_grams(layers: &[(GramMatrix, GramMatrix, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (gx, gs, n) in layers {
        if gx.size != gs.size {
            return Err(Error::ShapeMismatch(format!("gram sizes {} vs {}", gx.size, gs.size)));
        }
        if *n == 0 {
            return Err(Error::ShapeMismatch("layer count n must be positive".into()));
        }
        let sq: f64 = gx.data.iter().zip(&gs.data).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / *n as f64;
    }
    Ok(total)
}

/// `Σ_j (1/n_j) ‖f_j(x) − f_j(c)‖²` over `(generated, content, n_j)` triples.
pub fn content_loss_from_features(layers: &[(FeatureMap, FeatureMap, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (fx, fc, n) in layers {
        if fx.data.len() != fc.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature sizes {} vs {}",
                fx.data.len(),
                fc.data.len()
            )));
        }
        if *n == 0 {
            return Err(Error::ShapeMismatch("layer count n must be positive".into()));
        }
        let sq: f64 = fx.data.iter().zip(&fc.data).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / *n as f64;
    }
    Ok(total)
}

/// Style loss between two normalized images at `layers`, with `n_i = channels × spatial`.
pub fn ast_style_loss<S: AsRef<str>>(x: &ImageTensor, s: &ImageTensor, model: &BackboneModel, layers: &[S]) -> Result<f64> {
    let fx = model.extract_features(x, layers)?;
    let fs = model.extract_features(s, layers)?;
    let triples: Vec<_> = layers
        .iter()
        .map(|l| {
            let (a, b) = (&fx[l.as_ref()], &fs[l.as_ref()]);
            (crate::backbone::gram_matrix(a), crate::backbone::gram_matrix(b), a.channels * a.spatial)
        })
        .collect();
    style_loss_from_grams(&triples)
}

/// Content loss between two normalized images at `layers`, with `n_j = channels × spatial`.
pub fn ast_content_loss<S: AsRef<str>>(x: &ImageTensor, c: &ImageTensor, model: &BackboneModel, layers: &[S]) -> Result<f64> {
    let fx = model.extract_features(x, layers)?;
    let fc = model.extract_features(c, layers)?;
    let triples: Vec<_> = layers
        .iter()
        .map(|l| {
            let (a, b) = (&fx[l.as_ref()], &fc[l.as_ref()]);
            (a.clone(), b.clone(), a.channels * a.spatial)
        })
        .collect();
    content_loss_from_features(&triples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AstTrainConfig {
    pub content_weight: f64,
    pub style_weight: f64,
    pub content_layers: Vec<String>,
    pub style_layers: Vec<String>,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AstTrainConfig {
    fn default() -> Self {
        AstTrainConfig {
            content_weight: 1.0,
            style_weight: 50.0,
            content_layers: vec!["conv2_1".into()],
            style_layers: vec!["conv1_1".into(), "conv2_1".into(), "conv3_1".into()],
            steps: 200,
            step_size: 2e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AstLosses {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Combined training objective for one batch of (content, style) pairs,
/// averaged over the batch.
pub struct AstObjective<'a> {
    model: &'a BackboneModel,
    cfg: &'a AstTrainConfig,
}

impl<'a> AstObjective<'a> {
    pub fn new(model: &'a BackboneModel, cfg: &'a AstTrainConfig) -> Result<Self> {
        for l in cfg.content_layers.iter().chain(&cfg.style_layers) {
            if !model.has_layer(l) {
                return Err(Error::UnknownLayer(l.clone()));
            }
        }
        Ok(AstObjective { model, cfg })
    }

    /// Builds the objective; returns `(total, losses)`.
    pub fn build(
        &self,
        g: &mut Graph,
        predictor: (&StylePredictor, &[Var]),
        transfer: (&TransferNetwork, &[Var]),
        contents: &Tensor,
        styles: &Tensor,
    ) -> Result<(Var, AstLosses)> {
        let batch = contents.shape()[0] as f64;
        let c = g.constant(contents.clone());
        let s = g.constant(styles.clone());
        let emb = predictor.0.forward(g, predictor.1, s);
        let d = predictor.0.dimension;
        let scales = g.slice_cols(emb, 0, d);
        let shifts = g.slice_cols(emb, d, d);
        let (x, _) = transfer.0.forward(g, transfer.1, c, scales, shifts);

        let xn = self.model.normalize_graph(g, x);
        let cn = self.model.normalize_graph(g, c);
        let sn = self.model.normalize_graph(g, s);
        let mut layers: Vec<&String> = self.cfg.content_layers.iter().collect();
        layers.extend(&self.cfg.style_layers);
        let fx = self.model.forward_graph(g, xn, &layers)?;
        let fc = self.model.forward_graph(g, cn, &self.cfg.content_layers)?;
        let fs = self.model.forward_graph(g, sn, &self.cfg.style_layers)?;

        let mut content_terms = Vec::new();
        for l in &self.cfg.content_layers {
            let shape = g.value(fx[l]).shape().to_vec();
            let n = (shape[1] * shape[2] * shape[3]) as f64;
            let target = g.detach(fc[l]);
            let diff = g.sub(fx[l], target);
            let sq = g.sum_squares(diff);
            content_terms.push((sq, 1.0 / (n * batch)));
        }
        let mut style_terms = Vec::new();
        for l in &self.cfg.style_layers {
            let shape = g.value(fx[l]).shape().to_vec();
            let n = (shape[1] * shape[2] * shape[3]) as f64;
            let gx = g.gram(fx[l]);
            let gs = g.gram(fs[l]);
            let gs = g.detach(gs);
            let diff = g.sub(gx, gs);
            let sq = g.sum_squares(diff);
            style_terms.push((sq, 1.0 / (n * batch)));
        }
        let content = g.lin_comb(&content_terms);
        let style = g.lin_comb(&style_terms);
        let total = g.lin_comb(&[(content, self.cfg.content_weight), (style, self.cfg.style_weight)]);
        let losses = AstLosses {
            content: g.value(content).item(),
            style: g.value(style).item(),
            total: g.value(total).item(),
        };
        Ok((total, losses))
    }

    /// Objective value without gradients.
    pub fn evaluate(&self, ast: &AstModel, contents: &Tensor, styles: &Tensor) -> Result<AstLosses> {
        let mut g = Graph::new();
        let pv = ast.predictor.params.bind(&mut g, false);
        let tv = ast.transfer.params.bind(&mut g, false);
        Ok(self
            .build(&mut g, (&ast.predictor, &pv), (&ast.transfer, &tv), contents, styles)?
            .1)
    }

    /// Objective value and gradients for predictor and transfer parameters, in store order.
    pub fn gradients(&self, ast: &AstModel, contents: &Tensor, styles: &Tensor) -> Result<(AstLosses, Vec<Tensor>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let pv = ast.predictor.params.bind(&mut g, true);
        let tv = ast.transfer.params.bind(&mut g, true);
        let (total, losses) = self.build(&mut g, (&ast.predictor, &pv), (&ast.transfer, &tv), contents, styles)?;
        let grads = g.backward(total);
        let collect = |vars: &[Var], store: &ParamStore| -> Vec<Tensor> {
            vars.iter()
                .zip(store.tensors())
                .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        Ok((losses, collect(&pv, &ast.predictor.params), collect(&tv, &ast.transfer.params)))
    }
}

/// Every content image paired with every style image.
pub fn all_pairs(contents: &[ImageTensor], styles: &[ImageTensor]) -> Result<(Tensor, Tensor)> {
    let mut cs = Vec::new();
    let mut ss = Vec::new();
    for c in contents {
        for s in styles {
            cs.push(c);
            ss.push(s);
        }
    }
    Ok((unit_batch(&cs)?, unit_batch(&ss)?))
}

/// Mean objective over all content × style pairs.
pub fn evaluate_ast(
    ast: &AstModel,
    contents: &[ImageTensor],
    styles: &[ImageTensor],
    model: &BackboneModel,
    cfg: &AstTrainConfig,
) -> Result<AstLosses> {
    let (c, s) = all_pairs(contents, styles)?;
    AstObjective::new(model, cfg)?.evaluate(ast, &c, &s)
}

/// Trains predictor and transfer network jointly with Adam on random
/// (content, style) minibatches. Returns the per-step batch objective.
pub fn train_ast(
    mut ast: AstModel,
    contents: &[ImageTensor],
    styles: &[ImageTensor],
    model: &BackboneModel,
    cfg: &AstTrainConfig,
) -> Result<(AstModel, Vec<AstLosses>)> {
    if contents.is_empty() || styles.is_empty() {
        return Err(Error::EmptyDataset("content and style sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidConfig("batch_size and step_size must be positive".into()));
    }
    let objective = AstObjective::new(model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.step_size, 0.9, 0.999, 1e-8);
    let np = ast.predictor.params.len();
    let mut content_order: Vec<usize> = (0..contents.len()).collect();
    let mut cursor = content_order.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut cb = Vec::with_capacity(cfg.batch_size);
        let mut sb = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == content_order.len() {
                content_order.shuffle(&mut rng);
                cursor = 0;
            }
            cb.push(&contents[content_order[cursor]]);
            cursor += 1;
            sb.push(&styles[rng.gen_range(0..styles.len())]);
        }
        let (c, s) = (unit_batch(&cb)?, unit_batch(&sb)?);
        let (losses, pg, tg) = objective.gradients(&ast, &c, &s)?;
        if !losses.total.is_finite() || pg.iter().chain(&tg).any(|t| !t.is_finite()) {
            return Err(Error::DivergedLoss { iteration: step });
        }
        for (i, grad) in pg.iter().enumerate() {
            adam.step(i, ast.predictor.params.get_mut(i).data_mut(), grad.data());
        }
        for (i, grad) in tg.iter().enumerate() {
            adam.step(np + i, ast.transfer.params.get_mut(i).data_mut(), grad.data());
        }
        trace.push(losses);
    }
    Ok((ast, trace))
}
