//! Desk-scale unpaired translation between two image domains with
//! least-squares adversarial losses and an L1 cycle-consistency term.
//!
//! Generators work in `[-1, 1]`; [`translate`] maps UNIT images in and out.
//! Cycle losses are reported in UNIT units (half the `[-1, 1]` L1 distance).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{ImageTensor, ValueRange};
use crate::params::{he_conv, Adam, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// `mean((scores − t)²)`, `t = 1` for real and `0` for fake.
pub fn adversarial_loss(scores: &[f64], target_real: bool) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let t = if target_real { 1.0 } else { 0.0 };
    scores.iter().map(|s| (s - t) * (s - t)).sum::<f64>() / scores.len() as f64
}

/// Mean absolute element-wise difference.
pub fn cycle_consistency_loss(x: &ImageTensor, reconstructed: &ImageTensor) -> Result<f64> {
    if x.height() != reconstructed.height() || x.width() != reconstructed.width() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            x.height(),
            x.width(),
            reconstructed.height(),
            reconstructed.width()
        )));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// `adv + λ · cycle`.
pub fn cyclegan_total_loss(adv: f64, cycle: f64, lambda: f64) -> f64 {
    adv + lambda * cycle
}

fn push_conv(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out_ch: usize, in_ch: usize) {
    params.push(format!("{name}.weight"), he_conv(rng, out_ch, in_ch, 3));
    params.push(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
}

/// ResNet-style generator: a 3×3 stem, two stride-2 encoder convolutions,
/// `R` residual blocks, two upsample + 3×3 decoder convolutions and a tanh head.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    params: ParamStore,
    width: usize,
    residual_blocks: usize,
}

impl Generator {
    pub fn new(width: usize, residual_blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        push_conv(&mut p, &mut rng, "stem", width, 3);
        push_conv(&mut p, &mut rng, "down1", 2 * width, width);
        push_conv(&mut p, &mut rng, "down2", 4 * width, 2 * width);
        for i in 0..residual_blocks {
            push_conv(&mut p, &mut rng, &format!("res{i}.conv1"), 4 * width, 4 * width);
            push_conv(&mut p, &mut rng, &format!("res{i}.conv2"), 4 * width, 4 * width);
        }
        push_conv(&mut p, &mut rng, "up1", 2 * width, 4 * width);
        push_conv(&mut p, &mut rng, "up2", width, 2 * width);
        push_conv(&mut p, &mut rng, "head", 3, width);
        let head = p.index_of("head.weight").expect("head");
        let scaled = p.get(head).map(|v| 0.1 * v);
        *p.get_mut(head) = scaled;
        Generator {
            params: p,
            width,
            residual_blocks,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn residual_blocks(&self) -> usize {
        self.residual_blocks
    }

    /// `[N, 3, H, W]` in `[-1, 1]` to the same shape in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Var {
        let s = g.value(x).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let block = |g: &mut Graph, x: Var, i: usize, stride: usize| {
            let y = g.conv2d(x, v[2 * i], Some(v[2 * i + 1]), stride, 1);
            let y = g.instance_norm(y, NORM_EPS);
            g.relu(y)
        };
        let x0 = block(g, x, 0, 1);
        let d1 = block(g, x0, 1, 2);
        let mut hcur = block(g, d1, 2, 2);
        let mut slot = 3;
        for _ in 0..self.residual_blocks {
            let r = block(g, hcur, slot, 1);
            let r = g.conv2d(r, v[2 * (slot + 1)], Some(v[2 * (slot + 1) + 1]), 1, 1);
            let r = g.instance_norm(r, NORM_EPS);
            hcur = g.add(hcur, r);
            slot += 2;
        }
        let u = g.upsample2(hcur);
        let u = g.crop(u, g.value(d1).shape()[2], g.value(d1).shape()[3]);
        let u = block(g, u, slot, 1);
        let u = g.upsample2(u);
        let u = g.crop(u, h, w);
        let u = block(g, u, slot + 1, 1);
        let out = g.conv2d(u, v[2 * (slot + 2)], Some(v[2 * (slot + 2) + 1]), 1, 1);
        g.tanh(out)
    }

    fn from_archive(archive: &WeightArchive, prefix: &str) -> Result<Self> {
        let stem = archive.tensor(&format!("{prefix}stem.weight"))?;
        let width = stem.shape()[0];
        let residual_blocks = (0..)
            .take_while(|i| archive.contains(&format!("{prefix}res{i}.conv1.weight")))
            .count();
        let mut g = Generator::new(width, residual_blocks, 0);
        g.params.read_from(archive, prefix)?;
        Ok(g)
    }
}

/// Patch discriminator: two stride-2 convolutions and a 1-channel score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    params: ParamStore,
}

impl Discriminator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        push_conv(&mut p, &mut rng, "conv1", width, 3);
        push_conv(&mut p, &mut rng, "conv2", 2 * width, width);
        push_conv(&mut p, &mut rng, "score", 1, 2 * width);
        Discriminator { params: p }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[N, 3, H, W]` in `[-1, 1]` to `[N, 1, H/4, W/4]` scores.
    pub fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Var {
        let h = g.conv2d(x, v[0], Some(v[1]), 2, 1);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.conv2d(h, v[2], Some(v[3]), 2, 1);
        let h = g.instance_norm(h, NORM_EPS);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        g.conv2d(h, v[4], Some(v[5]), 1, 1)
    }

    /// Score map for one UNIT image.
    pub fn scores(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let x = g.constant(to_signed(&[img])?);
        let s = self.forward(&mut g, &v, x);
        Ok(g.value(s).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleGanConfig {
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub image_side: usize,
    pub residual_blocks: usize,
    pub width: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        CycleGanConfig {
            lambda: 10.0,
            steps: 500,
            step_size: 2e-3,
            image_side: 32,
            residual_blocks: 2,
            width: 8,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl CycleGanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.image_side < 16 {
            return Err(Error::InvalidConfig(format!("image_side {} below 16", self.image_side)));
        }
        if self.width == 0 || self.batch_size == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("width, batch_size and step_size must be positive".into()));
        }
        Ok(())
    }
}

/// Non-empty set of equally sized UNIT images from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    images: Vec<ImageTensor>,
}

impl DomainDataset {
    pub fn new(images: Vec<ImageTensor>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptyDataset("domain has no images".into()))?;
        let (h, w) = (first.height(), first.width());
        for img in &images {
            if img.height() != h || img.width() != w {
                return Err(Error::ShapeMismatch(format!(
                    "domain mixes {h}x{w} and {}x{} images",
                    img.height(),
                    img.width()
                )));
            }
            if img.range() != ValueRange::Unit {
                return Err(Error::RangeMismatch {
                    expected: "UNIT",
                    found: "BACKBONE",
                });
            }
        }
        Ok(DomainDataset { images })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images[0].height()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub adv_g: f64,
    pub adv_f: f64,
    pub disc_x: f64,
    pub disc_y: f64,
    pub cycle: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLosses>,
}

impl TrainReport {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean cycle loss over `range` of steps.
    pub fn mean_cycle(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.steps[range];
        slice.iter().map(|s| s.cycle).sum::<f64>() / slice.len() as f64
    }
}

fn to_signed(images: &[&ImageTensor]) -> Result<Tensor> {
    let mut samples = Vec::with_capacity(images.len());
    for img in images {
        if img.range() != ValueRange::Unit {
            return Err(Error::RangeMismatch {
                expected: "UNIT",
                found: "BACKBONE",
            });
        }
        let t = img.to_nchw().map(|v| 2.0 * v - 1.0);
        let s = t.shape().to_vec();
        samples.push(t.reshape(&s[1..])?);
    }
    Tensor::stack(&samples)
}

/// Anything that maps one UNIT image to another.
pub trait ImageTranslator {
    fn translate_image(&self, img: &ImageTensor) -> Result<ImageTensor>;
}

impl ImageTranslator for Generator {
    fn translate_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        translate(self, img)
    }
}

/// Mean over `batch` of `cycle_consistency_loss(x, back(forth(x)))`.
pub fn batch_cycle_loss(forth: &dyn ImageTranslator, back: &dyn ImageTranslator, batch: &[ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    for x in batch {
        let rec = back.translate_image(&forth.translate_image(x)?)?;
        total += cycle_consistency_loss(x, &rec)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Runs a generator on one UNIT image; output is UNIT and the same size.
pub fn translate(generator: &Generator, img: &ImageTensor) -> Result<ImageTensor> {
    if img.height() < 4 || img.width() < 4 {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} is smaller than 4x4",
            img.height(),
            img.width()
        )));
    }
    let mut g = Graph::new();
    let v = generator.params.bind(&mut g, false);
    let x = g.constant(to_signed(&[img])?);
    let y = generator.forward(&mut g, &v, x);
    let unit = g.value(y).map(|v| (v + 1.0) * 0.5);
    ImageTensor::from_chw(&unit, ValueRange::Unit)
}

/// Both generators of a trained (or initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGanModel {
    /// X → Y
    pub g: Generator,
    /// Y → X
    pub f: Generator,
}

impl CycleGanModel {
    pub fn new(width: usize, residual_blocks: usize, seed: u64) -> Self {
        CycleGanModel {
            g: Generator::new(width, residual_blocks, seed),
            f: Generator::new(width, residual_blocks, seed.wrapping_add(1)),
        }
    }

    pub fn to_archive(&self) -> Result<WeightArchive> {
        let mut a = WeightArchive::new();
        self.g.params.write_into(&mut a, "g.")?;
        self.f.params.write_into(&mut a, "f.")?;
        Ok(a)
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        Ok(CycleGanModel {
            g: Generator::from_archive(archive, "g.")?,
            f: Generator::from_archive(archive, "f.")?,
        })
    }
}

fn sample_batch<'a>(rng: &mut ChaCha8Rng, set: &'a DomainDataset, n: usize) -> Vec<&'a ImageTensor> {
    (0..n).map(|_| &set.images[rng.gen_range(0..set.len())]).collect()
}

/// Alternating generator / discriminator updates with Adam (β₁ = 0.5).
pub fn train_cyclegan(x_set: &DomainDataset, y_set: &DomainDataset, cfg: &CycleGanConfig) -> Result<(Generator, Generator, TrainReport)> {
    let (model, report) = train_cyclegan_from(CycleGanModel::new(cfg.width, cfg.residual_blocks, cfg.seed), x_set, y_set, cfg)?;
    Ok((model.g, model.f, report))
}

/// As [`train_cyclegan`], starting from the given generators.
pub fn train_cyclegan_from(
    mut model: CycleGanModel,
    x_set: &DomainDataset,
    y_set: &DomainDataset,
    cfg: &CycleGanConfig,
) -> Result<(CycleGanModel, TrainReport)> {
    cfg.validate()?;
    for set in [x_set, y_set] {
        if set.side() != cfg.image_side || set.images[0].width() != cfg.image_side {
            return Err(Error::ShapeMismatch(format!(
                "dataset images are {}x{}, config expects {}",
                set.side(),
                set.images[0].width(),
                cfg.image_side
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut d_x = Discriminator::new(cfg.width, cfg.seed.wrapping_add(2));
    let mut d_y = Discriminator::new(cfg.width, cfg.seed.wrapping_add(3));
    let mut gen_opt = Adam::new(cfg.step_size, 0.5, 0.999, 1e-8);
    let mut disc_opt = Adam::new(cfg.step_size, 0.5, 0.999, 1e-8);
    let ng = model.g.params.len();
    let nd = d_x.params.len();
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let xb = to_signed(&sample_batch(&mut rng, x_set, cfg.batch_size))?;
        let yb = to_signed(&sample_batch(&mut rng, y_set, cfg.batch_size))?;

        // generator update
        let mut g = Graph::new();
        let gv = model.g.params.bind(&mut g, true);
        let fv = model.f.params.bind(&mut g, true);
        let dxv = d_x.params.bind(&mut g, false);
        let dyv = d_y.params.bind(&mut g, false);
        let x = g.constant(xb.clone());
        let y = g.constant(yb.clone());
        let fake_y = model.g.forward(&mut g, &gv, x);
        let rec_x = model.f.forward(&mut g, &fv, fake_y);
        let fake_x = model.f.forward(&mut g, &fv, y);
        let rec_y = model.g.forward(&mut g, &gv, fake_x);
        let sy = d_y.forward(&mut g, &dyv, fake_y);
        let adv_g = g.mean_sq_diff_const(sy, 1.0);
        let sx = d_x.forward(&mut g, &dxv, fake_x);
        let adv_f = g.mean_sq_diff_const(sx, 1.0);
        let dx_ = g.sub(rec_x, x);
        let cyc_x = g.mean_abs(dx_);
        let dy_ = g.sub(rec_y, y);
        let cyc_y = g.mean_abs(dy_);
        // halve: L1 in [-1, 1] is twice the UNIT distance
        let cycle = g.lin_comb(&[(cyc_x, 0.5), (cyc_y, 0.5)]);
        let total = g.lin_comb(&[(adv_g, 1.0), (adv_f, 1.0), (cycle, cfg.lambda)]);
        let grads = g.backward(total);
        let fake_y_t = g.value(fake_y).clone();
        let fake_x_t = g.value(fake_x).clone();
        let mut losses = StepLosses {
            adv_g: g.value(adv_g).item(),
            adv_f: g.value(adv_f).item(),
            disc_x: 0.0,
            disc_y: 0.0,
            cycle: g.value(cycle).item(),
            total: g.value(total).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::DivergedLoss { iteration: step });
        }
        gen_opt.update(&mut model.g.params, &gv, &grads, 0);
        gen_opt.update(&mut model.f.params, &fv, &grads, ng);

        // discriminator update on detached fakes
        let mut g = Graph::new();
        let dxv = d_x.params.bind(&mut g, true);
        let dyv = d_y.params.bind(&mut g, true);
        let disc_loss = |g: &mut Graph, d: &Discriminator, v: &[Var], real: Tensor, fake: Tensor| {
            let r = g.constant(real);
            let f = g.constant(fake);
            let sr = d.forward(g, v, r);
            let sf = d.forward(g, v, f);
            let lr = g.mean_sq_diff_const(sr, 1.0);
            let lf = g.mean_sq_diff_const(sf, 0.0);
            g.lin_comb(&[(lr, 0.5), (lf, 0.5)])
        };
        let ly = disc_loss(&mut g, &d_y, &dyv, yb, fake_y_t);
        let lx = disc_loss(&mut g, &d_x, &dxv, xb, fake_x_t);
        let both = g.lin_comb(&[(lx, 1.0), (ly, 1.0)]);
        losses.disc_x = g.value(lx).item();
        losses.disc_y = g.value(ly).item();
        if !g.value(both).item().is_finite() {
            return Err(Error::DivergedLoss { iteration: step });
        }
        let grads = g.backward(both);
        disc_opt.update(&mut d_x.params, &dxv, &grads, 0);
        disc_opt.update(&mut d_y.params, &dyv, &grads, nd);

        report.steps.push(losses);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{shapes, Shape};

    #[test]
    fn adversarial_examples() {
        assert_eq!(adversarial_loss(&[1.0; 4], true), 0.0);
        assert_eq!(adversarial_loss(&[0.0; 4], false), 0.0);
        assert_eq!(adversarial_loss(&[0.5; 4], true), 0.25);
        assert_eq!(adversarial_loss(&[0.5; 4], false), 0.25);
    }

    #[test]
    fn cycle_examples() {
        let zeros = ImageTensor::filled(4, 4, 0.0, ValueRange::Unit).unwrap();
        let ones = ImageTensor::filled(4, 4, 1.0, ValueRange::Unit).unwrap();
        assert_eq!(cycle_consistency_loss(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(cycle_consistency_loss(&zeros, &ones).unwrap(), 1.0);
        assert_eq!(
            cycle_consistency_loss(&ones, &zeros).unwrap(),
            cycle_consistency_loss(&zeros, &ones).unwrap()
        );
        let small = ImageTensor::filled(2, 2, 0.0, ValueRange::Unit).unwrap();
        assert!(matches!(cycle_consistency_loss(&zeros, &small), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn total_examples() {
        assert_eq!(cyclegan_total_loss(1.5, 2.0, 0.0), 1.5);
        assert_eq!(cyclegan_total_loss(1.0, 2.0, 10.0), 21.0);
        assert_eq!(cyclegan_total_loss(0.7, 0.0, 123.0), 0.7);
    }

    #[test]
    fn zero_head_translates_to_mid_grey() {
        let mut gen = Generator::new(4, 1, 0);
        for name in ["head.weight", "head.bias"] {
            let i = gen.params.index_of(name).unwrap();
            gen.params.get_mut(i).data_mut().fill(0.0);
        }
        let img = &shapes(Shape::Square, 1, 16, 0)[0];
        let out = translate(&gen, img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn translate_preserves_shape_and_range() {
        let gen = Generator::new(4, 2, 1);
        for side in [16, 17, 22] {
            let img = &shapes(Shape::Circle, 1, side, side as u64)[0];
            let a = translate(&gen, img).unwrap();
            assert_eq!((a.height(), a.width()), (side, side));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, translate(&gen, img).unwrap());
        }
    }

    #[test]
    fn discriminator_emits_a_score_map() {
        let d = Discriminator::new(4, 0);
        let img = &shapes(Shape::Circle, 1, 32, 0)[0];
        assert_eq!(d.scores(img).unwrap().len(), 64);
    }

    struct Identity;
    impl ImageTranslator for Identity {
        fn translate_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
            Ok(img.clone())
        }
    }

    struct Invert;
    impl ImageTranslator for Invert {
        fn translate_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
            let data = img.data().iter().map(|v| 1.0 - v).collect();
            ImageTensor::new(img.height(), img.width(), data, ValueRange::Unit)
        }
    }

    #[test]
    fn inverse_stub_pairs_have_zero_cycle_loss() {
        let batch = shapes(Shape::Square, 4, 16, 3);
        assert_eq!(batch_cycle_loss(&Identity, &Identity, &batch).unwrap(), 0.0);
        assert_eq!(batch_cycle_loss(&Invert, &Invert, &batch).unwrap(), 0.0);
        assert!(batch_cycle_loss(&Invert, &Identity, &batch).unwrap() > 0.0);
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(DomainDataset::new(vec![]), Err(Error::EmptyDataset(_))));
        let mut mixed = shapes(Shape::Square, 1, 16, 0);
        mixed.extend(shapes(Shape::Square, 1, 32, 0));
        assert!(matches!(DomainDataset::new(mixed), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_steps_change_nothing() {
        let cfg = CycleGanConfig {
            steps: 0,
            image_side: 16,
            width: 4,
            ..CycleGanConfig::default()
        };
        let x = DomainDataset::new(shapes(Shape::Square, 3, 16, 0)).unwrap();
        let y = DomainDataset::new(shapes(Shape::Circle, 3, 16, 1)).unwrap();
        let (g, f, report) = train_cyclegan(&x, &y, &cfg).unwrap();
        let init = CycleGanModel::new(4, 2, 0);
        assert_eq!(g, init.g);
        assert_eq!(f, init.f);
        assert!(report.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CycleGanConfig {
            steps: 3,
            image_side: 16,
            width: 4,
            residual_blocks: 1,
            batch_size: 2,
            ..CycleGanConfig::default()
        };
        let x = DomainDataset::new(shapes(Shape::Square, 4, 16, 0)).unwrap();
        let y = DomainDataset::new(shapes(Shape::Circle, 4, 16, 1)).unwrap();
        let a = train_cyclegan(&x, &y, &cfg).unwrap();
        let b = train_cyclegan(&x, &y, &cfg).unwrap();
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
        assert_eq!(a.2.len(), 3);
        let s = a.2.steps[0];
        assert!((s.total - cyclegan_total_loss(s.adv_g + s.adv_f, s.cycle, cfg.lambda)).abs() < 1e-12);
    }

    #[test]
    fn wrong_side_and_bad_config_are_rejected() {
        let x = DomainDataset::new(shapes(Shape::Square, 2, 16, 0)).unwrap();
        let cfg = CycleGanConfig::default();
        assert!(matches!(train_cyclegan(&x, &x, &cfg), Err(Error::ShapeMismatch(_))));
        let cfg = CycleGanConfig {
            image_side: 8,
            ..CycleGanConfig::default()
        };
        assert!(matches!(train_cyclegan(&x, &x, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn archive_round_trip() {
        let m = CycleGanModel::new(4, 3, 2);
        let back = CycleGanModel::from_archive(&m.to_archive().unwrap()).unwrap();
        assert_eq!(back.g.residual_blocks(), 3);
        assert_eq!(back.to_archive().unwrap(), m.to_archive().unwrap());
    }
}
