//! Model registry, per-model parameters and the shared stylization path used by
//! both the job workers and the `stylize` subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use livestyle::archive::WeightArchive;
use livestyle::ast::AstModel;
use livestyle::backbone::{load_weights, vgg19_spec, BackboneModel};
use livestyle::cyclegan::{translate, CycleGanModel};
use livestyle::gatys::{run_gatys, GatysConfig, Init, LossBreakdown};
use livestyle::image::{decode_image, encode_image, normalize, resize, to_unit_tensor, EncodeFormat, ImageTensor, PreprocessSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("unknown model")]
    UnknownModel,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] livestyle::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ast,
    #[serde(rename = "cyclegan")]
    CycleGan,
    Gatys,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ast, ModelKind::CycleGan, ModelKind::Gatys];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ast => "ast",
            ModelKind::CycleGan => "cyclegan",
            ModelKind::Gatys => "gatys",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn kind(self) -> &'static str {
        match self {
            ModelKind::Ast => "feed_forward_arbitrary",
            ModelKind::CycleGan => "unpaired_translation",
            ModelKind::Gatys => "optimization",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ModelKind::Ast => {
                "Arbitrary style transfer: a predictor network embeds the style image into \
                 conditional instance-norm parameters that modulate a feed-forward transfer \
                 network; strength blends the style embedding with the content's own."
            }
            ModelKind::CycleGan => {
                "Unpaired image-to-image translation: a generator trained with adversarial and \
                 cycle-consistency losses maps images from one domain to the other; no style \
                 image is needed."
            }
            ModelKind::Gatys => {
                "Optimization-based transfer: pixels are updated by gradient descent on a \
                 weighted sum of feature-space content loss and Gram-matrix style loss."
            }
        }
    }

    pub fn needs_style(self) -> bool {
        !matches!(self, ModelKind::CycleGan)
    }

    pub fn default_params(self) -> Value {
        match self {
            ModelKind::Ast => serde_json::to_value(AstParams::default()),
            ModelKind::CycleGan => serde_json::to_value(CycleGanParams::default()),
            ModelKind::Gatys => serde_json::to_value(GatysParams::default()),
        }
        .expect("params serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatysParams {
    pub iterations: usize,
    pub content_weight: f64,
    pub style_weight: f64,
    pub step_size: f64,
    pub init: Init,
    pub seed: u64,
}

impl Default for GatysParams {
    fn default() -> Self {
        GatysParams {
            iterations: 50,
            content_weight: 1.0,
            style_weight: 1e3,
            step_size: 0.02,
            init: Init::ContentCopy,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AstParams {
    pub strength: f64,
    pub checkpoint: Option<String>,
}

impl Default for AstParams {
    fn default() -> Self {
        AstParams {
            strength: 1.0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    XToY,
    YToX,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleGanParams {
    pub direction: Direction,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobParams {
    Gatys(GatysParams),
    Ast(AstParams),
    CycleGan(CycleGanParams),
}

impl JobParams {
    /// Parses a JSON object (or `null` for defaults) against the model's schema.
    pub fn parse(model: ModelKind, raw: &Value) -> Result<Self, EngineError> {
        let raw = if raw.is_null() { json!({}) } else { raw.clone() };
        let bad = |e: serde_json::Error| EngineError::InvalidParams(e.to_string());
        let params = match model {
            ModelKind::Gatys => JobParams::Gatys(serde_json::from_value(raw).map_err(bad)?),
            ModelKind::Ast => JobParams::Ast(serde_json::from_value(raw).map_err(bad)?),
            ModelKind::CycleGan => JobParams::CycleGan(serde_json::from_value(raw).map_err(bad)?),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn model(&self) -> ModelKind {
        match self {
            JobParams::Gatys(_) => ModelKind::Gatys,
            JobParams::Ast(_) => ModelKind::Ast,
            JobParams::CycleGan(_) => ModelKind::CycleGan,
        }
    }

    pub fn checkpoint(&self) -> Option<&str> {
        match self {
            JobParams::Ast(p) => p.checkpoint.as_deref(),
            JobParams::CycleGan(p) => p.checkpoint.as_deref(),
            JobParams::Gatys(_) => None,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        match self {
            JobParams::Gatys(p) => {
                if p.iterations > 10_000 {
                    return Err(EngineError::InvalidParams("iterations must be at most 10000".into()));
                }
                gatys_config(&GatysConfig::tiny(), p)
                    .validate()
                    .map_err(|e| EngineError::InvalidParams(e.to_string()))
            }
            JobParams::Ast(p) if !(0.0..=1.0).contains(&p.strength) => {
                Err(EngineError::InvalidParams(format!("strength {} outside [0, 1]", p.strength)))
            }
            _ => Ok(()),
        }
    }
}

fn gatys_config(layers: &GatysConfig, p: &GatysParams) -> GatysConfig {
    GatysConfig {
        iterations: p.iterations,
        content_weight: p.content_weight,
        style_weight: p.style_weight,
        step_size: p.step_size,
        init: p.init,
        seed: p.seed,
        ..layers.clone()
    }
}

/// Decodes PNG/JPEG bytes and resizes to a square of side
/// `min(max_side, min(width, height))`.
pub fn prepare_image(bytes: &[u8], max_side: usize) -> Result<ImageTensor, EngineError> {
    let raw = decode_image(bytes).map_err(|e| EngineError::InvalidImage(e.to_string()))?;
    let side = (raw.width.min(raw.height) as usize).min(max_side);
    if side < 4 {
        return Err(EngineError::InvalidImage(format!(
            "image {}x{} is smaller than 4 pixels on a side",
            raw.width, raw.height
        )));
    }
    Ok(resize(&to_unit_tensor(&raw), side)?)
}

#[derive(Clone, Debug)]
pub struct Stylized {
    pub image: ImageTensor,
    pub loss: Option<LossBreakdown>,
    pub seconds: f64,
}

impl Stylized {
    pub fn png(&self) -> Result<Vec<u8>, EngineError> {
        Ok(encode_image(&self.image, EncodeFormat::Png)?)
    }
}

/// Frozen weights shared by every job.
pub struct Engine {
    backbone: BackboneModel,
    gatys_layers: GatysConfig,
    ast: AstModel,
    cyclegan: CycleGanModel,
    checkpoint_dir: Option<PathBuf>,
}

impl Engine {
    /// Seeded initial weights for every model; tiny backbone for Gatys.
    pub fn builtin() -> Self {
        Engine {
            backbone: BackboneModel::tiny(0),
            gatys_layers: GatysConfig::tiny(),
            ast: AstModel::new(8, 0),
            cyclegan: CycleGanModel::new(8, 2, 0),
            checkpoint_dir: None,
        }
    }

    /// Like [`Engine::builtin`] but picks up `vgg19.zip`, `ast.zip` and
    /// `cyclegan.zip` from `dir` when present; named checkpoints resolve there too.
    pub fn with_checkpoint_dir(dir: impl Into<PathBuf>) -> Result<Self, EngineError> {
        let dir = dir.into();
        let mut engine = Engine::builtin();
        let vgg = dir.join("vgg19.zip");
        if vgg.exists() {
            let archive = load_archive(&vgg)?;
            engine.backbone = load_weights(&archive, &vgg19_spec(), PreprocessSpec::imagenet(224))?;
            engine.gatys_layers = GatysConfig::vgg19();
        }
        let ast = dir.join("ast.zip");
        if ast.exists() {
            engine.ast = AstModel::from_archive(&load_archive(&ast)?)?;
        }
        let cg = dir.join("cyclegan.zip");
        if cg.exists() {
            engine.cyclegan = CycleGanModel::from_archive(&load_archive(&cg)?)?;
        }
        engine.checkpoint_dir = Some(dir);
        Ok(engine)
    }

    /// A checkpoint reference is either a path to an archive or a bare name
    /// looked up as `<checkpoint_dir>/<name>.zip`.
    pub fn resolve_checkpoint(&self, reference: &str) -> Result<PathBuf, EngineError> {
        let direct = Path::new(reference);
        if direct.is_file() {
            return Ok(direct.to_path_buf());
        }
        if let (true, Some(dir)) = (is_checkpoint_name(reference), &self.checkpoint_dir) {
            let path = dir.join(format!("{reference}.zip"));
            if path.is_file() {
                return Ok(path);
            }
        }
        Err(EngineError::Checkpoint(format!("no checkpoint named {reference:?}")))
    }

    pub fn run(&self, params: &JobParams, content: &ImageTensor, style: Option<&ImageTensor>) -> Result<Stylized, EngineError> {
        let start = Instant::now();
        let style_for = |content: &ImageTensor| -> Result<ImageTensor, EngineError> {
            let style = style.ok_or_else(|| EngineError::InvalidImage("style image required".into()))?;
            Ok(resize(style, content.height())?)
        };
        let (image, loss) = match params {
            JobParams::Gatys(p) => {
                let spec = self.backbone.input_spec();
                let c = normalize(content, spec)?;
                let s = normalize(&style_for(content)?, spec)?;
                let cfg = gatys_config(&self.gatys_layers, p);
                let (out, trace) = run_gatys(&c, &s, &self.backbone, &cfg)?;
                (out, trace.losses.last().cloned())
            }
            JobParams::Ast(p) => {
                let loaded;
                let model = match &p.checkpoint {
                    Some(name) => {
                        loaded = AstModel::from_archive(&load_archive(&self.resolve_checkpoint(name)?)?)?;
                        &loaded
                    }
                    None => &self.ast,
                };
                (model.transfer(content, &style_for(content)?, p.strength)?, None)
            }
            JobParams::CycleGan(p) => {
                let loaded;
                let model = match &p.checkpoint {
                    Some(name) => {
                        loaded = CycleGanModel::from_archive(&load_archive(&self.resolve_checkpoint(name)?)?)?;
                        &loaded
                    }
                    None => &self.cyclegan,
                };
                let generator = match p.direction {
                    Direction::XToY => &model.g,
                    Direction::YToX => &model.f,
                };
                (translate(generator, content)?, None)
            }
        };
        Ok(Stylized {
            image,
            loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Bare names: ASCII letters, digits, `_` and `-`.
pub fn is_checkpoint_name(reference: &str) -> bool {
    !reference.is_empty() && reference.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn load_archive(path: &Path) -> Result<WeightArchive, EngineError> {
    WeightArchive::load(path).map_err(|e| EngineError::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use livestyle::image::ValueRange;

    #[test]
    fn registry_names_round_trip_in_sorted_order() {
        let names: Vec<_> = ModelKind::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names, ["ast", "cyclegan", "gatys"]);
        for m in ModelKind::ALL {
            assert_eq!(ModelKind::parse(m.name()), Some(m));
            assert!(m.default_params().is_object());
        }
        assert_eq!(ModelKind::parse("picasso9000"), None);
    }

    #[test]
    fn params_follow_each_schema() {
        let p = JobParams::parse(ModelKind::Gatys, &json!({"iterations": 3})).unwrap();
        assert_eq!(
            p,
            JobParams::Gatys(GatysParams {
                iterations: 3,
                ..GatysParams::default()
            })
        );
        assert!(JobParams::parse(ModelKind::Gatys, &Value::Null).is_ok());
        for (model, raw) in [
            (ModelKind::Gatys, json!({"strength": 0.5})),
            (ModelKind::Gatys, json!({"style_weight": -1.0})),
            (ModelKind::Ast, json!({"strength": 1.5})),
            (ModelKind::CycleGan, json!({"direction": "sideways"})),
            (ModelKind::Ast, json!([1, 2])),
        ] {
            assert!(matches!(JobParams::parse(model, &raw), Err(EngineError::InvalidParams(_))), "{raw}");
        }
    }

    #[test]
    fn prepared_images_are_square_and_capped() {
        let img = ImageTensor::filled(40, 60, 0.25, ValueRange::Unit).unwrap();
        let png = encode_image(&img, EncodeFormat::Png).unwrap();
        let a = prepare_image(&png, 512).unwrap();
        assert_eq!((a.height(), a.width()), (40, 40));
        let b = prepare_image(&png, 16).unwrap();
        assert_eq!((b.height(), b.width()), (16, 16));
        assert!(matches!(prepare_image(b"nope", 16), Err(EngineError::InvalidImage(_))));
    }

    #[test]
    fn every_model_keeps_the_content_size() {
        let engine = Engine::builtin();
        let content = ImageTensor::filled(20, 20, 0.4, ValueRange::Unit).unwrap();
        let style = ImageTensor::filled(30, 30, 0.8, ValueRange::Unit).unwrap();
        for params in [
            JobParams::Gatys(GatysParams {
                iterations: 2,
                ..GatysParams::default()
            }),
            JobParams::Ast(AstParams::default()),
            JobParams::CycleGan(CycleGanParams::default()),
        ] {
            let out = engine.run(&params, &content, Some(&style)).unwrap();
            assert_eq!((out.image.height(), out.image.width()), (20, 20));
        }
        let missing = engine.run(&JobParams::Ast(AstParams::default()), &content, None);
        assert!(matches!(missing, Err(EngineError::InvalidImage(_))));
    }

    #[test]
    fn unknown_checkpoints_are_reported() {
        let engine = Engine::builtin();
        assert!(matches!(engine.resolve_checkpoint("../etc"), Err(EngineError::Checkpoint(_))));
    }
}
