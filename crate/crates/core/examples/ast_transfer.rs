//! Train a small arbitrary-style-transfer model, then sweep the strength knob
//! and blend two styles.

use livestyle::ast::{
    blend_embeddings, evaluate_ast, predict_style, strength_blend, stylize, train_ast, AstModel, AstTrainConfig, BlendSpec,
};
use livestyle::backbone::BackboneModel;
use livestyle::image::{encode_image, EncodeFormat};
use livestyle::synthetic::{gradient_scenes, textures};

fn main() -> livestyle::Result<()> {
    let backbone = BackboneModel::tiny(0);
    let contents = gradient_scenes(8, 32, 1);
    let styles = textures(4, 32, 2);
    let cfg = AstTrainConfig {
        steps: 60,
        ..AstTrainConfig::default()
    };

    let init = AstModel::new(8, 0);
    let before = evaluate_ast(&init, &contents, &styles, &backbone, &cfg)?;
    let (ast, _) = train_ast(init, &contents, &styles, &backbone, &cfg)?;
    let after = evaluate_ast(&ast, &contents, &styles, &backbone, &cfg)?;
    println!("objective {:.4} -> {:.4} after {} steps", before.total, after.total, cfg.steps);

    let content = &contents[0];
    let own = predict_style(&ast.predictor, content)?;
    let a = predict_style(&ast.predictor, &styles[0])?;
    let b = predict_style(&ast.predictor, &styles[1])?;
    let dir = std::env::temp_dir();
    for strength in [0.0, 0.5, 1.0] {
        let out = stylize(&ast.transfer, content, &strength_blend(&own, &a, strength)?)?;
        std::fs::write(dir.join(format!("livestyle-examples-ast-{strength}.png")), encode_image(&out, EncodeFormat::Png)?)?;
    }
    let mix = blend_embeddings(&BlendSpec::new(vec![(a, 0.5), (b, 0.5)]))?;
    let out = stylize(&ast.transfer, content, &mix)?;
    std::fs::write(dir.join("livestyle-examples-ast-mix.png"), encode_image(&out, EncodeFormat::Png)?)?;
    println!("wrote strength sweep and 50/50 blend to {}", dir.display());
    Ok(())
}
