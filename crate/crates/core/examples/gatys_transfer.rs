//! Optimization-based style transfer on a synthetic content/style pair.

use livestyle::backbone::BackboneModel;
use livestyle::gatys::{run_gatys, GatysConfig, Init};
use livestyle::image::{encode_image, normalize, EncodeFormat};
use livestyle::synthetic::{gradient_scenes, textures};

fn main() -> livestyle::Result<()> {
    let model = BackboneModel::tiny(0);
    let spec = model.input_spec();
    let content = normalize(&gradient_scenes(1, 64, 1)[0], spec)?;
    let style = normalize(&textures(1, 64, 2)[0], spec)?;

    let cfg = GatysConfig {
        iterations: 50,
        init: Init::Noise,
        ..GatysConfig::tiny()
    };
    let (out, trace) = run_gatys(&content, &style, &model, &cfg)?;
    for (i, l) in trace.losses.iter().enumerate().step_by(10) {
        println!("iter {i:>3}: content {:.4e} style {:.4e} total {:.4e}", l.content, l.style, l.total);
    }
    let totals = trace.totals();
    println!("final/initial = {:.3}", totals[totals.len() - 1] / totals[0]);

    let path = std::env::temp_dir().join("livestyle-examples-gatys.png");
    std::fs::write(&path, encode_image(&out, EncodeFormat::Png)?)?;
    println!("wrote {}", path.display());
    Ok(())
}
