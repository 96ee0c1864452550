//! Build a backbone, persist it as a weight archive, reload it and inspect
//! features and Gram matrices.

use livestyle::archive::WeightArchive;
use livestyle::backbone::{gram_matrix, load_weights, tiny_spec, BackboneModel};
use livestyle::image::{normalize, PreprocessSpec};
use livestyle::synthetic::textures;

fn main() -> livestyle::Result<()> {
    let model = BackboneModel::tiny(0);
    let path = std::env::temp_dir().join("livestyle-examples-backbone.zip");
    model.to_archive()?.save(&path)?;

    let archive = WeightArchive::load(&path)?;
    let reloaded = load_weights(&archive, &tiny_spec(&[8, 16, 16]), PreprocessSpec::imagenet(64))?;
    println!("{} tensors in {}", archive.len(), path.display());

    let img = normalize(&textures(1, 64, 3)[0], reloaded.input_spec())?;
    let feats = reloaded.extract_features(&img, &["conv1_1", "relu2_1", "conv3_1"])?;
    for (layer, f) in &feats {
        let g = gram_matrix(f);
        let trace: f64 = (0..g.size).map(|i| g.get(i, i)).sum();
        println!("{layer:>8}: {} channels x {} positions, gram trace {trace:.3}", f.channels, f.spatial);
    }
    Ok(())
}
