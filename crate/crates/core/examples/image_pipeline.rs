//! Decode, resize, normalize and re-encode an image.

use livestyle::image::{decode_image, denormalize, encode_image, normalize, resize, to_unit_tensor, EncodeFormat, PreprocessSpec};
use livestyle::synthetic::gradient_scenes;

fn main() -> livestyle::Result<()> {
    let out_dir = std::env::temp_dir().join("livestyle-examples");
    std::fs::create_dir_all(&out_dir)?;

    let png = encode_image(&gradient_scenes(1, 96, 7)[0], EncodeFormat::Png)?;
    let raw = decode_image(&png)?;
    let unit = to_unit_tensor(&raw);
    let small = resize(&unit, 64)?;

    let spec = PreprocessSpec::imagenet(64);
    let backbone_ready = normalize(&small, &spec)?;
    let back = denormalize(&backbone_ready, &spec)?;
    let worst = small
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    let path = out_dir.join("resized.png");
    std::fs::write(&path, encode_image(&back, EncodeFormat::Png)?)?;
    println!(
        "{}x{} -> {}x{}, normalize round-trip max error {worst:.2e}, wrote {}",
        raw.width,
        raw.height,
        small.width(),
        small.height(),
        path.display()
    );
    Ok(())
}
