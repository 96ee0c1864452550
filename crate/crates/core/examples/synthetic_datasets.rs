//! Write the synthetic training sets as PNG directories, ready for
//! `livestyle train`. Usage: `synthetic_datasets [OUT_DIR]`.

use std::path::PathBuf;

use livestyle::image::{encode_image, EncodeFormat, ImageTensor};
use livestyle::synthetic::{gradient_scenes, shapes, textures, Shape};

fn write_set(dir: PathBuf, images: &[ImageTensor]) -> livestyle::Result<()> {
    std::fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        std::fs::write(dir.join(format!("{i:03}.png")), encode_image(img, EncodeFormat::Png)?)?;
    }
    println!("{} images -> {}", images.len(), dir.display());
    Ok(())
}

fn main() -> livestyle::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("livestyle-data"));
    write_set(root.join("squares"), &shapes(Shape::Square, 100, 32, 1))?;
    write_set(root.join("circles"), &shapes(Shape::Circle, 100, 32, 2))?;
    write_set(root.join("scenes"), &gradient_scenes(8, 32, 1))?;
    write_set(root.join("textures"), &textures(4, 32, 2))?;
    Ok(())
}
