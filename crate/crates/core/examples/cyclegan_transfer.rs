//! Unpaired translation between white squares and white circles.

use livestyle::cyclegan::{batch_cycle_loss, translate, train_cyclegan, CycleGanConfig, CycleGanModel, DomainDataset};
use livestyle::image::{encode_image, EncodeFormat};
use livestyle::synthetic::{shapes, Shape};

fn main() -> livestyle::Result<()> {
    let squares = DomainDataset::new(shapes(Shape::Square, 100, 32, 1))?;
    let circles = DomainDataset::new(shapes(Shape::Circle, 100, 32, 2))?;
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let cfg = CycleGanConfig {
        steps,
        ..CycleGanConfig::default()
    };
    let (g, f, report) = train_cyclegan(&squares, &circles, &cfg)?;
    let n = report.len();
    let window = (n / 10).max(1);
    println!(
        "cycle loss: first {window} steps {:.4}, last {window} steps {:.4}",
        report.mean_cycle(0..window),
        report.mean_cycle(n - window..n)
    );

    let held_out = shapes(Shape::Square, 4, 32, 99);
    println!("held-out square cycle loss {:.4}", batch_cycle_loss(&g, &f, &held_out)?);

    let dir = std::env::temp_dir();
    let out = translate(&g, &held_out[0])?;
    std::fs::write(dir.join("livestyle-examples-cyclegan.png"), encode_image(&out, EncodeFormat::Png)?)?;
    let path = dir.join("livestyle-examples-cyclegan.zip");
    CycleGanModel { g, f }.to_archive()?.save(&path)?;
    println!("wrote checkpoint {}", path.display());
    Ok(())
}
