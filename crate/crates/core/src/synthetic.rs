//! Seeded synthetic image sets for desk-scale training and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ImageTensor, ValueRange};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

/// Independent uniform pixels.
pub fn noise(side: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side * 3).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
    ImageTensor::new(side, side, data, ValueRange::Unit).expect("valid noise image")
}

/// White filled shapes of random size and position on black.
pub fn shapes(shape: Shape, count: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let half = rng.gen_range(side as f64 / 6.0..=side as f64 / 3.0);
            let cy = rng.gen_range(half..=side as f64 - half);
            let cx = rng.gen_range(half..=side as f64 - half);
            let mut data = vec![0.0f32; side * side * 3];
            for y in 0..side {
                for x in 0..side {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = match shape {
                        Shape::Square => dy.abs() <= half && dx.abs() <= half,
                        Shape::Circle => dy * dy + dx * dx <= half * half,
                    };
                    if inside {
                        data[(y * side + x) * 3..(y * side + x) * 3 + 3].fill(1.0);
                    }
                }
            }
            ImageTensor::new(side, side, data, ValueRange::Unit).expect("valid shape image")
        })
        .collect()
}

/// Smooth colour gradients with one soft-edged disk: photo-like content.
pub fn gradient_scenes(count: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
            let slope: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)));
            let disk: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let (cy, cx) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            let r = rng.gen_range(0.15..0.3);
            let mut data = Vec::with_capacity(side * side * 3);
            for y in 0..side {
                for x in 0..side {
                    let (fy, fx) = (y as f64 / side as f64, x as f64 / side as f64);
                    let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                    let blend = (1.0 - (d - r) / 0.05).clamp(0.0, 1.0);
                    for c in 0..3 {
                        let bg = base[c] + slope[c].0 * fy + slope[c].1 * fx;
                        let v = bg * (1.0 - blend) + disk[c] * blend;
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            ImageTensor::new(side, side, data, ValueRange::Unit).expect("valid scene")
        })
        .collect()
}

/// Two-colour stripe and checker textures: painting-like styles.
pub fn textures(count: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let period = rng.gen_range(3..=8) as f64;
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            let mut data = Vec::with_capacity(side * side * 3);
            for y in 0..side {
                for x in 0..side {
                    let (fy, fx) = (y as f64, x as f64);
                    let on = if i % 2 == 0 {
                        ((fx * c + fy * s) / period).floor() as i64 % 2 == 0
                    } else {
                        ((fx / period).floor() as i64 + (fy / period).floor() as i64) % 2 == 0
                    };
                    let col = if on { &a } else { &b };
                    data.extend(col.iter().map(|&v| v as f32));
                }
            }
            ImageTensor::new(side, side, data, ValueRange::Unit).expect("valid texture")
        })
        .collect()
}
