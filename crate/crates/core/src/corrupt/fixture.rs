//! A deterministic, natural-looking test image.
//!
//! Sky gradient, a soft sun, textured ground and a striped object. It has
//! smooth regions, edges and fine texture, so every corruption family has
//! something to act on. Used for golden images and severity checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;

pub fn fixture_image(height: usize, width: usize) -> Image {
    fixture_image_variant(height, width, 0)
}

pub fn fixture_image_variant(height: usize, width: usize, variant: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1C7_u64 ^ variant);
    let texture: Vec<f32> = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (h, w) = (height as f32, width as f32);
    let sun = (0.72 + 0.05 * variant as f32 % 0.2, 0.28);
    let horizon = 0.55 + 0.04 * (variant % 3) as f32;
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f32 + 0.5) / w, (y as f32 + 0.5) / h);
            let t = texture[y * width + x];
            let mut rgb = if v < horizon {
                let k = v / horizon;
                [0.35 + 0.3 * k, 0.55 + 0.25 * k, 0.9 - 0.1 * k]
            } else {
                let k = (v - horizon) / (1.0 - horizon);
                let grass = 0.08 * t + 0.04 * (u * 19.0).sin();
                [0.25 + 0.15 * k + grass, 0.45 - 0.1 * k + grass, 0.15 + 0.5 * grass]
            };
            let d = ((u - sun.0).powi(2) + (v - sun.1).powi(2)).sqrt();
            let glow = (1.0 - d / 0.16).clamp(0.0, 1.0);
            rgb[0] += 0.6 * glow;
            rgb[1] += 0.5 * glow;
            rgb[2] -= 0.2 * glow;
            let in_box = (0.15..0.45).contains(&u) && (0.35..0.8).contains(&v);
            if in_box {
                let stripe = if ((y as i64 + x as i64) / 2) % 2 == 0 { 0.85 } else { 0.2 };
                rgb = [stripe, 0.3 + 0.2 * stripe, 0.25 + 0.05 * t];
            }
            data.extend(rgb.iter().map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Image::new(height, width, data).expect("sized by construction")
}
