use rand::Rng;

use super::constants::ElasticParams;
use super::filters::{gaussian_plane, warp};
use super::{jpeg as codec, Image};

pub fn brightness(img: &Image, shift: f32) -> Image {
    let data = img.data().iter().map(|&v| v + shift).collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}

/// Scales deviations from the global mean by `factor`.
pub fn contrast(img: &Image, factor: f32) -> Image {
    let n = img.data().len().max(1) as f64;
    let mean = (img.data().iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
    let data = img.data().iter().map(|&v| (v - mean) * factor + mean).collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}

fn displacement(h: usize, w: usize, p: &ElasticParams, rng: &mut impl Rng) -> Vec<f32> {
    let noise: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut field = gaussian_plane(&noise, h, w, p.sigma);
    let peak = field.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v *= p.amplitude / peak);
    }
    field
}

/// Bilinear warp by a smooth random displacement field.
pub fn elastic(img: &Image, p: &ElasticParams, rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let dy = displacement(h, w, p, rng);
    let dx = displacement(h, w, p, rng);
    warp(img, |y, x| (y as f32 + dy[y * w + x], x as f32 + dx[y * w + x]))
}

/// Replaces each `block x block` tile by its mean colour.
pub fn pixelate(img: &Image, block: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let d = block.min(h).min(w).max(1);
    let mut out = img.clone();
    for by in (0..h).step_by(d) {
        for bx in (0..w).step_by(d) {
            let (ey, ex) = ((by + d).min(h), (bx + d).min(w));
            let count = ((ey - by) * (ex - bx)) as f32;
            for c in 0..3 {
                let mut sum = 0.0f32;
                for y in by..ey {
                    for x in bx..ex {
                        sum += img.get(y, x, c);
                    }
                }
                for y in by..ey {
                    for x in bx..ex {
                        out.set(y, x, c, sum / count);
                    }
                }
            }
        }
    }
    out
}

pub fn jpeg(img: &Image, quality: u8) -> Image {
    let rgb = img.to_rgb8();
    let bytes = codec::encode_rgb(&rgb, img.width(), img.height(), quality);
    let decoded = codec::decode(&bytes).expect("decoding our own baseline stream");
    Image::from_rgb8(decoded.height, decoded.width, &decoded.rgb).expect("same size")
}
