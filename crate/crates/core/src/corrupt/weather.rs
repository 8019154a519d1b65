use std::f32::consts::PI;

use rand::Rng;

use super::constants::{FrostParams, SnowParams};
use super::Image;

fn luminance(img: &Image, y: usize, x: usize) -> f32 {
    0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
}

/// Sparse bright streaks falling at a random steep angle over a washed-out
/// copy of the image.
pub fn snow(img: &Image, p: &SnowParams, rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let angle = rng.random_range(55.0f32..125.0) * PI / 180.0;
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut layer = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f32>() >= p.density {
                continue;
            }
            let strength = rng.random_range(0.6f32..1.0);
            for t in 0..p.streak_length {
                let fade = 1.0 - 0.5 * t as f32 / p.streak_length as f32;
                let yy = (y as f32 + dy * t as f32).round() as isize;
                let xx = (x as f32 + dx * t as f32).round() as isize;
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    let cell = &mut layer[yy as usize * w + xx as usize];
                    *cell = cell.max(strength * fade);
                }
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let pale = luminance(img, y, x) * 1.5 + 0.5;
            let a = p.opacity * layer[y * w + x];
            for c in 0..3 {
                let v = img.get(y, x, c);
                let base = v * (1.0 - p.whiten) + p.whiten * v.max(pale);
                out.set(y, x, c, base * (1.0 - a) + a);
            }
        }
    }
    out
}

/// Multi-octave value noise on a random lattice, rescaled to `[0, 1]`.
pub fn value_noise(h: usize, w: usize, octaves: usize, base_cell: f32, rng: &mut impl Rng) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let mut amp = 1.0;
    let mut cell = base_cell;
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    for _ in 0..octaves {
        let gh = (h as f32 / cell).ceil() as usize + 2;
        let gw = (w as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 / cell, x as f32 / cell);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (smooth(fy - y0 as f32), smooth(fx - x0 as f32));
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    normalize(&mut field);
    field
}

fn normalize(field: &mut [f32]) {
    let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    for v in field.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

const FROST_TINT: [f32; 3] = [0.86, 0.92, 1.0];

/// Procedural ice: thresholded value noise with a fine crystal texture,
/// composited toward a pale blue tint.
pub fn frost(img: &Image, p: &FrostParams, rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let body = value_noise(h, w, 4, 8.0, rng);
    let grain = value_noise(h, w, 2, 2.0, rng);
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = ((body[i] - p.threshold) / 0.25).clamp(0.0, 1.0);
            let mask = t * t * (3.0 - 2.0 * t) * (0.7 + 0.3 * grain[i]);
            let a = p.coverage * mask;
            for c in 0..3 {
                out.set(y, x, c, img.get(y, x, c) * (1.0 - a) + a * FROST_TINT[c]);
            }
        }
    }
    out
}

/// Diamond-square plasma on a wrapping `size x size` grid, rescaled to `[0, 1]`.
pub fn plasma(size: usize, decay: f32, rng: &mut impl Rng) -> Vec<f32> {
    assert!(size.is_power_of_two());
    let mut map = vec![0.0f32; size * size];
    let at = |y: usize, x: usize| (y % size) * size + (x % size);
    let mut step = size;
    let mut wibble = 1.0f32;
    while step >= 2 {
        let half = step / 2;
        // squares: centre of each cell from its four corners
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let mean = (map[at(y, x)] + map[at(y + step, x)] + map[at(y, x + step)]
                    + map[at(y + step, x + step)])
                    / 4.0;
                map[at(y + half, x + half)] = mean + rng.random_range(-wibble..=wibble);
            }
        }
        // diamonds: edge midpoints from the two corners and two centres
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let top = (map[at(y, x)] + map[at(y, x + step)] + map[at(y + half, x + half)]
                    + map[at(y + size - half, x + half)])
                    / 4.0;
                map[at(y, x + half)] = top + rng.random_range(-wibble..=wibble);
                let left = (map[at(y, x)] + map[at(y + step, x)] + map[at(y + half, x + half)]
                    + map[at(y + half, x + size - half)])
                    / 4.0;
                map[at(y + half, x)] = left + rng.random_range(-wibble..=wibble);
            }
        }
        step = half;
        wibble /= decay;
    }
    normalize(&mut map);
    map
}

/// `out = img * (1 - a t) + a t * max(img)` with a plasma field `t`.
pub fn fog(img: &Image, alpha: f32, decay: f32, rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let size = h.max(w).next_power_of_two().max(2);
    let field = plasma(size, decay, rng);
    let peak = img.data().iter().copied().fold(0.0f32, f32::max);
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let t = field[y * size + x];
            for c in 0..3 {
                out.set(y, x, c, img.get(y, x, c) * (1.0 - alpha * t) + alpha * t * peak);
            }
        }
    }
    out
}
