use std::f32::consts::PI;

use rand::Rng;

use super::constants::GlassParams;
use super::filters::{convolve, gaussian_1d, gaussian_blur, warp, Kernel};
use super::Image;

/// Binary disk of radius `radius`, softened by a small Gaussian so that
/// fractional radii still produce distinct kernels.
pub fn disk_kernel(radius: f32, alias_sigma: f32) -> Kernel {
    let r = radius.ceil() as isize + 1;
    let size = (2 * r + 1) as usize;
    let mut disk = vec![0.0f32; size * size];
    for y in -r..=r {
        for x in -r..=r {
            if ((x * x + y * y) as f32) <= radius * radius {
                disk[((y + r) as usize) * size + (x + r) as usize] = 1.0;
            }
        }
    }
    let g = gaussian_1d(alias_sigma);
    let gr = (g.len() / 2) as isize;
    let mut soft = vec![0.0f32; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for (i, wy) in g.iter().enumerate() {
                for (j, wx) in g.iter().enumerate() {
                    let (sy, sx) = (y + i as isize - gr, x + j as isize - gr);
                    if sy >= 0 && sx >= 0 && sy < size as isize && sx < size as isize {
                        acc += wy * wx * disk[sy as usize * size + sx as usize];
                    }
                }
            }
            soft[y as usize * size + x as usize] = acc;
        }
    }
    Kernel {
        rows: size,
        cols: size,
        weights: soft,
    }
    .normalized()
}

pub fn defocus(img: &Image, radius: f32, alias_sigma: f32) -> Image {
    convolve(img, &disk_kernel(radius, alias_sigma))
}

/// Repeated random swaps with neighbours up to `max_delta` away, then blur.
pub fn glass(img: &Image, p: &GlassParams, rng: &mut impl Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let d = p.max_delta as isize;
    let mut out = img.clone();
    if h as isize > 2 * d && w as isize > 2 * d {
        for _ in 0..p.iterations {
            for y in (d..h as isize - d).rev() {
                for x in (d..w as isize - d).rev() {
                    let dy = rng.random_range(-(d as i64)..=d as i64) as isize;
                    let dx = rng.random_range(-(d as i64)..=d as i64) as isize;
                    let (ty, tx) = ((y + dy) as usize, (x + dx) as usize);
                    for c in 0..3 {
                        let a = out.get(y as usize, x as usize, c);
                        let b = out.get(ty, tx, c);
                        out.set(y as usize, x as usize, c, b);
                        out.set(ty, tx, c, a);
                    }
                }
            }
        }
    }
    gaussian_blur(&out, p.sigma)
}

/// Line kernel of `length` taps through the centre at `angle` radians.
pub fn line_kernel(length: usize, angle: f32) -> Kernel {
    let size = length | 1;
    let c = (size / 2) as f32;
    let mut weights = vec![0.0f32; size * size];
    let samples = 4 * length;
    let half = (length as f32 - 1.0) / 2.0;
    for i in 0..samples {
        let t = -half + (length as f32 - 1.0) * i as f32 / (samples - 1).max(1) as f32;
        let (py, px) = (c + t * angle.sin(), c + t * angle.cos());
        let (y0, x0) = (py.floor(), px.floor());
        let (fy, fx) = (py - y0, px - x0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                    weights[yy as usize * size + xx as usize] += wy * wx;
                }
            }
        }
    }
    Kernel {
        rows: size,
        cols: size,
        weights,
    }
    .normalized()
}

pub fn motion(img: &Image, length: usize, rng: &mut impl Rng) -> Image {
    let angle = rng.random_range(-45.0f32..45.0) * PI / 180.0;
    convolve(img, &line_kernel(length, angle))
}

/// Zoom factors `1.00, 1.00 + step, ..., max` inclusive.
pub fn zoom_factors(max: f32, step: f32) -> Vec<f32> {
    let n = ((max - 1.0) / step).round() as usize;
    (0..=n).map(|i| 1.0 + step * i as f32).collect()
}

pub fn zoom(img: &Image, max: f32, step: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let factors = zoom_factors(max, step);
    let mut acc = vec![0.0f32; img.data().len()];
    for &z in &factors {
        let zoomed = warp(img, |y, x| (cy + (y as f32 - cy) / z, cx + (x as f32 - cx) / z));
        acc.iter_mut().zip(zoomed.data()).for_each(|(a, v)| *a += v);
    }
    let n = factors.len() as f32;
    Image::new(h, w, acc.into_iter().map(|v| v / n).collect()).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_disk_is_a_soft_point() {
        let k = disk_kernel(0.5, 0.5);
        let centre = k.weights[(k.rows / 2) * k.cols + k.cols / 2];
        assert!(k.weights.iter().all(|&w| w <= centre));
        assert!((k.weights.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let big = disk_kernel(3.0, 0.5);
        let big_centre = big.weights[(big.rows / 2) * big.cols + big.cols / 2];
        assert!(big_centre < centre);
    }

    #[test]
    fn horizontal_line_kernel_stays_on_one_row() {
        let k = line_kernel(5, 0.0);
        for y in 0..k.rows {
            let row: f32 = k.weights[y * k.cols..(y + 1) * k.cols].iter().sum();
            if y == k.rows / 2 {
                assert!((row - 1.0).abs() < 1e-5);
            } else {
                assert!(row.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zoom_factor_ladder() {
        let f = zoom_factors(1.06, 0.01);
        assert_eq!(f.len(), 7);
        assert!((f[6] - 1.06).abs() < 1e-6);
    }
}
