//! Small image-processing helpers shared by the corruption families.

use super::Image;

/// Mirror index into `0..n` without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Dense 2-D kernel with its centre at `(rows/2, cols/2)`.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    pub fn normalized(mut self) -> Self {
        let total: f32 = self.weights.iter().sum();
        if total > 0.0 {
            self.weights.iter_mut().for_each(|w| *w /= total);
        }
        self
    }
}

/// Correlates every channel with `kernel`, mirroring at the borders.
pub fn convolve(img: &Image, kernel: &Kernel) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for ky in 0..kernel.rows {
                let sy = reflect101(y as isize + ky as isize - cy, h);
                for kx in 0..kernel.cols {
                    let wgt = kernel.weights[ky * kernel.cols + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = reflect101(x as isize + kx as isize - cx, w);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wgt * img.get(sy, sx, c);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(y, x, c, *a);
            }
        }
    }
    out
}

pub fn gaussian_1d(sigma: f32) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur of a single `h x w` plane, mirrored borders.
pub fn gaussian_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_1d(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, wt)| wt * plane[y * w + reflect101(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, wt)| wt * tmp[reflect101(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, 0.0);
    for c in 0..3 {
        let plane: Vec<f32> = (0..h * w).map(|p| img.data()[p * 3 + c]).collect();
        let blurred = gaussian_plane(&plane, h, w, sigma);
        for (p, v) in blurred.into_iter().enumerate() {
            out.data_mut()[p * 3 + c] = v;
        }
    }
    out
}

/// Bilinear sample at fractional `(y, x)`, clamping to the border.
#[inline]
pub fn bilinear(img: &Image, y: f32, x: f32, c: usize) -> f32 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `img` through `map(y, x) -> (src_y, src_x)`.
pub fn warp(img: &Image, map: impl Fn(usize, usize) -> (f32, f32)) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            for c in 0..3 {
                out.set(y, x, c, bilinear(img, sy, sx, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_mirrors_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect101(-5, 1), 0);
    }

    #[test]
    fn blurs_preserve_constants() {
        let img = Image::filled(9, 7, 0.4);
        let g = gaussian_blur(&img, 1.3);
        assert!(g.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        let k = Kernel {
            rows: 3,
            cols: 3,
            weights: vec![1.0; 9],
        }
        .normalized();
        assert!(convolve(&img, &k).data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = super::super::fixture::fixture_image(8, 8);
        let out = warp(&img, |y, x| (y as f32, x as f32));
        assert_eq!(out, img);
    }
}
