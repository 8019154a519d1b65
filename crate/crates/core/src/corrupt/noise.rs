use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::Image;

pub fn gaussian(img: &Image, sigma: f32, rng: &mut impl Rng) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let eta: f32 = StandardNormal.sample(rng);
            v + sigma * eta
        })
        .collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}

/// Photon noise: each value becomes `Poisson(rate * v) / rate`.
pub fn shot(img: &Image, rate: f64, rng: &mut impl Rng) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let lambda = rate * v.clamp(0.0, 1.0) as f64;
            if lambda <= 0.0 {
                return 0.0;
            }
            let count: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
            (count / rate) as f32
        })
        .collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}

/// Salt-and-pepper on individual channel values: a fraction `p` is replaced,
/// half by 0 and half by 1.
pub fn impulse(img: &Image, p: f32, rng: &mut impl Rng) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let u: f32 = rng.random();
            if u < p / 2.0 {
                0.0
            } else if u < p {
                1.0
            } else {
                v
            }
        })
        .collect();
    Image::new(img.height(), img.width(), data).expect("same size")
}
