//! Deterministic synthesis of the 15 benchmark corruptions at severities 1-5.
//!
//! [`corrupt`] is a pure function of `(image, spec)`: all randomness comes
//! from a ChaCha stream keyed by `spec.seed`. Batch helpers derive one seed
//! per image from `(base seed, image index)`, so reordering a batch never
//! changes what an individual image receives.

mod blur;
pub mod constants;
pub mod fixture;
mod digital;
mod filters;
pub mod jpeg;
mod noise;
mod weather;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use constants::{SeverityTable, CONSTANTS_VERSION};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorruptionError {
    #[error("unknown corruption kind {0:?}")]
    UnknownKind(String),
    #[error("severity {0} is outside 1..=5")]
    Severity(u8),
    #[error("image buffer has {len} values, expected {height}x{width}x3")]
    ImageShape {
        height: usize,
        width: usize,
        len: usize,
    },
}

/// The 15 corruption families, in benchmark table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::GlassBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Snow,
        Self::Frost,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::Elastic,
        Self::Pixelate,
        Self::Jpeg,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            Self::GaussianNoise => "GN",
            Self::ShotNoise => "SN",
            Self::ImpulseNoise => "IN",
            Self::DefocusBlur => "DB",
            Self::GlassBlur => "GB",
            Self::MotionBlur => "MB",
            Self::ZoomBlur => "ZM",
            Self::Snow => "SW",
            Self::Frost => "FT",
            Self::Fog => "FG",
            Self::Brightness => "BS",
            Self::Contrast => "CT",
            Self::Elastic => "ET",
            Self::Pixelate => "PIX",
            Self::Jpeg => "JPEG",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::GlassBlur => "glass_blur",
            Self::MotionBlur => "motion_blur",
            Self::ZoomBlur => "zoom_blur",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Elastic => "elastic_transform",
            Self::Pixelate => "pixelate",
            Self::Jpeg => "jpeg_compression",
        }
    }

    /// Position in [`CorruptionKind::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn is_noise(self) -> bool {
        matches!(self, Self::GaussianNoise | Self::ShotNoise | Self::ImpulseNoise)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.abbrev().eq_ignore_ascii_case(t) || k.long_name().eq_ignore_ascii_case(t))
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

/// Kind, severity and seed; fully determines a corruption transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptionError> {
        if !(1..=5).contains(&severity) {
            return Err(CorruptionError::Severity(severity));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

/// An `H x W x 3` RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, CorruptionError> {
        if data.len() != height * width * 3 {
            return Err(CorruptionError::ImageShape {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// From a planar `[3, H, W]` buffer.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self, CorruptionError> {
        if chw.len() != height * width * 3 {
            return Err(CorruptionError::ImageShape {
                height,
                width,
                len: chw.len(),
            });
        }
        let plane = height * width;
        let mut data = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * plane + p];
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    /// Mean absolute per-value difference to another image of the same size.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    /// Quantizes to 8-bit RGB, rounding half up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self, CorruptionError> {
        Self::new(height, width, rgb.iter().map(|&v| v as f32 / 255.0).collect())
    }
}

pub(crate) fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Applies `spec` to `img`; the output is clamped to `[0, 1]`.
pub fn corrupt(img: &Image, spec: &CorruptionSpec) -> Image {
    let table = SeverityTable::standard();
    corrupt_with(img, spec, &table)
}

/// As [`corrupt`], with an explicit constants table.
pub fn corrupt_with(img: &Image, spec: &CorruptionSpec, table: &SeverityTable) -> Image {
    let mut rng = spec.rng();
    let s = spec.level();
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => noise::gaussian(img, table.gaussian_sigma[s], &mut rng),
        CorruptionKind::ShotNoise => noise::shot(img, table.shot_rate[s], &mut rng),
        CorruptionKind::ImpulseNoise => noise::impulse(img, table.impulse_fraction[s], &mut rng),
        CorruptionKind::DefocusBlur => blur::defocus(img, table.defocus_radius[s], table.defocus_alias_sigma),
        CorruptionKind::GlassBlur => blur::glass(img, &table.glass[s], &mut rng),
        CorruptionKind::MotionBlur => blur::motion(img, table.motion_length[s], &mut rng),
        CorruptionKind::ZoomBlur => blur::zoom(img, table.zoom_max[s], table.zoom_step),
        CorruptionKind::Snow => weather::snow(img, &table.snow[s], &mut rng),
        CorruptionKind::Frost => weather::frost(img, &table.frost[s], &mut rng),
        CorruptionKind::Fog => weather::fog(img, table.fog_alpha[s], table.fog_decay, &mut rng),
        CorruptionKind::Brightness => digital::brightness(img, table.brightness_shift[s]),
        CorruptionKind::Contrast => digital::contrast(img, table.contrast_factor[s]),
        CorruptionKind::Elastic => digital::elastic(img, &table.elastic[s], &mut rng),
        CorruptionKind::Pixelate => digital::pixelate(img, table.pixelate_block[s]),
        CorruptionKind::Jpeg => digital::jpeg(img, table.jpeg_quality[s]),
    };
    out.clamp01()
}

/// SplitMix64 finalizer; mixes structured inputs into well-spread seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several values into one seed; order-sensitive.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Per-image seed for image `index` of a dataset corrupted with `base_seed`.
pub fn image_seed(base_seed: u64, index: u64) -> u64 {
    derive_seed(&[base_seed, index])
}

/// Corrupts a `[N, 3, H, W]` planar batch; `indices[i]` is the dataset index
/// of the i-th image and selects its noise stream.
pub fn corrupt_planar_batch(
    batch: &[f32],
    height: usize,
    width: usize,
    indices: &[usize],
    kind: CorruptionKind,
    severity: u8,
    base_seed: u64,
) -> Result<Vec<f32>, CorruptionError> {
    let per = 3 * height * width;
    if batch.len() != per * indices.len() {
        return Err(CorruptionError::ImageShape {
            height,
            width,
            len: batch.len(),
        });
    }
    let table = SeverityTable::standard();
    let mut out = Vec::with_capacity(batch.len());
    for (chunk, &idx) in batch.chunks_exact(per).zip(indices) {
        let img = Image::from_chw(height, width, chunk)?;
        let spec = CorruptionSpec::new(kind, severity, image_seed(base_seed, idx as u64))?;
        out.extend(corrupt_with(&img, &spec, &table).to_chw());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::fixture::{fixture_image, fixture_image_variant};

    #[test]
    fn kind_names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.abbrev().parse::<CorruptionKind>().unwrap(), k);
            assert_eq!(k.long_name().parse::<CorruptionKind>().unwrap(), k);
            assert_eq!(CorruptionKind::ALL[k.index()], k);
        }
        assert!(matches!(
            "fisheye".parse::<CorruptionKind>(),
            Err(CorruptionError::UnknownKind(_))
        ));
    }

    #[test]
    fn severity_is_validated() {
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 0, 1).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 6, 1).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 5, 1).is_ok());
    }

    #[test]
    fn chw_round_trip() {
        let img = fixture_image(8, 6);
        let back = Image::from_chw(8, 6, &img.to_chw()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn every_kind_is_deterministic_and_in_range() {
        let img = fixture_image(32, 32);
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                let spec = CorruptionSpec::new(k, s, 1234).unwrap();
                let a = corrupt(&img, &spec);
                let b = corrupt(&img, &spec);
                assert_eq!(a, b, "{k} severity {s}");
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{k} {s}");
                assert_eq!((a.height(), a.width()), (32, 32));
            }
        }
    }

    #[test]
    fn batch_order_does_not_change_outputs() {
        let a = fixture_image(16, 16).to_chw();
        let b = fixture_image_variant(16, 16, 1).to_chw();
        let mut ab = a.clone();
        ab.extend(&b);
        let mut ba = b.clone();
        ba.extend(&a);
        let k = CorruptionKind::GaussianNoise;
        let out_ab = corrupt_planar_batch(&ab, 16, 16, &[0, 1], k, 3, 9).unwrap();
        let out_ba = corrupt_planar_batch(&ba, 16, 16, &[1, 0], k, 3, 9).unwrap();
        let n = a.len();
        assert_eq!(out_ab[..n], out_ba[n..]);
        assert_eq!(out_ab[n..], out_ba[..n]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(image_seed(1, 0), image_seed(1, 1));
        assert_ne!(image_seed(1, 0), image_seed(2, 0));
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }
}
