//! Labelled image datasets: in-memory storage, CIFAR binary and PNG
//! directory I/O, and a procedural shape dataset.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corrupt::{corrupt, derive_seed, image_seed, CorruptionSpec, Image};
use crate::imageio::{Depth, ImageIoError, Raster};
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 binary record: one label and a 3x32x32 planar image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {len} bytes is not a whole number of {CIFAR_RECORD}-byte CIFAR records")]
    CifarLength { path: PathBuf, len: usize },
    #[error("{path}: label {label} is out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },
    #[error("no data found under {0}")]
    Empty(PathBuf),
    #[error("{path}: image is {got_h}x{got_w}x{got_c}, expected {want_h}x{want_w}x3")]
    ImageShape {
        path: PathBuf,
        got_h: usize,
        got_w: usize,
        got_c: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageIoError,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images in planar `[3, H, W]` layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = 3 * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} pixel values for {} images of 3x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {classes} classes")));
        }
        Ok(Self {
            height,
            width,
            classes,
            pixels,
            labels,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.classes {
            return Err(DataError::Invalid(format!(
                "{} class names for {} classes",
                names.len(),
                self.classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    fn per_image(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn planar(&self, index: usize) -> &[f32] {
        let n = self.per_image();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Image {
        Image::from_chw(self.height, self.width, self.planar(index)).expect("dataset geometry is valid")
    }

    /// Stacks the given images into `[B, 3, H, W]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend_from_slice(self.planar(i));
        }
        let t = Tensor::new(vec![indices.len(), 3, self.height, self.width], data).expect("sizes agree");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (t, labels) = self.batch(indices);
        Self {
            pixels: t.into_data(),
            labels,
            ..self.clone_meta()
        }
    }

    /// First `n` images and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    fn clone_meta(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            classes: self.classes,
            pixels: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
        }
    }

    /// Every image corrupted with `kind`/`severity`; image `i` uses the seed
    /// `image_seed(spec.seed(), i)`, so the result does not depend on order or
    /// batching.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            let s = spec.with_seed(image_seed(spec.seed(), i as u64));
            pixels.extend(corrupt(&self.image(i), &s).to_chw());
        }
        Self {
            pixels,
            labels: self.labels.clone(),
            ..self.clone_meta()
        }
    }

    /// SHA-256 over geometry, labels and exact pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.height, self.width, self.classes, self.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Number of images of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Reads a CIFAR-10 binary file, or every `*.bin` file in a directory in
/// name order. Values are mapped from bytes to `[0, 1]` by `v / 255`.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(io_err(file))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::CifarLength {
                path: file.clone(),
                len: bytes.len(),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(DataError::LabelOutOfRange {
                    path: file.clone(),
                    label,
                    classes: 10,
                });
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Dataset::new(CIFAR_SIDE, CIFAR_SIDE, 10, pixels, labels)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes 32x32, at most 10-class data in CIFAR binary layout.
pub fn write_cifar_binary(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if data.height != CIFAR_SIDE || data.width != CIFAR_SIDE || data.classes > 256 {
        return Err(DataError::Invalid("CIFAR binary needs 32x32 images".into()));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(data.planar(i).iter().map(|&v| to_byte(v)));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Reads `root/<class>/*.png`; classes are the subdirectory names in sorted
/// order, images within a class in file-name order.
pub fn load_image_dir(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    let mut names = Vec::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut geometry = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for file in files {
            let bytes = std::fs::read(&file).map_err(io_err(&file))?;
            let raster = Raster::decode(&bytes).map_err(|source| DataError::Image {
                path: file.clone(),
                source,
            })?;
            let (h, w) = *geometry.get_or_insert((raster.height, raster.width));
            if (raster.height, raster.width, raster.channels) != (h, w, 3) {
                return Err(DataError::ImageShape {
                    path: file,
                    got_h: raster.height,
                    got_w: raster.width,
                    got_c: raster.channels,
                    want_h: h,
                    want_w: w,
                });
            }
            let scale = match raster.depth {
                Depth::Eight => 255.0,
                Depth::Sixteen => 65535.0,
            };
            let hwc: Vec<f32> = raster.samples.iter().map(|&v| v as f32 / scale).collect();
            let img = Image::new(h, w, hwc).expect("decoded size");
            pixels.extend(img.to_chw());
            labels.push(label);
        }
    }
    let (h, w) = geometry.ok_or_else(|| DataError::Empty(root.to_path_buf()))?;
    Dataset::new(h, w, names.len(), pixels, labels)?.with_class_names(names)
}

/// Writes `root/<class>/<index>.png` as 8-bit RGB.
pub fn write_image_dir(data: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for name in &data.class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let digits = data.len().max(1).to_string().len().max(5);
    for i in 0..data.len() {
        let img = data.image(i);
        let raster = Raster::rgb8(data.width, data.height, &img.to_rgb8());
        let path = root
            .join(&data.class_names[data.labels[i]])
            .join(format!("{i:0digits$}.png"));
        let bytes = raster.encode().map_err(|source| DataError::Image {
            path: path.clone(),
            source,
        })?;
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Loads a CIFAR binary file/directory or a PNG class directory, whichever
/// `path` holds.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let has_bin = if path.is_dir() {
        std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "bin"))
    } else {
        true
    };
    if has_bin {
        load_cifar_binary(path)
    } else {
        load_image_dir(path)
    }
}

/// Names of the procedural shape classes, by label.
pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "hstripes", "vstripes", "checker", "cross", "frame",
];

/// Parameters of [`synthetic_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeConfig {
    pub side: usize,
    /// Luminance gap between shape and background, sampled uniformly.
    pub contrast: (f32, f32),
    /// Standard deviation of the per-pixel texture noise on clean images.
    pub texture: f32,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            side: 32,
            contrast: (0.12, 0.45),
            texture: 0.02,
        }
    }
}

fn shape_mask(class: usize, dy: f32, dx: f32, r: f32) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let dist = (dy * dy + dx * dx).sqrt();
    let bar = r * 0.32;
    let inside_square = ay <= r && ax <= r;
    match class {
        0 => dist <= r,
        1 => ay <= r * 0.85 && ax <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.55,
        3 => (ay <= bar && ax <= r) || (ax <= bar && ay <= r),
        4 => dist <= r && dist >= r * 0.55,
        5 => inside_square && ((dy + r).floor() as i32).rem_euclid(4) < 2,
        6 => inside_square && ((dx + r).floor() as i32).rem_euclid(4) < 2,
        7 => inside_square && (((dy + r) / 3.0).floor() as i32 + ((dx + r) / 3.0).floor() as i32) % 2 == 0,
        8 => inside_square && ((dy - dx).abs() <= bar * 1.2 || (dy + dx).abs() <= bar * 1.2),
        9 => inside_square && !(ay <= r * 0.6 && ax <= r * 0.6),
        _ => false,
    }
}

fn random_colour(rng: &mut ChaCha8Rng, luminance: f32) -> [f32; 3] {
    let tint: [f32; 3] = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)];
    let mean = (tint[0] + tint[1] + tint[2]) / 3.0;
    tint.map(|t| (luminance + t - mean).clamp(0.0, 1.0))
}

/// One procedural image of `class`, fully determined by `seed`.
pub fn shape_image(class: usize, seed: u64, cfg: &ShapeConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.side;
    let s = side as f32;
    let bg_lum = rng.random_range(0.2..0.8);
    let gap = rng.random_range(cfg.contrast.0..cfg.contrast.1);
    let fg_lum = if bg_lum + gap <= 0.95 && (bg_lum - gap < 0.05 || rng.random_bool(0.5)) {
        bg_lum + gap
    } else {
        bg_lum - gap
    };
    let bg = random_colour(&mut rng, bg_lum);
    let fg = random_colour(&mut rng, fg_lum);
    let r = rng.random_range(0.22..0.34) * s;
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let slope = [rng.random_range(-0.1..0.1f32), rng.random_range(-0.1..0.1f32)];
    let noise = rand_distr::Normal::new(0.0f32, cfg.texture.max(0.0)).expect("finite std");
    let mut img = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let shade = slope[0] * (y as f32 / s - 0.5) + slope[1] * (x as f32 / s - 0.5);
            // 2x2 supersampling for soft edges
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if shape_mask(class, y as f32 + oy - cy, x as f32 + ox - cx, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let v = bg[c] * (1.0 - cover) + fg[c] * cover + shade + rng.sample(noise);
                img.set(y, x, c, v);
            }
        }
    }
    img.clamp01()
}

/// `count` procedural images with balanced, seed-shuffled labels.
pub fn synthetic_shapes(count: usize, seed: u64, cfg: &ShapeConfig) -> Dataset {
    let classes = SHAPE_CLASSES.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5348_4150]));
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    // Fisher-Yates keeps the class balance exact
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let mut pixels = Vec::with_capacity(count * 3 * cfg.side * cfg.side);
    for (i, &label) in labels.iter().enumerate() {
        pixels.extend(shape_image(label, derive_seed(&[seed, i as u64]), cfg).to_chw());
    }
    Dataset::new(cfg.side, cfg.side, classes, pixels, labels)
        .expect("generator output is consistent")
        .with_class_names(SHAPE_CLASSES.iter().map(|s| s.to_string()).collect())
        .expect("ten names")
}
