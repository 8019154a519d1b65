//! Class activation maps, top-k class selection and the CAM alignment loss.
//!
//! For a model whose head is `logits = W · GAP(f) + b`, the map for class
//! `c` is `M_c = Σ_k W[c, k] · f_k`. Computing it for every class at once is
//! a 1x1 convolution of the features with the head weight reshaped to
//! `[classes, channels, 1, 1]`, which is how both the plain and the taped
//! versions work.

use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::model::{CamNet, ModelError, Trainable};
use crate::ops;
use crate::tensor::{Element, Tensor, TensorError};

/// Stabiliser added to `max - min` by the normalised loss variant.
pub const NORMALIZE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class {class} out of range for a {classes}-class model")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("k = {k} is invalid for {classes} classes (need 1 <= k and 2k <= classes)")]
    InvalidK { k: usize, classes: usize },
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("clean and corrupted batches differ in shape: {clean:?} vs {corrupted:?}")]
    BatchMismatch {
        clean: Vec<usize>,
        corrupted: Vec<usize>,
    },
    #[error("cannot upsample a {from_h}x{from_w} map down to {to_h}x{to_w}")]
    UpsampleTooSmall {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },
}

pub type Result<T, E = CamError> = std::result::Result<T, E>;

/// One class activation map at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap<E: Element = f32> {
    pub class_id: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<E>,
    /// Which model produced the map, e.g. `"vanilla"` or a content hash.
    pub source: String,
}

impl<E: Element> CamMap<E> {
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Ordered, duplicate-free class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassSet(Vec<usize>);

impl ClassSet {
    /// Sorts and deduplicates `ids`.
    pub fn new(mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }
}

fn head_as_kernel<E: Element>(model: &CamNet<E>) -> Result<Tensor<E>> {
    let w = model.head_weight();
    let [classes, channels] = w.dims::<2>("head_as_kernel")?;
    Ok(w.clone().reshape([classes, channels, 1, 1])?)
}

/// Maps for every class: `[B, classes, H_f, W_f]`.
pub fn all_class_cams<E: Element>(model: &CamNet<E>, features: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = model.arch().feature_shape();
    let [_, fc, fh, fw] = features.dims::<4>("all_class_cams")?;
    if (fc, fh, fw) != (c, h, w) {
        return Err(TensorError::ShapeMismatch {
            op: "all_class_cams",
            lhs: features.shape().to_vec(),
            rhs: vec![c, h, w],
            detail: "features must come from this model".into(),
        }
        .into());
    }
    Ok(ops::conv2d(features, &head_as_kernel(model)?, 1, 0)?)
}

/// Map of `class_id` for each batch item.
pub fn compute_cam<E: Element>(
    model: &CamNet<E>,
    features: &Tensor<E>,
    class_id: usize,
    source: &str,
) -> Result<Vec<CamMap<E>>> {
    let classes = model.classes();
    if class_id >= classes {
        return Err(CamError::ClassOutOfRange {
            class: class_id,
            classes,
        });
    }
    let cams = all_class_cams(model, features)?;
    let [batch, _, h, w] = cams.dims::<4>("compute_cam")?;
    Ok((0..batch)
        .map(|b| {
            let start = (b * classes + class_id) * h * w;
            CamMap {
                class_id,
                height: h,
                width: w,
                values: cams.data()[start..start + h * w].to_vec(),
                source: source.to_string(),
            }
        })
        .collect())
}

/// Taped version of [`all_class_cams`]; differentiable w.r.t. both inputs.
pub fn cams_on_tape<E: Element>(tape: &mut Tape<E>, features: Var, head_weight: Var) -> Result<Var> {
    let [classes, channels] = tape.value(head_weight).dims::<2>("cams_on_tape")?;
    let kernel = tape.reshape(head_weight, [classes, channels, 1, 1])?;
    Ok(tape.conv2d(features, kernel, 1, 0)?)
}

/// Bilinear (half-pixel centres) upsampling followed by min-max scaling to
/// `[0, 1]`. A constant map yields all zeros.
pub fn upsample_normalize<E: Element>(cam: &CamMap<E>, height: usize, width: usize) -> Result<Vec<f32>> {
    if height < cam.height || width < cam.width || cam.height == 0 || cam.width == 0 {
        return Err(CamError::UpsampleTooSmall {
            from_h: cam.height,
            from_w: cam.width,
            to_h: height,
            to_w: width,
        });
    }
    let src = |y: usize, x: usize| cam.values[y * cam.width + x].as_f64();
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(inp - 1), pos - lo as f64)
    };
    let mut up = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, cam.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, cam.width);
            let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
            let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
            up.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(up
        .into_iter()
        .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect())
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k<E: Element>(row: &[E], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(k: usize, classes: usize) -> Result<()> {
    if k == 0 || 2 * k > classes {
        return Err(CamError::InvalidK { k, classes });
    }
    Ok(())
}

/// Union of the per-row top-k of two `[B, classes]` logit tensors.
pub fn top2k_from_logits<E: Element>(clean: &Tensor<E>, corrupted: &Tensor<E>, k: usize) -> Result<Vec<ClassSet>> {
    let [batch, classes] = clean.dims::<2>("top2k_from_logits")?;
    if clean.shape() != corrupted.shape() {
        return Err(CamError::BatchMismatch {
            clean: clean.shape().to_vec(),
            corrupted: corrupted.shape().to_vec(),
        });
    }
    check_k(k, classes)?;
    Ok((0..batch)
        .map(|b| {
            let row = |t: &Tensor<E>| t.data()[b * classes..(b + 1) * classes].to_vec();
            let mut ids = top_k(&row(clean), k);
            ids.extend(top_k(&row(corrupted), k));
            ClassSet::new(ids)
        })
        .collect())
}

/// Class sets from `model`'s own predictions on the clean and corrupted batch.
pub fn top2k_classes<E: Element>(
    model: &CamNet<E>,
    clean: &Tensor<E>,
    corrupted: &Tensor<E>,
    k: usize,
) -> Result<Vec<ClassSet>> {
    let (lc, _) = model.forward(clean)?;
    let (lx, _) = model.forward(corrupted)?;
    top2k_from_logits(&lc, &lx, k)
}

/// How maps enter the alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamLossMode {
    /// Raw maps at feature resolution.
    #[default]
    Raw,
    /// Each map min-max normalised before comparison.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamLossConfig {
    pub k: usize,
    pub alpha: f64,
    pub mode: CamLossMode,
}

impl CamLossConfig {
    pub fn new(k: usize, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(CamError::InvalidAlpha(alpha));
        }
        if k == 0 {
            return Err(CamError::InvalidK { k, classes: 0 });
        }
        Ok(Self {
            k,
            alpha,
            mode: CamLossMode::Raw,
        })
    }

    pub fn with_mode(mut self, mode: CamLossMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Recorded alignment loss and the class sets it used.
#[derive(Debug)]
pub struct TapedCamLoss {
    pub loss: Var,
    pub class_sets: Vec<ClassSet>,
    /// Handles of `model`'s parameters on the tape.
    pub bound: crate::model::Bound,
}

/// Alignment loss between `model` on (clean, corrupted) inputs and the
/// frozen `reference` on the clean input:
///
/// `L = mean_b Σ_{c ∈ C_b} [ MSE(M_c(x), M_c^ref(x)) + α · MSE(M_c(x'), M_c^ref(x)) ]`
///
/// where `C_b` is the union of the model's top-k classes on `x` and `x'`.
/// Only `model`'s backbone is tracked; the head and the reference enter as
/// constants.
pub fn cam_alignment_loss_on_tape<E: Element>(
    tape: &mut Tape<E>,
    model: &CamNet<E>,
    reference: &CamNet<E>,
    clean: &Tensor<E>,
    corrupted: &Tensor<E>,
    cfg: &CamLossConfig,
) -> Result<TapedCamLoss> {
    model.ensure_same_arch(reference)?;
    if clean.shape() != corrupted.shape() {
        return Err(CamError::BatchMismatch {
            clean: clean.shape().to_vec(),
            corrupted: corrupted.shape().to_vec(),
        });
    }
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return Err(CamError::InvalidAlpha(cfg.alpha));
    }
    check_k(cfg.k, model.classes())?;

    let (_, ref_features) = reference.forward(clean)?;
    let ref_cams = all_class_cams(reference, &ref_features)?;

    let bound = model.bind(tape, Trainable::Backbone);
    let x = tape.constant(clean.clone());
    let xp = tape.constant(corrupted.clone());
    let (logits_x, feat_x) = model.forward_on_tape(tape, &bound, x)?;
    let (logits_xp, feat_xp) = model.forward_on_tape(tape, &bound, xp)?;
    let class_sets = top2k_from_logits(tape.value(logits_x), tape.value(logits_xp), cfg.k)?;

    let classes = model.classes();
    let mask: Vec<bool> = class_sets
        .iter()
        .flat_map(|set| (0..classes).map(move |c| set.contains(c)))
        .collect();

    let mut cams_x = cams_on_tape(tape, feat_x, bound.head_weight())?;
    let mut cams_xp = cams_on_tape(tape, feat_xp, bound.head_weight())?;
    let mut target = tape.constant(ref_cams);
    if cfg.mode == CamLossMode::Normalized {
        let eps = E::of(NORMALIZE_EPS);
        cams_x = tape.map_normalize(cams_x, eps)?;
        cams_xp = tape.map_normalize(cams_xp, eps)?;
        target = tape.map_normalize(target, eps)?;
    }
    let clean_term = tape.selected_map_mse(cams_x, target, mask.clone())?;
    let corrupted_term = tape.selected_map_mse(cams_xp, target, mask)?;
    let weighted = tape.scale(corrupted_term, E::of(cfg.alpha));
    let loss = tape.add(clean_term, weighted)?;
    Ok(TapedCamLoss {
        loss,
        class_sets,
        bound,
    })
}

/// Value of the alignment loss (no gradients kept).
pub fn cam_alignment_loss<E: Element>(
    model: &CamNet<E>,
    reference: &CamNet<E>,
    clean: &Tensor<E>,
    corrupted: &Tensor<E>,
    cfg: &CamLossConfig,
) -> Result<E> {
    let mut tape = Tape::new();
    let out = cam_alignment_loss_on_tape(&mut tape, model, reference, clean, corrupted, cfg)?;
    Ok(tape.value(out.loss).item()?)
}
