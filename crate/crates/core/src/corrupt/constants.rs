//! Severity constants for 32x32 inputs.
//!
//! Each array is indexed by `severity - 1`. Changing any value must bump
//! [`CONSTANTS_VERSION`], which is folded into evaluation cache keys and
//! golden-image file names.

pub const CONSTANTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlassParams {
    pub sigma: f32,
    pub max_delta: usize,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnowParams {
    /// Probability that a pixel seeds a flake.
    pub density: f32,
    /// Streak length in pixels.
    pub streak_length: usize,
    /// Opacity of a full-strength flake.
    pub opacity: f32,
    /// Blend weight toward the washed-out sky tone.
    pub whiten: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrostParams {
    /// Maximum opacity of the ice layer.
    pub coverage: f32,
    /// Noise level above which ice starts to form.
    pub threshold: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticParams {
    /// Peak displacement in pixels.
    pub amplitude: f32,
    /// Smoothing of the random displacement field.
    pub sigma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeverityTable {
    pub gaussian_sigma: [f32; 5],
    pub shot_rate: [f64; 5],
    pub impulse_fraction: [f32; 5],
    pub defocus_radius: [f32; 5],
    pub defocus_alias_sigma: f32,
    pub glass: [GlassParams; 5],
    pub motion_length: [usize; 5],
    pub zoom_max: [f32; 5],
    pub zoom_step: f32,
    pub snow: [SnowParams; 5],
    pub frost: [FrostParams; 5],
    pub fog_alpha: [f32; 5],
    pub fog_decay: f32,
    pub brightness_shift: [f32; 5],
    pub contrast_factor: [f32; 5],
    pub elastic: [ElasticParams; 5],
    pub pixelate_block: [usize; 5],
    pub jpeg_quality: [u8; 5],
}

const fn glass(sigma: f32, max_delta: usize, iterations: usize) -> GlassParams {
    GlassParams {
        sigma,
        max_delta,
        iterations,
    }
}

const fn snow(density: f32, streak_length: usize, opacity: f32, whiten: f32) -> SnowParams {
    SnowParams {
        density,
        streak_length,
        opacity,
        whiten,
    }
}

const fn frost(coverage: f32, threshold: f32) -> FrostParams {
    FrostParams {
        coverage,
        threshold,
    }
}

const fn elastic(amplitude: f32, sigma: f32) -> ElasticParams {
    ElasticParams { amplitude, sigma }
}

impl SeverityTable {
    pub fn standard() -> Self {
        Self {
            gaussian_sigma: [0.04, 0.06, 0.08, 0.09, 0.10],
            shot_rate: [500.0, 250.0, 100.0, 75.0, 50.0],
            impulse_fraction: [0.01, 0.02, 0.03, 0.05, 0.07],
            defocus_radius: [0.5, 1.0, 1.5, 2.0, 3.0],
            defocus_alias_sigma: 0.5,
            glass: [
                glass(0.4, 1, 1),
                glass(0.6, 1, 1),
                glass(0.7, 1, 2),
                glass(0.8, 2, 2),
                glass(1.0, 2, 2),
            ],
            motion_length: [3, 5, 7, 9, 11],
            zoom_max: [1.06, 1.11, 1.16, 1.21, 1.26],
            zoom_step: 0.01,
            snow: [
                snow(0.010, 3, 0.70, 0.10),
                snow(0.015, 4, 0.75, 0.15),
                snow(0.020, 5, 0.80, 0.20),
                snow(0.030, 6, 0.85, 0.25),
                snow(0.040, 7, 0.90, 0.30),
            ],
            frost: [
                frost(0.25, 0.60),
                frost(0.35, 0.55),
                frost(0.45, 0.50),
                frost(0.50, 0.45),
                frost(0.55, 0.40),
            ],
            fog_alpha: [0.2, 0.3, 0.45, 0.6, 0.75],
            fog_decay: 2.0,
            brightness_shift: [0.05, 0.1, 0.15, 0.2, 0.3],
            contrast_factor: [0.75, 0.6, 0.45, 0.3, 0.15],
            elastic: [
                elastic(1.0, 3.0),
                elastic(1.5, 3.0),
                elastic(2.0, 3.0),
                elastic(2.5, 3.0),
                elastic(3.0, 3.0),
            ],
            pixelate_block: [2, 3, 4, 5, 7],
            jpeg_quality: [80, 65, 58, 50, 40],
        }
    }
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self::standard()
    }
}
