//! Synthetic scattering images of a sub-surface point source.
//!
//! Surface irradiance follows the diffusion-dipole form
//! `I(ρ) = P·z / (ρ² + z²)^(3/2)`, where `ρ` is the lateral distance from the
//! point directly above the tip and `z` its depth. The surface is imaged
//! orthographically onto a square pixel grid centred on the origin, then
//! background, shot noise and read noise are added and the result is clipped
//! and quantized to integer counts.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{NormalizationConfig, TipPosition};
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    /// Camera height above the surface, cm. The orthographic projection does
    /// not depend on it; it is kept as part of the scene description.
    pub camera_height: f64,
    pub image_side: usize,
    /// Width of the imaged surface patch, cm.
    pub field_of_view: f64,
    /// Source strength in counts·cm², exposure folded in.
    pub source_power: f64,
    pub background_level: f64,
    pub gaussian_noise_sigma: f64,
    pub poisson_noise: bool,
    pub max_count: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            camera_height: 6.0,
            image_side: 400,
            field_of_view: 16.6,
            source_power: 1500.0,
            background_level: 5.0,
            gaussian_noise_sigma: 2.0,
            poisson_noise: true,
            max_count: 255.0,
        }
    }
}

impl OpticsConfig {
    pub fn desk_scale() -> Self {
        Self {
            image_side: 64,
            ..Self::default()
        }
    }

    /// Same geometry with background and all noise switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            background_level: 0.0,
            gaussian_noise_sigma: 0.0,
            poisson_noise: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("optics.camera_height", self.camera_height),
            ("optics.field_of_view", self.field_of_view),
            ("optics.max_count", self.max_count),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("optics.source_power", self.source_power),
            ("optics.background_level", self.background_level),
            ("optics.gaussian_noise_sigma", self.gaussian_noise_sigma),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        if self.image_side < 8 {
            return Err(Error::config(
                "optics.image_side",
                format!("must be >= 8, got {}", self.image_side),
            ));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.field_of_view / self.image_side as f64
    }

    /// Surface coordinates (cm) of the centre of pixel `(row, col)`.
    /// Columns run along +x, rows along +y.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.pixel_size();
        let half = 0.5 * self.field_of_view;
        ((col as f64 + 0.5) * s - half, (row as f64 + 0.5) * s - half)
    }

    /// Continuous pixel coordinates `(row, col)` of a surface point.
    pub fn surface_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.pixel_size();
        let half = 0.5 * self.field_of_view;
        ((y + half) / s - 0.5, (x + half) / s - 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Pixel counts, shape `[1, S, S]`.
    pub image: Tensor<f32>,
    pub ground_truth: TipPosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub optics: OpticsConfig,
    pub normalization: NormalizationConfig,
    pub records: Vec<SampleRecord>,
}

/// Irradiance at surface point `(x, y)` from a unit-power source at `tip`.
pub fn dipole_irradiance(tip: &TipPosition, depth: f64, x: f64, y: f64) -> f64 {
    let rho2 = (x - tip.x).powi(2) + (y - tip.y).powi(2);
    depth / (rho2 + depth * depth).powf(1.5)
}

/// Noise-free, unclipped irradiance in counts for every pixel, row-major.
pub fn irradiance_map(tip: &TipPosition, cfg: &OpticsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(tip.z >= 0.0) {
        return Err(Error::invalid(
            "render_scatter_image",
            format!("tip depth must be >= 0, got z = {}", tip.z),
        ));
    }
    // a source exactly on the surface is smeared over one pixel
    let depth = if tip.z == 0.0 { cfg.pixel_size() } else { tip.z };
    let n = cfg.image_side;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = cfg.pixel_center(row, col);
            out.push(cfg.source_power * dipole_irradiance(tip, depth, x, y));
        }
    }
    Ok(out)
}

/// Renders one camera frame, shape `[1, S, S]`, integer counts in
/// `[0, max_count]`.
pub fn render_scatter_image<R: Rng + ?Sized>(
    tip: &TipPosition,
    cfg: &OpticsConfig,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let signal = irradiance_map(tip, cfg)?;
    let read_noise = (cfg.gaussian_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.gaussian_noise_sigma).expect("validated sigma"));
    // beyond this the frame saturates regardless of the shot-noise draw
    let saturated = 4.0 * cfg.max_count + 1e3;
    let data = signal
        .into_iter()
        .map(|s| {
            let mut v = s;
            if cfg.poisson_noise && s > 0.0 && s < saturated {
                v = Poisson::new(s).expect("positive finite rate").sample(rng);
            }
            v += cfg.background_level;
            if let Some(noise) = &read_noise {
                v += noise.sample(rng);
            }
            v.clamp(0.0, cfg.max_count).round() as f32
        })
        .collect();
    Tensor::new(vec![1, cfg.image_side, cfg.image_side], data)
}

/// `n` labelled frames with tips drawn uniformly from `ranges`.
///
/// Record `i` draws from its own stream derived from `(seed, i)`, so the
/// output does not depend on how the work is scheduled.
pub fn generate_dataset(
    n: usize,
    cfg: &OpticsConfig,
    ranges: &NormalizationConfig,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::invalid("generate_dataset", "record count must be >= 1"));
    }
    cfg.validate()?;
    ranges.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::stream(seed, seeding::DATASET, i as u64);
            let tip = TipPosition::new(
                rng.random_range(ranges.x.min..=ranges.x.max),
                rng.random_range(ranges.y.min..=ranges.y.max),
                rng.random_range(ranges.z.min..=ranges.z.max),
            );
            let image = render_scatter_image(&tip, cfg, &mut rng)?;
            Ok(SampleRecord {
                image,
                ground_truth: tip,
            })
        })
        .collect()
}
