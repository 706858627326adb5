//! Affine mapping between physical tip coordinates (cm) and network targets
//! in [-1, 1], plus pixel-count scaling for images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Physical tip position in centimeters. `z` is depth below the surface.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TipPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TipPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array([x, y, z]: [f64; 3]) -> Self {
        Self { x, y, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn midpoint(&self) -> f64 {
        self.min + 0.5 * self.span()
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    /// `2(v − min)/(max − min) − 1`; endpoints land on exactly ±1.
    pub fn normalize(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / self.span() - 1.0
    }

    pub fn denormalize(&self, n: f64) -> f64 {
        self.min + (n + 1.0) * 0.5 * self.span()
    }
}

/// Per-axis physical data ranges, each mapped onto [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    pub x: AxisRange,
    pub y: AxisRange,
    pub z: AxisRange,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            x: AxisRange::new(-8.3, 8.3),
            y: AxisRange::new(-5.5, 5.5),
            z: AxisRange::new(0.0, 6.5),
        }
    }
}

impl NormalizationConfig {
    pub fn axes(&self) -> [&AxisRange; 3] {
        [&self.x, &self.y, &self.z]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in ["x", "y", "z"].into_iter().zip(self.axes()) {
            if !(r.min.is_finite() && r.max.is_finite() && r.max > r.min) {
                return Err(Error::config(
                    format!("normalization.{name}"),
                    format!("need finite min < max, got [{}, {}]", r.min, r.max),
                ));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> TipPosition {
        TipPosition::new(self.x.midpoint(), self.y.midpoint(), self.z.midpoint())
    }

    pub fn contains(&self, p: &TipPosition) -> bool {
        self.x.contains(p.x) && self.y.contains(p.y) && self.z.contains(p.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub value: [f64; 3],
    /// Set when the input lay outside the configured data range on any axis.
    /// Out-of-range values are extrapolated, never clamped.
    pub out_of_range: bool,
}

pub fn normalize_position(p: &TipPosition, cfg: &NormalizationConfig) -> Normalized {
    Normalized {
        value: [cfg.x.normalize(p.x), cfg.y.normalize(p.y), cfg.z.normalize(p.z)],
        out_of_range: !cfg.contains(p),
    }
}

pub fn denormalize_position(n: [f64; 3], cfg: &NormalizationConfig) -> TipPosition {
    TipPosition::new(
        cfg.x.denormalize(n[0]),
        cfg.y.denormalize(n[1]),
        cfg.z.denormalize(n[2]),
    )
}

/// Scales pixel counts into [0, 1] and lays the result out as
/// `[channels, H, W]`.
///
/// `raw` is `[H, W]`, `[1, H, W]` or already `[channels, H, W]`; a single
/// plane is replicated into every output channel.
pub fn normalize_image<T: Element>(raw: &Tensor<T>, max_count: f64, channels: usize) -> Result<Tensor<T>> {
    const OP: &str = "normalize_image";
    if !(max_count > 0.0) {
        return Err(Error::invalid(OP, format!("max_count must be > 0, got {max_count}")));
    }
    let (c, h, w) = match *raw.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::invalid(
                OP,
                format!("expected [H, W] or [C, H, W], got {:?}", raw.shape()),
            ))
        }
    };
    if c != 1 && c != channels {
        return Err(Error::invalid(
            OP,
            format!("cannot map {c} source channels onto {channels}"),
        ));
    }
    if let Some(v) = raw.data().iter().find(|v| **v < T::zero() || v.is_nan()) {
        return Err(Error::invalid(OP, format!("pixel value {v:?} is negative or NaN")));
    }
    let scale = T::from_f64(1.0 / max_count);
    let scaled: Vec<T> = raw.data().iter().map(|&v| v * scale).collect();
    let data = if c == channels {
        scaled
    } else {
        let mut out = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            out.extend_from_slice(&scaled);
        }
        out
    };
    Tensor::new(vec![channels, h, w], data)
}
