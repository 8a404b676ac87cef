//! Scene states: RGB texture plus a per-pixel depth map, and the normalized
//! 4-channel encoding the diffusion samplers operate on.
//!
//! Physical units: rgb in [0, 1] per channel, depth in meters. The normalized
//! view maps rgb affinely onto [-1, 1] and depth affinely from
//! [range.min, range.max] onto [-1, 1]. Decoding clamps, so decoded states
//! always satisfy the physical-range invariants.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// (H, W, C) grid of intensities or residuals.
pub type ImageGrid = Array3<f64>;
/// (H, W) grid of depths or scalar per-pixel values.
pub type DepthGrid = Array2<f64>;
/// (H, W, 4) normalized diffusion state: channels 0..3 rgb, channel 3 depth.
pub type StateGrid = Array3<f64>;

/// Index of the depth channel inside a [`StateGrid`].
pub const DEPTH_CHANNEL: usize = 3;

/// Valid depth interval in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min > 0.0 && min < max) {
            return Err(CoreError::invalid(format!(
                "depth range must satisfy 0 < min < max, got [{min}, {max}]"
            )));
        }
        Ok(DepthRange { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.min, self.max)
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }
}

/// A scene: rgb (H, W, 3) plus depth (H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdState {
    pub rgb: ImageGrid,
    pub depth: DepthGrid,
}

impl RgbdState {
    pub fn new(rgb: ImageGrid, depth: DepthGrid) -> Result<Self> {
        let (h, w, c) = rgb.dim();
        if c != 3 {
            return Err(CoreError::shape(format!("rgb must have 3 channels, got {c}")));
        }
        if depth.dim() != (h, w) {
            return Err(CoreError::shape(format!(
                "depth {:?} does not match rgb {:?}",
                depth.dim(),
                (h, w)
            )));
        }
        Ok(RgbdState { rgb, depth })
    }

    pub fn height(&self) -> usize {
        self.depth.dim().0
    }

    pub fn width(&self) -> usize {
        self.depth.dim().1
    }

    /// Normalized 4-channel view. Values outside the physical ranges map
    /// outside [-1, 1]; encoding does not clamp (decoding does).
    pub fn encode(&self, range: &DepthRange) -> StateGrid {
        let (h, w, _) = self.rgb.dim();
        let mut out = Array3::zeros((h, w, 4));
        let inv_span = 2.0 / range.span();
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out[[i, j, c]] = 2.0 * self.rgb[[i, j, c]] - 1.0;
                }
                out[[i, j, DEPTH_CHANNEL]] = (self.depth[[i, j]] - range.min) * inv_span - 1.0;
            }
        }
        out
    }

    /// Inverse of [`RgbdState::encode`], clamping into the physical ranges.
    pub fn decode(state: &StateGrid, range: &DepthRange) -> Result<RgbdState> {
        let (h, w, c) = state.dim();
        if c != 4 {
            return Err(CoreError::shape(format!(
                "normalized state must have 4 channels, got {c}"
            )));
        }
        let mut rgb = Array3::zeros((h, w, 3));
        let mut depth = Array2::zeros((h, w));
        let half_span = range.span() / 2.0;
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    rgb[[i, j, ch]] = ((state[[i, j, ch]] + 1.0) / 2.0).clamp(0.0, 1.0);
                }
                let d = range.min + (state[[i, j, DEPTH_CHANNEL]] + 1.0) * half_span;
                depth[[i, j]] = range.clamp(d);
            }
        }
        Ok(RgbdState { rgb, depth })
    }
}
