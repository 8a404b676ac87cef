//! Thin-lens blur geometry and coded PSF handling.
//!
//! A single reference PSF (one k x k kernel per color channel, calibrated or
//! synthetic) is rescaled per depth: the thin-lens circle of confusion fixes a
//! dimensionless scale relative to the reference depth, and the kernel is
//! resampled bilinearly by that scale. The same scale applies to all three
//! channels; the blur is treated as achromatic in shape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::state::{DepthRange, ImageGrid};
use crate::Result;

/// Thin-lens camera description. All lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraParams {
    pub focal_length: f64,
    pub f_number: f64,
    pub pixel_pitch: f64,
    pub focus_distance: f64,
    /// Side length of the square coded window in the aperture plane.
    pub aperture_width: f64,
    pub depth_range: DepthRange,
    /// Lower clamp on the dimensionless blur scale, so kernels never collapse
    /// entirely even at the focus distance.
    pub scale_floor: f64,
    /// Rotate the kernel 180 degrees for depths nearer than the focus plane.
    pub flip_near_side: bool,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams {
            focal_length: 0.035,
            f_number: 1.8,
            pixel_pitch: 13e-6,
            focus_distance: 1.5,
            aperture_width: 4.58e-3,
            depth_range: DepthRange { min: 2.0, max: 4.0 },
            scale_floor: 0.05,
            flip_near_side: false,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_length > 0.0
            && self.f_number > 0.0
            && self.pixel_pitch > 0.0
            && self.aperture_width > 0.0
            && self.focus_distance > self.focal_length
            && self.depth_range.min > self.focal_length
            && self.depth_range.min < self.depth_range.max
            && self.scale_floor > 0.0;
        if !ok {
            return Err(CoreError::invalid(format!(
                "camera parameters out of model range: {self:?}"
            )));
        }
        Ok(())
    }

    /// Aperture diameter implied by focal length and f-number.
    pub fn aperture_diameter(&self) -> f64 {
        self.focal_length / self.f_number
    }
}

/// Thin-lens circle of confusion diameter (meters) at object distance `depth`.
pub fn circle_of_confusion(camera: &CameraParams, depth: f64) -> Result<f64> {
    if !(depth.is_finite() && depth > camera.focal_length) {
        return Err(CoreError::invalid(format!(
            "depth {depth} must exceed the focal length {}",
            camera.focal_length
        )));
    }
    let a = camera.aperture_diameter();
    let f = camera.focal_length;
    let df = camera.focus_distance;
    Ok(a * f * (depth - df).abs() / (depth * (df - f)))
}

/// Dimensionless kernel scale at `depth`, relative to the blur at
/// `reference_depth`, clamped below by the camera's scale floor.
pub fn depth_to_scale(camera: &CameraParams, reference_depth: f64, depth: f64) -> Result<f64> {
    Ok(depth_to_scale_with_derivative(camera, reference_depth, depth)?.0)
}

/// Scale and its derivative with respect to depth. The derivative is zero
/// inside the floor clamp; the absolute-value kink sits exactly at the focus
/// distance, where the clamp is always active.
pub fn depth_to_scale_with_derivative(
    camera: &CameraParams,
    reference_depth: f64,
    depth: f64,
) -> Result<(f64, f64)> {
    let c_ref = circle_of_confusion(camera, reference_depth)?;
    if c_ref <= 0.0 {
        return Err(CoreError::invalid(format!(
            "reference depth {reference_depth} is at the focus plane; its blur is degenerate"
        )));
    }
    let c = circle_of_confusion(camera, depth)?;
    let raw = c / c_ref;
    if raw <= camera.scale_floor {
        return Ok((camera.scale_floor, 0.0));
    }
    let f = camera.focal_length;
    let df = camera.focus_distance;
    let coef = camera.aperture_diameter() * f / (df - f);
    let dc = (depth - df).signum() * coef * df / (depth * depth);
    Ok((raw, dc / c_ref))
}

/// Reference coded PSF: one kernel per color channel on a shared odd-sized
/// square support, each normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedPsf {
    kernels: [Array2<f64>; 3],
    pub pixel_pitch: f64,
    pub reference_depth: f64,
}

impl CodedPsf {
    /// Normalizes and validates raw per-channel kernels.
    pub fn from_raw(
        kernels: [Array2<f64>; 3],
        pixel_pitch: f64,
        reference_depth: f64,
    ) -> Result<Self> {
        let psf = CodedPsf {
            kernels: normalize_kernels(kernels)?,
            pixel_pitch,
            reference_depth,
        };
        psf.validate()?;
        Ok(psf)
    }

    /// Wraps kernels that are already normalized; still validated.
    pub fn from_normalized(
        kernels: [Array2<f64>; 3],
        pixel_pitch: f64,
        reference_depth: f64,
    ) -> Result<Self> {
        let psf = CodedPsf {
            kernels,
            pixel_pitch,
            reference_depth,
        };
        psf.validate()?;
        Ok(psf)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, k2) = self.kernels[0].dim();
        if k != k2 || k % 2 == 0 {
            return Err(CoreError::invalid(format!(
                "kernel support must be odd and square, got {k}x{k2}"
            )));
        }
        if !(self.pixel_pitch > 0.0 && self.reference_depth > 0.0) {
            return Err(CoreError::invalid(
                "pixel pitch and reference depth must be positive",
            ));
        }
        for (c, kern) in self.kernels.iter().enumerate() {
            if kern.dim() != (k, k) {
                return Err(CoreError::shape("kernel channels differ in size".to_string()));
            }
            let mut sum = 0.0;
            for &v in kern.iter() {
                if !v.is_finite() || v < 0.0 {
                    return Err(CoreError::invalid(format!(
                        "channel {c} contains a negative or non-finite weight"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::invalid(format!(
                    "channel {c} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(())
    }

    /// Kernel side length.
    pub fn size(&self) -> usize {
        self.kernels[0].dim().0
    }

    pub fn radius(&self) -> usize {
        (self.size() - 1) / 2
    }

    pub fn kernel(&self, channel: usize) -> &Array2<f64> {
        &self.kernels[channel]
    }

    pub fn kernels(&self) -> &[Array2<f64>; 3] {
        &self.kernels
    }
}

/// Normalize each channel of a raw PSF to unit sum. Fails on a channel with
/// no mass (nothing sensible to normalize).
pub fn normalize_psf(psf: &CodedPsf) -> Result<CodedPsf> {
    Ok(CodedPsf {
        kernels: normalize_kernels(psf.kernels.clone())?,
        pixel_pitch: psf.pixel_pitch,
        reference_depth: psf.reference_depth,
    })
}

fn normalize_kernels(mut kernels: [Array2<f64>; 3]) -> Result<[Array2<f64>; 3]> {
    for (c, kern) in kernels.iter_mut().enumerate() {
        let mut sum = 0.0;
        for v in kern.iter_mut() {
            if !v.is_finite() {
                return Err(CoreError::invalid(format!(
                    "channel {c} contains a non-finite weight"
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
            sum += *v;
        }
        if sum <= 1e-12 {
            return Err(CoreError::invalid(format!(
                "channel {c} has no positive mass to normalize"
            )));
        }
        kern.mapv_inplace(|v| v / sum);
    }
    Ok(kernels)
}

/// Output support for a given scale: ceil(scale * k) rounded up to odd.
fn scaled_support(k: usize, scale: f64) -> usize {
    let raw = (scale * k as f64).ceil() as usize;
    let raw = raw.max(1);
    if raw % 2 == 0 {
        raw + 1
    } else {
        raw
    }
}

/// Bilinear sample of `kern` at fractional offset (si, sj) from its center;
/// zero outside the support. Also returns the two partial derivatives of the
/// interpolant with respect to (si, sj).
fn bilinear_with_grad(kern: &Array2<f64>, r: i64, si: f64, sj: f64) -> (f64, f64, f64) {
    let i0 = si.floor();
    let j0 = sj.floor();
    let fi = si - i0;
    let fj = sj - j0;
    let i0 = i0 as i64;
    let j0 = j0 as i64;
    let at = |i: i64, j: i64| -> f64 {
        if i < -r || i > r || j < -r || j > r {
            0.0
        } else {
            kern[[(i + r) as usize, (j + r) as usize]]
        }
    };
    let v00 = at(i0, j0);
    let v10 = at(i0 + 1, j0);
    let v01 = at(i0, j0 + 1);
    let v11 = at(i0 + 1, j0 + 1);
    let value = (1.0 - fi) * (1.0 - fj) * v00
        + fi * (1.0 - fj) * v10
        + (1.0 - fi) * fj * v01
        + fi * fj * v11;
    let di = (1.0 - fj) * (v10 - v00) + fj * (v11 - v01);
    let dj = (1.0 - fi) * (v01 - v00) + fi * (v11 - v10);
    (value, di, dj)
}

fn resample_channel(kern: &Array2<f64>, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let k = kern.dim().0;
    let r = ((k - 1) / 2) as i64;
    let k_out = scaled_support(k, scale);
    let r_out = ((k_out - 1) / 2) as i64;
    let mut raw = Array2::zeros((k_out, k_out));
    let mut draw = Array2::zeros((k_out, k_out));
    let inv = 1.0 / scale;
    for di in -r_out..=r_out {
        for dj in -r_out..=r_out {
            let si = di as f64 * inv;
            let sj = dj as f64 * inv;
            let (v, gi, gj) = bilinear_with_grad(kern, r, si, sj);
            raw[[(di + r_out) as usize, (dj + r_out) as usize]] = v;
            // d/ds of kern(di/s, dj/s) by the chain rule.
            draw[[(di + r_out) as usize, (dj + r_out) as usize]] =
                gi * (-si * inv) + gj * (-sj * inv);
        }
    }
    (raw, draw)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CoreError::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Resample the PSF to a new dimensionless scale. Output coordinates map to
/// input coordinates by (i, j) -> (i/scale, j/scale) about the center, each
/// channel is renormalized to unit sum afterwards, and a channel whose
/// resampled mass collapses falls back to a 1x1-style delta on the new support.
pub fn rescale_psf(psf: &CodedPsf, scale: f64) -> Result<CodedPsf> {
    check_scale(scale)?;
    // Scale one is the identity; return the input bit for bit so round trips
    // through a rescale stage cannot drift.
    if scale == 1.0 {
        return Ok(psf.clone());
    }
    let k_out = scaled_support(psf.size(), scale);
    let center = (k_out - 1) / 2;
    let mut out: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((k_out, k_out)));
    for c in 0..3 {
        let (raw, _) = resample_channel(psf.kernel(c), scale);
        let sum: f64 = raw.iter().sum();
        if sum <= 1e-12 {
            out[c][[center, center]] = 1.0;
        } else {
            out[c] = raw.mapv(|v| v / sum);
        }
    }
    CodedPsf::from_normalized(out, psf.pixel_pitch, psf.reference_depth)
}

/// Derivative of the normalized rescaled kernel with respect to the scale,
/// one grid per channel on the same support as [`rescale_psf`] at that scale.
/// Zero where the delta fallback is active. Valid away from the bilinear-grid
/// knots and the support-rounding boundaries, where the map is differentiable.
pub fn rescale_psf_dscale(psf: &CodedPsf, scale: f64) -> Result<[Array2<f64>; 3]> {
    check_scale(scale)?;
    let k_out = scaled_support(psf.size(), scale);
    let mut out: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((k_out, k_out)));
    for c in 0..3 {
        let (raw, draw) = resample_channel(psf.kernel(c), scale);
        let sum: f64 = raw.iter().sum();
        if sum <= 1e-12 {
            continue; // delta fallback: locally constant in scale
        }
        let dsum: f64 = draw.iter().sum();
        let inv = 1.0 / sum;
        // d/ds (raw / sum) = draw / sum - raw * dsum / sum^2
        out[c] = &draw * inv - &(&raw * (dsum * inv * inv));
    }
    Ok(out)
}

/// A depth-specific kernel ready for rendering: per-channel weights plus,
/// optionally, their derivative with respect to depth (scale derivative chained
/// through the thin-lens map, including the near-side flip if enabled).
#[derive(Debug, Clone)]
pub struct DepthKernel {
    pub radius: usize,
    pub weights: [Array2<f64>; 3],
    pub dweights_ddepth: Option<[Array2<f64>; 3]>,
}

fn rotate180(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]])
}

/// Build the rendering kernel for one depth.
pub fn kernel_for_depth(
    psf: &CodedPsf,
    camera: &CameraParams,
    depth: f64,
    with_derivative: bool,
) -> Result<DepthKernel> {
    let (scale, dscale) =
        depth_to_scale_with_derivative(camera, psf.reference_depth, depth)?;
    let scaled = rescale_psf(psf, scale)?;
    let radius = scaled.radius();
    let flip = camera.flip_near_side && depth < camera.focus_distance;
    let weights: [Array2<f64>; 3] = if flip {
        std::array::from_fn(|c| rotate180(scaled.kernel(c)))
    } else {
        scaled.kernels().clone()
    };
    let dweights_ddepth = if with_derivative {
        let ds = rescale_psf_dscale(psf, scale)?;
        Some(std::array::from_fn(|c| {
            let g = if flip { rotate180(&ds[c]) } else { ds[c].clone() };
            g * dscale
        }))
    } else {
        None
    };
    Ok(DepthKernel {
        radius,
        weights,
        dweights_ddepth,
    })
}

/// Largest kernel radius that can occur over the camera's depth range.
/// The scale map is monotone on each side of the focus plane, so endpoints
/// carry the maximum.
pub fn max_kernel_radius(psf: &CodedPsf, camera: &CameraParams) -> Result<usize> {
    let s_lo = depth_to_scale(camera, psf.reference_depth, camera.depth_range.min)?;
    let s_hi = depth_to_scale(camera, psf.reference_depth, camera.depth_range.max)?;
    let k_out = scaled_support(psf.size(), s_lo.max(s_hi));
    Ok((k_out - 1) / 2)
}

/// Precomputed kernels at a fixed set of depths, for the sweep baseline.
#[derive(Debug, Clone)]
pub struct PsfBank {
    pub depths: Vec<f64>,
    pub scales: Vec<f64>,
    pub psfs: Vec<CodedPsf>,
}

/// Bank over uniformly spaced depths across the camera's range. Scales must
/// come out strictly increasing, which holds whenever the range lies on one
/// side of the focus plane.
pub fn build_psf_bank(psf: &CodedPsf, camera: &CameraParams, n_depths: usize) -> Result<PsfBank> {
    if n_depths < 2 {
        return Err(CoreError::invalid("a PSF bank needs at least two depths"));
    }
    camera.validate()?;
    let lo = camera.depth_range.min;
    let hi = camera.depth_range.max;
    let mut depths = Vec::with_capacity(n_depths);
    let mut scales = Vec::with_capacity(n_depths);
    let mut psfs = Vec::with_capacity(n_depths);
    for i in 0..n_depths {
        let d = lo + (hi - lo) * i as f64 / (n_depths - 1) as f64;
        let s = depth_to_scale(camera, psf.reference_depth, d)?;
        depths.push(d);
        scales.push(s);
        psfs.push(rescale_psf(psf, s)?);
    }
    for w in scales.windows(2) {
        if w[1] <= w[0] {
            return Err(CoreError::invalid(
                "bank scales are not strictly increasing; the depth range must \
                 lie on one side of the focus plane",
            ));
        }
    }
    Ok(PsfBank {
        depths,
        scales,
        psfs,
    })
}

/// Recover the reference PSF from a pinhole exposure: subtract the background
/// frame, locate the intensity centroid, and crop a k x k window around it.
pub fn calibrate_reference_psf(
    pinhole: &ImageGrid,
    background: &ImageGrid,
    k: usize,
    pixel_pitch: f64,
    reference_depth: f64,
) -> Result<CodedPsf> {
    if pinhole.dim() != background.dim() {
        return Err(CoreError::shape(format!(
            "pinhole {:?} vs background {:?}",
            pinhole.dim(),
            background.dim()
        )));
    }
    let (h, w, c) = pinhole.dim();
    if c != 3 {
        return Err(CoreError::shape(format!("expected 3 channels, got {c}")));
    }
    if k % 2 == 0 || k == 0 {
        return Err(CoreError::invalid(format!("crop size k = {k} must be odd")));
    }
    let diff = |i: usize, j: usize, ch: usize| -> f64 {
        (pinhole[[i, j, ch]] - background[[i, j, ch]]).max(0.0)
    };
    let mut peak = 0.0_f64;
    for i in 0..h {
        for j in 0..w {
            let s = diff(i, j, 0) + diff(i, j, 1) + diff(i, j, 2);
            peak = peak.max(s);
        }
    }
    if peak <= 1e-9 {
        return Err(CoreError::Calibration(
            "no intensity peak above the background".to_string(),
        ));
    }
    // Centroid over pixels carrying at least 10% of the peak keeps stray
    // background residue from dragging the estimate.
    let floor = 0.1 * peak;
    let (mut wi, mut wj, mut wsum) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let s = diff(i, j, 0) + diff(i, j, 1) + diff(i, j, 2);
            if s >= floor {
                wi += s * i as f64;
                wj += s * j as f64;
                wsum += s;
            }
        }
    }
    let ci = (wi / wsum).round() as i64;
    let cj = (wj / wsum).round() as i64;
    let r = ((k - 1) / 2) as i64;
    if ci - r < 0 || cj - r < 0 || ci + r >= h as i64 || cj + r >= w as i64 {
        return Err(CoreError::Calibration(format!(
            "peak at ({ci}, {cj}) leaves no room for a {k}x{k} crop in a {h}x{w} frame"
        )));
    }
    let kernels: [Array2<f64>; 3] = std::array::from_fn(|ch| {
        Array2::from_shape_fn((k, k), |(i, j)| {
            diff((ci - r) as usize + i, (cj - r) as usize + j, ch)
        })
    });
    CodedPsf::from_raw(kernels, pixel_pitch, reference_depth)
}

/// Deterministic synthetic coded aperture: a seeded binary cell mask under a
/// smooth radial window, identical across channels. Useful as a default PSF
/// for simulations and tests when no calibrated container is supplied.
pub fn synthetic_coded_psf(
    k: usize,
    seed: u64,
    pixel_pitch: f64,
    reference_depth: f64,
) -> Result<CodedPsf> {
    if k % 2 == 0 || k < 3 {
        return Err(CoreError::invalid(format!(
            "synthetic PSF size k = {k} must be odd and at least 3"
        )));
    }
    use rand::RngCore;
    let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Misc);
    let cells = k.div_ceil(2);
    let mut mask = Array2::zeros((cells, cells));
    for v in mask.iter_mut() {
        *v = if rng.next_u64() % 2 == 0 { 0.0 } else { 1.0 };
    }
    mask[[cells / 2, cells / 2]] = 1.0;
    let r = (k - 1) as f64 / 2.0;
    let kern = Array2::from_shape_fn((k, k), |(i, j)| {
        let ci = i * cells / k;
        let cj = j * cells / k;
        let di = (i as f64 - r) / (r + 0.5);
        let dj = (j as f64 - r) / (r + 0.5);
        let rad2 = di * di + dj * dj;
        let window = (1.0 - rad2).max(0.0);
        mask[[ci, cj]] * window
    });
    CodedPsf::from_raw(
        [kern.clone(), kern.clone(), kern],
        pixel_pitch,
        reference_depth,
    )
}
