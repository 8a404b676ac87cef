//! Classical depth-sweep baseline: per-depth regularized deconvolution with
//! first- and second-derivative penalties, then per-pixel depth selection by
//! windowed re-rendering residual.
//!
//! Each candidate depth assumes one shift-invariant kernel over the whole
//! frame, so the quadratic objective
//!
//!   min_x ||y - k (*) x||^2 + l1 ||grad x||^2 + l2 ||lap x||^2
//!
//! has a frequency-domain closed form under periodic boundaries. The coded
//! aperture is what makes the sweep informative: deconvolving with the wrong
//! depth's kernel cannot reproduce the spectral zeros the true kernel stamped
//! on the data, and the re-rendering residual keeps that energy.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::CoreError;
use crate::forward::Observation;
use crate::optics::{CameraParams, CodedPsf, PsfBank};
use crate::state::{ImageGrid, RgbdState};
use crate::Result;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Weight on the first-derivative norm.
    pub lambda1: f64,
    /// Weight on the second-derivative (Laplacian) norm.
    pub lambda2: f64,
    /// Odd patch size for the local residual comparison.
    pub window: usize,
    /// Bank resolution used when the caller builds the candidate depths.
    pub n_depths: usize,
    /// Residual contrast between best and second-best depth below which a
    /// pixel's depth choice is flagged unreliable.
    pub min_contrast: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lambda1: 5e-3,
            lambda2: 5e-3,
            window: 13,
            n_depths: 8,
            min_contrast: 0.01,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(CoreError::invalid(format!(
                "window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if self.n_depths < 2 {
            return Err(CoreError::invalid("need at least two candidate depths"));
        }
        if !(self.min_contrast.is_finite() && self.min_contrast >= 0.0) {
            return Err(CoreError::invalid(format!(
                "min_contrast must be finite and nonnegative, got {}",
                self.min_contrast
            )));
        }
        Ok(())
    }
}

/// Sweep output: the composited scene plus per-pixel bookkeeping.
#[derive(Debug, Clone)]
pub struct SweepReconstruction {
    pub state: RgbdState,
    /// Winning bank index per pixel.
    pub depth_index: Array2<usize>,
    /// True where the residual contrast was too weak to trust the depth
    /// choice (textureless regions).
    pub low_confidence: Array2<bool>,
}

/// In-place 2D FFT, rows then columns. `inverse` includes the 1/(h w) scale.
pub(crate) fn fft2(a: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = a.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in a.rows_mut() {
        let s = row.as_slice_mut().expect("row-major layout");
        row_fft.process(s);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut scratch = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            scratch[i] = a[[i, j]];
        }
        col_fft.process(&mut scratch);
        for i in 0..h {
            a[[i, j]] = scratch[i];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        a.mapv_inplace(|v| v * scale);
    }
}

/// Transfer function of periodic convolution with a centered odd kernel.
/// Taps wrap (and add) when the kernel exceeds the frame.
fn kernel_spectrum(kern: &Array2<f64>, h: usize, w: usize) -> Array2<Complex<f64>> {
    let (kh, kw) = kern.dim();
    let (rh, rw) = (kh as i64 / 2, kw as i64 / 2);
    let mut pad = Array2::from_elem((h, w), Complex::new(0.0, 0.0));
    for u in 0..kh {
        for v in 0..kw {
            let i = (u as i64 - rh).rem_euclid(h as i64) as usize;
            let j = (v as i64 - rw).rem_euclid(w as i64) as usize;
            pad[[i, j]] += Complex::new(kern[[u, v]], 0.0);
        }
    }
    fft2(&mut pad, false);
    pad
}

/// lambda1 |D|^2 + lambda2 |L|^2 per frequency bin, for unit-spaced periodic
/// first differences and the 5-point Laplacian.
fn penalty_spectrum(h: usize, w: usize, lambda1: f64, lambda2: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| {
        let fi = std::f64::consts::PI * i as f64 / h as f64;
        let fj = std::f64::consts::PI * j as f64 / w as f64;
        let d2 = 4.0 * (fi.sin().powi(2) + fj.sin().powi(2));
        let lap = 2.0 * (2.0 * fi).cos() + 2.0 * (2.0 * fj).cos() - 4.0;
        lambda1 * d2 + lambda2 * lap * lap
    })
}

const DENOM_FLOOR: f64 = 1e-12;

/// Closed-form Wiener-style solve for all three channels with per-channel
/// kernels, with the penalty spectrum scaled by `pen_scale`. The denominator
/// must stay away from zero in every bin; with both penalties at zero that
/// requires a kernel spectrum without near-zeros.
fn deconvolve_scaled(
    image: &ImageGrid,
    kernels: &[Array2<f64>; 3],
    lambda1: f64,
    lambda2: f64,
    pen_scale: f64,
) -> Result<ImageGrid> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(CoreError::shape(format!(
            "expected a 3-channel image, got {c} channels"
        )));
    }
    let pen = penalty_spectrum(h, w, lambda1, lambda2);
    let mut out = Array3::zeros((h, w, 3));
    for ch in 0..3 {
        let k_hat = kernel_spectrum(&kernels[ch], h, w);
        let mut y_hat = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex::new(image[[i, j, ch]], 0.0)
        });
        fft2(&mut y_hat, false);
        for i in 0..h {
            for j in 0..w {
                let k = k_hat[[i, j]];
                let denom = k.norm_sqr() + pen_scale * pen[[i, j]];
                if denom < DENOM_FLOOR {
                    return Err(CoreError::numerical(format!(
                        "ill-conditioned deconvolution: kernel spectrum near \
                         zero at bin ({i}, {j}) of channel {ch} with no \
                         regularization to cover it"
                    )));
                }
                y_hat[[i, j]] = k.conj() * y_hat[[i, j]] / denom;
            }
        }
        fft2(&mut y_hat, true);
        for i in 0..h {
            for j in 0..w {
                out[[i, j, ch]] = y_hat[[i, j]].re;
            }
        }
    }
    Ok(out)
}

pub(crate) fn deconvolve_kernels(
    image: &ImageGrid,
    kernels: &[Array2<f64>; 3],
    lambda1: f64,
    lambda2: f64,
) -> Result<ImageGrid> {
    deconvolve_scaled(image, kernels, lambda1, lambda2, 1.0)
}

/// How much observation the regularized refit leaves unexplained, summed per
/// frequency bin over channels: sum of (P / (|K|^2 + P))^2 with P scaled by
/// `c`. Monotone increasing in `c`.
fn refit_slack(spectra: &[Array2<Complex<f64>>; 3], pen: &Array2<f64>, c: f64) -> f64 {
    let mut total = 0.0;
    for k_hat in spectra {
        for (k, p) in k_hat.iter().zip(pen.iter()) {
            let denom = k.norm_sqr() + c * p;
            total += if denom < DENOM_FLOOR {
                1.0
            } else {
                let r = c * p / denom;
                r * r
            };
        }
    }
    total
}

/// Scale factor on the penalty spectrum that gives these kernels the target
/// refit slack. Without this, a sharper kernel absorbs more of the data at
/// the same lambda and the residual comparison degenerates into "sharpest
/// wins"; equalizing slack makes the comparison sensitive to where each
/// kernel's spectral zeros sit instead of how many it has.
fn equalizing_pen_scale(
    spectra: &[Array2<Complex<f64>>; 3],
    pen: &Array2<f64>,
    target: f64,
) -> f64 {
    let (mut lo, mut hi) = (1e-9_f64, 1e9_f64);
    if refit_slack(spectra, pen, lo) >= target {
        return lo;
    }
    if refit_slack(spectra, pen, hi) <= target {
        return hi;
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if refit_slack(spectra, pen, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Deconvolve the observation assuming one candidate depth's kernel holds
/// everywhere. The kernel is used as stored; orientation fixes (near-side
/// flip) are the caller's business.
pub fn deconvolve_at_depth(
    y: &Observation,
    kernel: &CodedPsf,
    config: &BaselineConfig,
) -> Result<ImageGrid> {
    config.validate()?;
    deconvolve_kernels(&y.image, kernel.kernels(), config.lambda1, config.lambda2)
}

fn rotate180(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]])
}

/// Bank kernels as the renderer would apply them at this depth.
fn oriented_kernels(psf: &CodedPsf, camera: &CameraParams, depth: f64) -> [Array2<f64>; 3] {
    let flip = camera.flip_near_side && depth < camera.focus_distance;
    std::array::from_fn(|c| {
        if flip {
            rotate180(psf.kernel(c))
        } else {
            psf.kernel(c).clone()
        }
    })
}

/// Periodic box sum of half-width r, separable.
fn box_sum(e: &Array2<f64>, window: usize) -> Array2<f64> {
    let (h, w) = e.dim();
    let r = (window / 2) as i64;
    let mut rows = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                s += e[[i, (j as i64 + d).rem_euclid(w as i64) as usize]];
            }
            rows[[i, j]] = s;
        }
    }
    let mut out = Array2::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let mut s = 0.0;
            for d in -r..=r {
                s += rows[[(i as i64 + d).rem_euclid(h as i64) as usize, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Deconvolution plus re-render under the same kernels; returns the estimate
/// and the per-pixel squared re-rendering residual summed over channels.
fn deconvolve_and_residual(
    image: &ImageGrid,
    kernels: &[Array2<f64>; 3],
    lambda1: f64,
    lambda2: f64,
    pen_scale: f64,
) -> Result<(ImageGrid, Array2<f64>)> {
    let (h, w, _) = image.dim();
    let pen = penalty_spectrum(h, w, lambda1, lambda2);
    let mut x = Array3::zeros((h, w, 3));
    let mut resid = Array2::zeros((h, w));
    for ch in 0..3 {
        let k_hat = kernel_spectrum(&kernels[ch], h, w);
        let mut y_hat = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex::new(image[[i, j, ch]], 0.0)
        });
        fft2(&mut y_hat, false);
        let mut x_hat = Array2::from_elem((h, w), Complex::new(0.0, 0.0));
        for i in 0..h {
            for j in 0..w {
                let k = k_hat[[i, j]];
                let denom = k.norm_sqr() + pen_scale * pen[[i, j]];
                if denom < DENOM_FLOOR {
                    return Err(CoreError::numerical(format!(
                        "ill-conditioned deconvolution: kernel spectrum near \
                         zero at bin ({i}, {j}) of channel {ch} with no \
                         regularization to cover it"
                    )));
                }
                x_hat[[i, j]] = k.conj() * y_hat[[i, j]] / denom;
            }
        }
        let mut reblur = Array2::from_shape_fn((h, w), |(i, j)| k_hat[[i, j]] * x_hat[[i, j]]);
        fft2(&mut x_hat, true);
        fft2(&mut reblur, true);
        for i in 0..h {
            for j in 0..w {
                x[[i, j, ch]] = x_hat[[i, j]].re;
                let d = image[[i, j, ch]] - reblur[[i, j]].re;
                resid[[i, j]] += d * d;
            }
        }
    }
    Ok((x, resid))
}

/// For every candidate depth in the bank: deconvolve, re-render, and score
/// each pixel by the windowed re-rendering residual. Each pixel takes the
/// depth (and deconvolved color) of its best-scoring candidate; pixels whose
/// best and second-best scores are nearly tied get the low-confidence flag.
pub fn depth_sweep_reconstruct(
    y: &Observation,
    bank: &PsfBank,
    config: &BaselineConfig,
) -> Result<SweepReconstruction> {
    config.validate()?;
    if bank.depths.is_empty() {
        return Err(CoreError::invalid("empty PSF bank"));
    }
    if bank.depths.len() != bank.psfs.len() {
        return Err(CoreError::invalid("PSF bank depths and kernels disagree"));
    }
    let (h, w, _) = y.image.dim();
    let n = bank.depths.len();
    // A sharper kernel refits more of any observation at equal lambda, which
    // would bias every comparison toward the sharp end of the bank. Scale
    // each candidate's penalty so all of them leave the same refit slack;
    // the middle entry at scale 1 sets the target.
    let pen = penalty_spectrum(h, w, config.lambda1, config.lambda2);
    let all_kernels: Vec<[Array2<f64>; 3]> = (0..n)
        .map(|k| oriented_kernels(&bank.psfs[k], &y.camera, bank.depths[k]))
        .collect();
    let all_spectra: Vec<[Array2<Complex<f64>>; 3]> = all_kernels
        .iter()
        .map(|ks| std::array::from_fn(|c| kernel_spectrum(&ks[c], h, w)))
        .collect();
    let target = refit_slack(&all_spectra[n / 2], &pen, 1.0);
    let pen_scales: Vec<f64> = if target > 0.0 {
        all_spectra
            .iter()
            .map(|s| equalizing_pen_scale(s, &pen, target))
            .collect()
    } else {
        vec![1.0; n]
    };
    // Streamed argmin keeps memory flat in the bank size; winners are
    // re-deconvolved afterwards.
    let mut best = Array2::from_elem((h, w), f64::INFINITY);
    let mut second = Array2::from_elem((h, w), f64::INFINITY);
    let mut best_idx = Array2::from_elem((h, w), 0usize);
    for k in 0..n {
        let (_, resid) = deconvolve_and_residual(
            &y.image,
            &all_kernels[k],
            config.lambda1,
            config.lambda2,
            pen_scales[k],
        )?;
        let score = box_sum(&resid, config.window);
        for i in 0..h {
            for j in 0..w {
                let s = score[[i, j]];
                if s < best[[i, j]] {
                    second[[i, j]] = best[[i, j]];
                    best[[i, j]] = s;
                    best_idx[[i, j]] = k;
                } else if s < second[[i, j]] {
                    second[[i, j]] = s;
                }
            }
        }
    }
    let mut rgb = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut used: Vec<usize> = best_idx.iter().cloned().collect();
    used.sort_unstable();
    used.dedup();
    for &k in &used {
        let x = deconvolve_scaled(
            &y.image,
            &all_kernels[k],
            config.lambda1,
            config.lambda2,
            pen_scales[k],
        )?;
        for i in 0..h {
            for j in 0..w {
                if best_idx[[i, j]] == k {
                    for c in 0..3 {
                        rgb[[i, j, c]] = x[[i, j, c]].clamp(0.0, 1.0);
                    }
                    depth[[i, j]] = bank.depths[k];
                }
            }
        }
    }
    let mut low_confidence = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            let (e1, e2) = (best[[i, j]], second[[i, j]]);
            // Symmetric relative contrast in [0, 1]; a single-entry bank
            // leaves e2 infinite and therefore never flags.
            let contrast = if e2.is_finite() {
                (e2 - e1) / (e1 + e2).max(1e-300)
            } else {
                1.0
            };
            low_confidence[[i, j]] = contrast < config.min_contrast;
        }
    }
    Ok(SweepReconstruction {
        state: RgbdState::new(rgb, depth)?,
        depth_index: best_idx,
        low_confidence,
    })
}
