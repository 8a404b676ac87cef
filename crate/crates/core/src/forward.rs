//! Depth-dependent image formation and its adjoint.
//!
//! Scatter semantics: every scene point spreads its radiance with the kernel
//! of its own depth, so for output pixel p and channel c
//!
//! ```text
//! out(p, c) = sum_q K_{depth(q)}(p - q) rgb(q, c)
//! ```
//!
//! with q running over the image extended by a reflected halo (reflect-101,
//! edge not repeated). On a constant-depth scene this reduces to an ordinary
//! reflect-padded convolution. The adjoint accumulates cotangents back onto
//! the halo's source pixels, and the depth gradient chains the kernel's scale
//! derivative through the thin-lens map.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rand::RngCore;

use crate::error::CoreError;
use crate::optics::{kernel_for_depth, max_kernel_radius, CameraParams, CodedPsf, DepthKernel};
use crate::rng::standard_normal;
use crate::state::{DepthGrid, ImageGrid, RgbdState, StateGrid, DEPTH_CHANNEL};
use crate::Result;

/// A coded-defocus measurement: the blurred image plus everything needed to
/// reproduce the imaging operator.
#[derive(Debug, Clone)]
pub struct Observation {
    pub image: ImageGrid,
    pub noise_sigma: f64,
    pub camera: CameraParams,
    pub psf: CodedPsf,
}

/// Reflect-101 index fold: ..2 1 0 | 0 1 2 .. n-1 | n-2 n-3..
fn reflect101(i: i64, n: i64) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let m = ((i % p) + p) % p;
    (if m < n { m } else { p - m }) as usize
}

/// Reusable rendering state for one (camera, PSF) pair: the halo margin and a
/// per-call cache of depth-specific kernels. The cache is cleared at each
/// entry point, so memory stays bounded while piecewise-constant depth maps
/// still hit it heavily within a call.
pub struct RenderWorkspace {
    camera: CameraParams,
    psf: CodedPsf,
    margin: usize,
    kernels: HashMap<u64, DepthKernel>,
}

impl RenderWorkspace {
    pub fn new(camera: CameraParams, psf: CodedPsf) -> Result<Self> {
        camera.validate()?;
        psf.validate()?;
        let margin = max_kernel_radius(&psf, &camera)?;
        Ok(RenderWorkspace {
            camera,
            psf,
            margin,
            kernels: HashMap::new(),
        })
    }

    pub fn camera(&self) -> &CameraParams {
        &self.camera
    }

    pub fn psf(&self) -> &CodedPsf {
        &self.psf
    }

    fn kernel(&mut self, depth: f64, with_derivative: bool) -> Result<&DepthKernel> {
        let bits = depth.to_bits();
        if !self.kernels.contains_key(&bits) {
            let k = kernel_for_depth(&self.psf, &self.camera, depth, with_derivative)?;
            self.kernels.insert(bits, k);
        }
        Ok(&self.kernels[&bits])
    }

    fn validate_scene(&self, x: &RgbdState) -> Result<()> {
        let (h, w) = x.depth.dim();
        if h == 0 || w == 0 {
            return Err(CoreError::shape("empty scene".to_string()));
        }
        let range = &self.camera.depth_range;
        for &d in x.depth.iter() {
            if !d.is_finite() || d < range.min - 1e-9 || d > range.max + 1e-9 {
                return Err(CoreError::invalid(format!(
                    "scene depth {d} outside the camera range [{}, {}]",
                    range.min, range.max
                )));
            }
        }
        Ok(())
    }

    /// Render the blurred RGB observation of a scene.
    pub fn render(&mut self, x: &RgbdState) -> Result<ImageGrid> {
        self.validate_scene(x)?;
        self.kernels.clear();
        let (h, w) = x.depth.dim();
        let (hi, wi) = (h as i64, w as i64);
        let m = self.margin as i64;
        let mut out = Array3::zeros((h, w, 3));
        for ei in -m..hi + m {
            for ej in -m..wi + m {
                let si = reflect101(ei, hi);
                let sj = reflect101(ej, wi);
                let kern = self.kernel(x.depth[[si, sj]], false)?;
                let r = kern.radius as i64;
                let (lo_i, hi_i) = ((ei - r).max(0), (ei + r).min(hi - 1));
                let (lo_j, hi_j) = ((ej - r).max(0), (ej + r).min(wi - 1));
                if lo_i > hi_i || lo_j > hi_j {
                    continue;
                }
                let rgb = [
                    x.rgb[[si, sj, 0]],
                    x.rgb[[si, sj, 1]],
                    x.rgb[[si, sj, 2]],
                ];
                for oi in lo_i..=hi_i {
                    let ki = (oi - ei + r) as usize;
                    for oj in lo_j..=hi_j {
                        let kj = (oj - ej + r) as usize;
                        for c in 0..3 {
                            out[[oi as usize, oj as usize, c]] +=
                                kern.weights[c][[ki, kj]] * rgb[c];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of [`RenderWorkspace::render`]: pull an
    /// observation-space cotangent back to (rgb, depth) gradients.
    pub fn render_vjp(
        &mut self,
        x: &RgbdState,
        cotangent: &ImageGrid,
    ) -> Result<(ImageGrid, DepthGrid)> {
        self.validate_scene(x)?;
        let (h, w) = x.depth.dim();
        if cotangent.dim() != (h, w, 3) {
            return Err(CoreError::shape(format!(
                "cotangent {:?} does not match observation ({h}, {w}, 3)",
                cotangent.dim()
            )));
        }
        self.kernels.clear();
        let (hi, wi) = (h as i64, w as i64);
        let m = self.margin as i64;
        let mut grad_rgb = Array3::zeros((h, w, 3));
        let mut grad_depth = Array2::zeros((h, w));
        for ei in -m..hi + m {
            for ej in -m..wi + m {
                let si = reflect101(ei, hi);
                let sj = reflect101(ej, wi);
                let kern = self.kernel(x.depth[[si, sj]], true)?;
                let r = kern.radius as i64;
                let (lo_i, hi_i) = ((ei - r).max(0), (ei + r).min(hi - 1));
                let (lo_j, hi_j) = ((ej - r).max(0), (ej + r).min(wi - 1));
                if lo_i > hi_i || lo_j > hi_j {
                    continue;
                }
                let dk = kern.dweights_ddepth.as_ref().expect("kernel built with derivative");
                let rgb = [
                    x.rgb[[si, sj, 0]],
                    x.rgb[[si, sj, 1]],
                    x.rgb[[si, sj, 2]],
                ];
                let mut acc_rgb = [0.0; 3];
                let mut acc_depth = 0.0;
                for oi in lo_i..=hi_i {
                    let ki = (oi - ei + r) as usize;
                    for oj in lo_j..=hi_j {
                        let kj = (oj - ej + r) as usize;
                        for c in 0..3 {
                            let ct = cotangent[[oi as usize, oj as usize, c]];
                            acc_rgb[c] += ct * kern.weights[c][[ki, kj]];
                            acc_depth += ct * dk[c][[ki, kj]] * rgb[c];
                        }
                    }
                }
                for c in 0..3 {
                    grad_rgb[[si, sj, c]] += acc_rgb[c];
                }
                grad_depth[[si, sj]] += acc_depth;
            }
        }
        Ok((grad_rgb, grad_depth))
    }

    /// Fused residual evaluation: squared-residual fidelity, its gradient in
    /// normalized state coordinates, and the rendered image.
    pub fn fidelity_and_grad(
        &mut self,
        x: &RgbdState,
        y_image: &ImageGrid,
    ) -> Result<(f64, StateGrid, ImageGrid)> {
        let rendered = self.render(x)?;
        if rendered.dim() != y_image.dim() {
            return Err(CoreError::shape(format!(
                "observation {:?} does not match rendered {:?}",
                y_image.dim(),
                rendered.dim()
            )));
        }
        let resid = &rendered - y_image;
        let fid: f64 = resid.iter().map(|v| v * v).sum();
        let cot = &resid * 2.0;
        let (g_rgb, g_depth) = self.render_vjp(x, &cot)?;
        let (h, w) = x.depth.dim();
        let mut grad = Array3::zeros((h, w, 4));
        // rgb = (z + 1)/2 and depth = min + (z + 1)/2 span, so the pullback is
        // a channelwise constant.
        let half_span = self.camera.depth_range.span() / 2.0;
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    grad[[i, j, c]] = 0.5 * g_rgb[[i, j, c]];
                }
                grad[[i, j, DEPTH_CHANNEL]] = half_span * g_depth[[i, j]];
            }
        }
        Ok((fid, grad, rendered))
    }
}

/// One-shot render with a fresh workspace.
pub fn render(x: &RgbdState, camera: &CameraParams, psf: &CodedPsf) -> Result<ImageGrid> {
    RenderWorkspace::new(*camera, psf.clone())?.render(x)
}

/// One-shot VJP with a fresh workspace.
pub fn render_vjp(
    x: &RgbdState,
    camera: &CameraParams,
    psf: &CodedPsf,
    cotangent: &ImageGrid,
) -> Result<(ImageGrid, DepthGrid)> {
    RenderWorkspace::new(*camera, psf.clone())?.render_vjp(x, cotangent)
}

/// Squared residual norm between the scene's rendering and the observation.
pub fn data_fidelity(x: &RgbdState, y: &Observation) -> Result<f64> {
    let rendered = render(x, &y.camera, &y.psf)?;
    if rendered.dim() != y.image.dim() {
        return Err(CoreError::shape(format!(
            "observation {:?} does not match rendered {:?}",
            y.image.dim(),
            rendered.dim()
        )));
    }
    Ok((&rendered - &y.image).iter().map(|v| v * v).sum())
}

/// Gradient of [`data_fidelity`] with respect to the normalized 4-channel
/// state coordinates (affine pullback through the encoding; assumes the state
/// is inside the valid ranges, where decode is locally the affine inverse).
pub fn data_fidelity_grad(x: &RgbdState, y: &Observation) -> Result<StateGrid> {
    let mut ws = RenderWorkspace::new(y.camera, y.psf.clone())?;
    let (_, grad, _) = ws.fidelity_and_grad(x, &y.image)?;
    Ok(grad)
}

/// Add iid Gaussian noise to a clean observation.
pub fn add_observation_noise(
    clean: &ImageGrid,
    sigma: f64,
    rng: &mut impl RngCore,
) -> Result<ImageGrid> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CoreError::invalid(format!(
            "noise sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    let mut out = clean.clone();
    for v in out.iter_mut() {
        *v += sigma * standard_normal(rng);
    }
    Ok(out)
}

/// Render a scene and attach noise, bundling the operator description.
pub fn make_observation(
    x: &RgbdState,
    camera: &CameraParams,
    psf: &CodedPsf,
    sigma: f64,
    rng: &mut impl RngCore,
) -> Result<Observation> {
    let clean = render(x, camera, psf)?;
    let image = add_observation_noise(&clean, sigma, rng)?;
    Ok(Observation {
        image,
        noise_sigma: sigma,
        camera: *camera,
        psf: psf.clone(),
    })
}

/// Measurement operator on normalized diffusion states, as the guided
/// samplers see it. Implementations define the observation space; `fidelity`
/// is always the squared residual norm there.
pub trait MeasurementModel {
    /// Forward-map a normalized state into observation space.
    fn observe(&self, z: &StateGrid) -> Result<ImageGrid>;

    /// || y - f(z) ||^2.
    fn fidelity(&self, z: &StateGrid, y: &ImageGrid) -> Result<f64> {
        let rendered = self.observe(z)?;
        if rendered.dim() != y.dim() {
            return Err(CoreError::shape(format!(
                "observation {:?} does not match forward output {:?}",
                y.dim(),
                rendered.dim()
            )));
        }
        Ok((&rendered - y).iter().map(|v| v * v).sum())
    }

    /// Gradient of `fidelity` with respect to the normalized state.
    fn fidelity_grad(&self, z: &StateGrid, y: &ImageGrid) -> Result<StateGrid> {
        Ok(self.fidelity_and_grad(z, y)?.1)
    }

    /// Fidelity and gradient together (one forward pass where possible).
    fn fidelity_and_grad(&self, z: &StateGrid, y: &ImageGrid) -> Result<(f64, StateGrid)>;
}

/// The coded-defocus operator: decode to physical units, render, and pull the
/// gradient back through the clamped decoding (coordinates outside [-1, 1]
/// are clamped by decode, so their gradient is zero).
pub struct CodedDefocusModel {
    ws: RefCell<RenderWorkspace>,
}

impl CodedDefocusModel {
    pub fn new(camera: CameraParams, psf: CodedPsf) -> Result<Self> {
        Ok(CodedDefocusModel {
            ws: RefCell::new(RenderWorkspace::new(camera, psf)?),
        })
    }

    pub fn from_observation(y: &Observation) -> Result<Self> {
        Self::new(y.camera, y.psf.clone())
    }

    pub fn camera(&self) -> CameraParams {
        *self.ws.borrow().camera()
    }
}

impl MeasurementModel for CodedDefocusModel {
    fn observe(&self, z: &StateGrid) -> Result<ImageGrid> {
        let mut ws = self.ws.borrow_mut();
        let range = ws.camera().depth_range;
        let x = RgbdState::decode(z, &range)?;
        ws.render(&x)
    }

    fn fidelity_and_grad(&self, z: &StateGrid, y: &ImageGrid) -> Result<(f64, StateGrid)> {
        let mut ws = self.ws.borrow_mut();
        let range = ws.camera().depth_range;
        let x = RgbdState::decode(z, &range)?;
        let (fid, mut grad, _) = ws.fidelity_and_grad(&x, y)?;
        for (zv, gv) in z.iter().zip(grad.iter_mut()) {
            if *zv < -1.0 || *zv > 1.0 {
                *gv = 0.0;
            }
        }
        Ok((fid, grad))
    }
}

/// A fixed single-kernel periodic blur applied independently to every state
/// channel. Fully linear (no decode, no clamps), so exact posterior oracles
/// apply; used by the sampler correctness tests.
pub struct LinearBlurModel {
    kernel: Array2<f64>,
}

impl LinearBlurModel {
    pub fn new(kernel: Array2<f64>) -> Result<Self> {
        let (k, k2) = kernel.dim();
        if k != k2 || k % 2 == 0 {
            return Err(CoreError::invalid(format!(
                "blur kernel must be odd and square, got {k}x{k2}"
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("blur kernel has non-finite weights"));
        }
        Ok(LinearBlurModel { kernel })
    }

    fn conv(&self, z: &StateGrid, transpose: bool) -> StateGrid {
        let (h, w, ch) = z.dim();
        let k = self.kernel.dim().0;
        let r = ((k - 1) / 2) as i64;
        let mut out = Array3::zeros((h, w, ch));
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                for oi in -r..=r {
                    for oj in -r..=r {
                        let wgt = self.kernel[[(oi + r) as usize, (oj + r) as usize]];
                        // Convolution reads source p - o; the adjoint of a
                        // periodic convolution is correlation, source p + o.
                        let (si, sj) = if transpose {
                            (i + oi, j + oj)
                        } else {
                            (i - oi, j - oj)
                        };
                        let si = si.rem_euclid(h as i64) as usize;
                        let sj = sj.rem_euclid(w as i64) as usize;
                        for c in 0..ch {
                            out[[i as usize, j as usize, c]] += wgt * z[[si, sj, c]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Dense matrix of the single-channel periodic operator on an h x w grid,
    /// row-major vectorization. For cross-checks against direct solves.
    pub fn dense_matrix(&self, h: usize, w: usize) -> Array2<f64> {
        let n = h * w;
        let k = self.kernel.dim().0;
        let r = ((k - 1) / 2) as i64;
        let mut a = Array2::zeros((n, n));
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let row = (i as usize) * w + j as usize;
                for oi in -r..=r {
                    for oj in -r..=r {
                        let wgt = self.kernel[[(oi + r) as usize, (oj + r) as usize]];
                        let si = (i - oi).rem_euclid(h as i64) as usize;
                        let sj = (j - oj).rem_euclid(w as i64) as usize;
                        a[[row, si * w + sj]] += wgt;
                    }
                }
            }
        }
        a
    }
}

impl MeasurementModel for LinearBlurModel {
    fn observe(&self, z: &StateGrid) -> Result<ImageGrid> {
        Ok(self.conv(z, false))
    }

    fn fidelity_and_grad(&self, z: &StateGrid, y: &ImageGrid) -> Result<(f64, StateGrid)> {
        let rendered = self.conv(z, false);
        if rendered.dim() != y.dim() {
            return Err(CoreError::shape(format!(
                "observation {:?} does not match forward output {:?}",
                y.dim(),
                rendered.dim()
            )));
        }
        let resid = &rendered - y;
        let fid = resid.iter().map(|v| v * v).sum();
        Ok((fid, self.conv(&(&resid * 2.0), true)))
    }
}
