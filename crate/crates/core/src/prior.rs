//! Pluggable diffusion priors.
//!
//! Three implementations of the same interface: a closed-form Gaussian prior
//! and a Gaussian-mixture prior (analytic scores, used as exactness oracles
//! for the samplers), and a small trainable noise-prediction network. The
//! guided samplers additionally need the vector-Jacobian product of the
//! posterior-mean map x_t -> x0_hat(x_t), which each prior supplies either in
//! closed form or by reverse-mode differentiation.

use std::ops::Range;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng::{index_in, normal_grid3, seeded_step, standard_normal, Stream};
use crate::schedule::{eps_from_score, score_from_eps, NoiseSchedule};
use crate::state::StateGrid;
use crate::Result;

/// A diffusion prior usable by the reverse samplers. `t` is the 0-based
/// noise-table index, consistent with the schedule accessors.
pub trait ScoreModel {
    /// Predicted noise content of `x_t`.
    fn eps_predict(&self, x_t: &StateGrid, t: usize, schedule: &NoiseSchedule)
        -> Result<StateGrid>;

    /// Marginal score at noise level `t`; tied to `eps_predict` by
    /// s = -eps / sqrt(1 - alpha_bar_t).
    fn score(&self, x_t: &StateGrid, t: usize, schedule: &NoiseSchedule) -> Result<StateGrid> {
        let eps = self.eps_predict(x_t, t, schedule)?;
        Ok(score_from_eps(&eps, t, schedule))
    }

    /// VJP of the posterior-mean map: cotangent^T d x0_hat(x_t) / d x_t.
    fn tweedie_vjp(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cotangent: &StateGrid,
    ) -> Result<StateGrid>;
}

fn check_t(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    if t >= schedule.len() {
        return Err(CoreError::invalid(format!(
            "noise index {t} out of range for a {}-step schedule",
            schedule.len()
        )));
    }
    Ok(schedule.alpha_bar(t))
}

fn check_shapes(a: &StateGrid, b: &StateGrid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CoreError::shape(format!(
            "grid {:?} vs grid {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Coordinatewise Gaussian prior N(mean, diag(var)).
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: StateGrid,
    pub var: StateGrid,
}

impl GaussianPrior {
    pub fn new(mean: StateGrid, var: StateGrid) -> Result<Self> {
        if mean.dim() != var.dim() {
            return Err(CoreError::shape(format!(
                "mean {:?} vs var {:?}",
                mean.dim(),
                var.dim()
            )));
        }
        if var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CoreError::invalid("prior variances must be positive"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("prior mean must be finite"));
        }
        Ok(GaussianPrior { mean, var })
    }

    pub fn isotropic(shape: (usize, usize, usize), mean: f64, var: f64) -> Result<Self> {
        Self::new(
            Array3::from_elem(shape, mean),
            Array3::from_elem(shape, var),
        )
    }

}

/// Score of the diffused Gaussian prior at noise index `t`:
/// -(x_t - sqrt(alpha_bar) mean) / (alpha_bar var0 + 1 - alpha_bar).
pub fn gaussian_score(
    prior: &GaussianPrior,
    x_t: &StateGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<StateGrid> {
    let bar = check_t(t, schedule)?;
    check_shapes(x_t, &prior.mean)?;
    let root = bar.sqrt();
    let mut out = x_t.clone();
    for ((o, m), v) in out.iter_mut().zip(prior.mean.iter()).zip(prior.var.iter()) {
        *o = -(*o - root * m) / (bar * v + (1.0 - bar));
    }
    Ok(out)
}

impl ScoreModel for GaussianPrior {
    fn eps_predict(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<StateGrid> {
        let s = gaussian_score(self, x_t, t, schedule)?;
        Ok(eps_from_score(&s, t, schedule))
    }

    fn score(&self, x_t: &StateGrid, t: usize, schedule: &NoiseSchedule) -> Result<StateGrid> {
        gaussian_score(self, x_t, t, schedule)
    }

    fn tweedie_vjp(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cotangent: &StateGrid,
    ) -> Result<StateGrid> {
        let bar = check_t(t, schedule)?;
        check_shapes(x_t, &self.mean)?;
        check_shapes(cotangent, &self.mean)?;
        // x0_hat is affine in x_t with slope sqrt(bar) var0 / marginal var.
        let root = bar.sqrt();
        let mut out = cotangent.clone();
        for (o, v) in out.iter_mut().zip(self.var.iter()) {
            *o *= root * v / (bar * v + (1.0 - bar));
        }
        Ok(out)
    }
}

/// Isotropic Gaussian mixture: weights w_k, means mu_k, shared-shape grids,
/// scalar variance per component.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<StateGrid>,
    vars: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<StateGrid>, vars: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(CoreError::invalid(
                "mixture needs matching, nonempty weights/means/vars",
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(CoreError::invalid("mixture weights must be positive"));
        }
        if vars.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CoreError::invalid("mixture variances must be positive"));
        }
        let shape = means[0].dim();
        if means.iter().any(|m| m.dim() != shape) {
            return Err(CoreError::shape("mixture means must share one shape"));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(GmmPrior {
            weights,
            means,
            vars,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self) -> &[StateGrid] {
        &self.means
    }

    /// Posterior component responsibilities at x_t plus each component's
    /// score, with the log-sum-exp shift for stability.
    fn responsibilities(
        &self,
        x_t: &StateGrid,
        alpha_bar: f64,
    ) -> (Vec<f64>, Vec<StateGrid>, Vec<f64>) {
        let root = alpha_bar.sqrt();
        let k = self.weights.len();
        let dim = x_t.len() as f64;
        let mut log_post = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        let mut marg_vars = Vec::with_capacity(k);
        for ki in 0..k {
            let v = alpha_bar * self.vars[ki] + (1.0 - alpha_bar);
            let mut sq = 0.0;
            let mut s = x_t.clone();
            for (sv, m) in s.iter_mut().zip(self.means[ki].iter()) {
                let d = *sv - root * m;
                sq += d * d;
                *sv = -d / v;
            }
            log_post.push(self.weights[ki].ln() - 0.5 * sq / v - 0.5 * dim * v.ln());
            scores.push(s);
            marg_vars.push(v);
        }
        let peak = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = log_post.iter().map(|l| (l - peak).exp()).collect();
        let z: f64 = resp.iter().sum();
        for r in resp.iter_mut() {
            *r /= z;
        }
        (resp, scores, marg_vars)
    }
}

/// Score of the diffused mixture: responsibility-weighted component scores.
pub fn gmm_score(
    prior: &GmmPrior,
    x_t: &StateGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<StateGrid> {
    let bar = check_t(t, schedule)?;
    check_shapes(x_t, &prior.means[0])?;
    let (resp, scores, _) = prior.responsibilities(x_t, bar);
    let mut out = Array3::zeros(x_t.dim());
    for (r, s) in resp.iter().zip(scores.iter()) {
        out.scaled_add(*r, s);
    }
    Ok(out)
}

impl ScoreModel for GmmPrior {
    fn eps_predict(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<StateGrid> {
        let s = gmm_score(self, x_t, t, schedule)?;
        Ok(eps_from_score(&s, t, schedule))
    }

    fn score(&self, x_t: &StateGrid, t: usize, schedule: &NoiseSchedule) -> Result<StateGrid> {
        gmm_score(self, x_t, t, schedule)
    }

    fn tweedie_vjp(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cotangent: &StateGrid,
    ) -> Result<StateGrid> {
        let bar = check_t(t, schedule)?;
        check_shapes(x_t, &self.means[0])?;
        check_shapes(cotangent, &self.means[0])?;
        let (resp, scores, marg_vars) = self.responsibilities(x_t, bar);
        // The score Jacobian contracts against c as
        //   sum_k r_k s_k <s_k, c> - s <s, c> - (sum_k r_k / v_k) c
        // which follows from d r_k = r_k (s_k - s) and d s_k = -I / v_k.
        let mut s_mix: StateGrid = Array3::zeros(x_t.dim());
        for (r, s) in resp.iter().zip(scores.iter()) {
            s_mix.scaled_add(*r, s);
        }
        let dot = |a: &StateGrid, b: &StateGrid| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        let mut jc: StateGrid = Array3::zeros(x_t.dim());
        for ki in 0..resp.len() {
            jc.scaled_add(resp[ki] * dot(&scores[ki], cotangent), &scores[ki]);
        }
        jc.scaled_add(-dot(&s_mix, cotangent), &s_mix);
        let iso: f64 = resp
            .iter()
            .zip(marg_vars.iter())
            .map(|(r, v)| r / v)
            .sum();
        jc.scaled_add(-iso, cotangent);
        // x0_hat = (x + (1 - bar) s) / sqrt(bar).
        let root = bar.sqrt();
        let mut out = cotangent.clone();
        out.scaled_add(1.0 - bar, &jc);
        out.mapv_inplace(|v| v / root);
        Ok(out)
    }
}

pub(crate) fn cholesky_factor(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(CoreError::numerical(format!(
                        "matrix not positive definite at pivot {i} ({acc})"
                    )));
                }
                l[[i, i]] = acc.sqrt();
            } else {
                l[[i, j]] = acc / l[[j, j]];
            }
        }
    }
    Ok(l)
}

pub(crate) fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut acc = y[i];
        for k in 0..i {
            acc -= l[[i, k]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in i + 1..n {
            acc -= l[[k, i]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    y
}

/// Exact posterior for x ~ N(mean, diag(var)), y = A x + N(0, noise_var I).
/// Returns the posterior mean and full covariance over the flattened state
/// (ndarray iteration order). Cubic in the state dimension; an oracle for
/// small problems, not a reconstruction path.
pub fn gaussian_posterior_oracle(
    prior: &GaussianPrior,
    a: &Array2<f64>,
    y: &Array1<f64>,
    noise_var: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = prior.mean.len();
    if a.ncols() != n || a.nrows() != y.len() {
        return Err(CoreError::shape(format!(
            "operator {}x{} vs state dim {n} and observation dim {}",
            a.nrows(),
            a.ncols(),
            y.len()
        )));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(CoreError::invalid(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let mu: Array1<f64> = prior.mean.iter().cloned().collect();
    let var: Array1<f64> = prior.var.iter().cloned().collect();
    // Precision form: Lambda = A^T A / s2 + diag(1/var), rhs = A^T y / s2 + mu/var.
    let mut lambda = a.t().dot(a) / noise_var;
    for i in 0..n {
        lambda[[i, i]] += 1.0 / var[i];
    }
    let mut rhs = a.t().dot(y) / noise_var;
    for i in 0..n {
        rhs[i] += mu[i] / var[i];
    }
    let l = cholesky_factor(&lambda)?;
    let mean = cholesky_solve(&l, &rhs);
    let mut cov = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for i in 0..n {
        e.fill(0.0);
        e[i] = 1.0;
        let col = cholesky_solve(&l, &e);
        for j in 0..n {
            cov[[j, i]] = col[j];
        }
    }
    Ok((mean, cov))
}

/// Shape of the noise-prediction network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Hidden channel count of the two inner convolutions.
    pub hidden: usize,
    /// Sinusoidal time-feature dimension (even).
    pub time_features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden: 16,
            time_features: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(CoreError::invalid("hidden width must be at least 1"));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(CoreError::invalid("time_features must be even and positive"));
        }
        Ok(())
    }
}

const STATE_CHANNELS: usize = 4;

/// Flat parameter offsets for one [`DenoiserConfig`].
#[derive(Debug, Clone)]
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    wg: Range<usize>,
    bg: Range<usize>,
    wb: Range<usize>,
    bb: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Layout {
        let (c, d) = (cfg.hidden, cfg.time_features);
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let w1 = next(c * STATE_CHANNELS * 9);
        let b1 = next(c);
        let wg = next(c * d);
        let bg = next(c);
        let wb = next(c * d);
        let bb = next(c);
        let w2 = next(c * c * 9);
        let b2 = next(c);
        let w3 = next(STATE_CHANNELS * c * 9);
        let b3 = next(STATE_CHANNELS);
        Layout {
            w1,
            b1,
            wg,
            bg,
            wb,
            bb,
            w2,
            b2,
            w3,
            b3,
            total: at,
        }
    }
}

/// Sinusoidal features of the normalized noise level (t + 1) / T at
/// geometrically spaced frequencies.
fn time_embedding(t: usize, t_total: usize, d: usize) -> Vec<f64> {
    let u = (t + 1) as f64 / t_total as f64;
    let mut e = Vec::with_capacity(d);
    for m in 0..d / 2 {
        let phase = std::f64::consts::TAU * (1u64 << m) as f64 * u;
        e.push(phase.sin());
        e.push(phase.cos());
    }
    e
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn dsilu(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

fn reflect101(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let m = ((i % p) + p) % p;
    (if m < n { m } else { p - m }) as usize
}

/// 3x3 same-size convolution with reflected borders, promoting f32 weights.
/// Weight layout: [c_out][c_in][di][dj].
fn conv3x3(x: &Array3<f64>, w: &[f32], b: &[f32], c_out: usize) -> Array3<f64> {
    let (h, wd, c_in) = x.dim();
    let mut out = Array3::zeros((h, wd, c_out));
    for i in 0..h as i64 {
        for j in 0..wd as i64 {
            for co in 0..c_out {
                let mut acc = b[co] as f64;
                for di in -1..=1i64 {
                    let si = reflect101(i + di, h as i64);
                    for dj in -1..=1i64 {
                        let sj = reflect101(j + dj, wd as i64);
                        for ci in 0..c_in {
                            let widx = ((co * c_in + ci) * 3 + (di + 1) as usize) * 3
                                + (dj + 1) as usize;
                            acc += w[widx] as f64 * x[[si, sj, ci]];
                        }
                    }
                }
                out[[i as usize, j as usize, co]] = acc;
            }
        }
    }
    out
}

/// Input gradient of [`conv3x3`]: scatter the upstream gradient back through
/// the reflected gather.
fn conv3x3_bwd_input(g: &Array3<f64>, w: &[f32], c_in: usize) -> Array3<f64> {
    let (h, wd, c_out) = g.dim();
    let mut gx = Array3::zeros((h, wd, c_in));
    for i in 0..h as i64 {
        for j in 0..wd as i64 {
            for di in -1..=1i64 {
                let si = reflect101(i + di, h as i64);
                for dj in -1..=1i64 {
                    let sj = reflect101(j + dj, wd as i64);
                    for co in 0..c_out {
                        let gv = g[[i as usize, j as usize, co]];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let widx = ((co * c_in + ci) * 3 + (di + 1) as usize) * 3
                                + (dj + 1) as usize;
                            gx[[si, sj, ci]] += gv * w[widx] as f64;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Parameter gradients of [`conv3x3`], accumulated into `gw`/`gb`.
fn conv3x3_bwd_params(
    x: &Array3<f64>,
    g: &Array3<f64>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (h, wd, c_in) = x.dim();
    let c_out = g.dim().2;
    for i in 0..h as i64 {
        for j in 0..wd as i64 {
            for di in -1..=1i64 {
                let si = reflect101(i + di, h as i64);
                for dj in -1..=1i64 {
                    let sj = reflect101(j + dj, wd as i64);
                    for co in 0..c_out {
                        let gv = g[[i as usize, j as usize, co]];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let widx = ((co * c_in + ci) * 3 + (di + 1) as usize) * 3
                                + (dj + 1) as usize;
                            gw[widx] += gv * x[[si, sj, ci]];
                        }
                    }
                }
            }
        }
    }
    for i in 0..h as usize {
        for j in 0..wd {
            for co in 0..c_out {
                gb[co] += g[[i, j, co]];
            }
        }
    }
}

struct Activations {
    x: Array3<f64>,
    h1: Array3<f64>,
    f1: Array3<f64>,
    a1: Array3<f64>,
    h2: Array3<f64>,
    a2: Array3<f64>,
}

/// A small noise-prediction network on 4-channel normalized states:
/// conv3x3 -> time-conditioned per-channel affine (FiLM) -> SiLU -> conv3x3
/// -> SiLU -> conv3x3. The last convolution is zero-initialized so the
/// untrained network predicts zero noise.
///
/// Parameters and optimizer state are kept in f32 (the checkpoint payload);
/// all arithmetic runs in f64.
#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    cfg: DenoiserConfig,
    params: Vec<f32>,
}

impl TinyDenoiser {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = seeded_step(seed, Stream::Training, 0);
        let std1 = (2.0 / (STATE_CHANNELS * 9) as f64).sqrt();
        for p in &mut params[layout.w1.clone()] {
            *p = (standard_normal(&mut rng) * std1) as f32;
        }
        let std2 = (2.0 / (cfg.hidden * 9) as f64).sqrt();
        for p in &mut params[layout.w2.clone()] {
            *p = (standard_normal(&mut rng) * std2) as f32;
        }
        // FiLM starts as identity (gamma = 1, beta = 0) and w3/b3 stay zero.
        Ok(TinyDenoiser { cfg, params })
    }

    pub fn from_params(cfg: DenoiserConfig, params: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(CoreError::invalid(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::invalid("parameters must be finite"));
        }
        Ok(TinyDenoiser { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn film_coeffs(&self, emb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let layout = Layout::new(&self.cfg);
        let (c, d) = (self.cfg.hidden, self.cfg.time_features);
        let wg = &self.params[layout.wg];
        let bg = &self.params[layout.bg];
        let wb = &self.params[layout.wb];
        let bb = &self.params[layout.bb];
        let mut gamma = vec![0.0; c];
        let mut beta = vec![0.0; c];
        for ci in 0..c {
            let mut g = bg[ci] as f64;
            let mut b = bb[ci] as f64;
            for (k, e) in emb.iter().enumerate().take(d) {
                g += wg[ci * d + k] as f64 * e;
                b += wb[ci * d + k] as f64 * e;
            }
            gamma[ci] = 1.0 + g;
            beta[ci] = b;
        }
        (gamma, beta)
    }

    fn forward(&self, x: &StateGrid, emb: &[f64]) -> (Activations, Array3<f64>) {
        let layout = Layout::new(&self.cfg);
        let c = self.cfg.hidden;
        let h1 = conv3x3(
            x,
            &self.params[layout.w1.clone()],
            &self.params[layout.b1.clone()],
            c,
        );
        let (gamma, beta) = self.film_coeffs(emb);
        let mut f1 = h1.clone();
        for mut lane in f1.outer_iter_mut() {
            for mut px in lane.outer_iter_mut() {
                for (ci, v) in px.iter_mut().enumerate() {
                    *v = gamma[ci] * *v + beta[ci];
                }
            }
        }
        let a1 = f1.mapv(silu);
        let h2 = conv3x3(
            &a1,
            &self.params[layout.w2.clone()],
            &self.params[layout.b2.clone()],
            c,
        );
        let a2 = h2.mapv(silu);
        let out = conv3x3(
            &a2,
            &self.params[layout.w3.clone()],
            &self.params[layout.b3.clone()],
            STATE_CHANNELS,
        );
        (
            Activations {
                x: x.clone(),
                h1,
                f1,
                a1,
                h2,
                a2,
            },
            out,
        )
    }

    /// Reverse pass. Returns the input gradient; parameter gradients are
    /// accumulated into `pgrad` when given (f64, layout-aligned).
    fn backward(
        &self,
        acts: &Activations,
        emb: &[f64],
        g_out: &Array3<f64>,
        mut pgrad: Option<&mut [f64]>,
    ) -> Array3<f64> {
        let layout = Layout::new(&self.cfg);
        let c = self.cfg.hidden;
        let d = self.cfg.time_features;
        if let Some(pg) = pgrad.as_deref_mut() {
            let (gw3, gb3) = (&mut pg[layout.w3.start..layout.b3.end]).split_at_mut(
                layout.w3.end - layout.w3.start,
            );
            conv3x3_bwd_params(&acts.a2, g_out, gw3, gb3);
        }
        let g_a2 = conv3x3_bwd_input(g_out, &self.params[layout.w3.clone()], c);
        let mut g_h2 = g_a2;
        for (g, h) in g_h2.iter_mut().zip(acts.h2.iter()) {
            *g *= dsilu(*h);
        }
        if let Some(pg) = pgrad.as_deref_mut() {
            let (gw2, gb2) = (&mut pg[layout.w2.start..layout.b2.end]).split_at_mut(
                layout.w2.end - layout.w2.start,
            );
            conv3x3_bwd_params(&acts.a1, &g_h2, gw2, gb2);
        }
        let g_a1 = conv3x3_bwd_input(&g_h2, &self.params[layout.w2.clone()], c);
        let mut g_f1 = g_a1;
        for (g, f) in g_f1.iter_mut().zip(acts.f1.iter()) {
            *g *= dsilu(*f);
        }
        let (gamma, _) = self.film_coeffs(emb);
        if let Some(pg) = pgrad.as_deref_mut() {
            // d gamma_c = sum g_f1 h1, d beta_c = sum g_f1; both fan out over
            // the embedding for the FiLM weight gradients.
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let (hh, ww, _) = g_f1.dim();
            for i in 0..hh {
                for j in 0..ww {
                    for ci in 0..c {
                        let g = g_f1[[i, j, ci]];
                        dgamma[ci] += g * acts.h1[[i, j, ci]];
                        dbeta[ci] += g;
                    }
                }
            }
            for ci in 0..c {
                for (k, e) in emb.iter().enumerate().take(d) {
                    pg[layout.wg.start + ci * d + k] += dgamma[ci] * e;
                    pg[layout.wb.start + ci * d + k] += dbeta[ci] * e;
                }
                pg[layout.bg.start + ci] += dgamma[ci];
                pg[layout.bb.start + ci] += dbeta[ci];
            }
        }
        let mut g_h1 = g_f1;
        for lane in g_h1.outer_iter_mut() {
            let mut lane = lane;
            for mut px in lane.outer_iter_mut() {
                for (ci, v) in px.iter_mut().enumerate() {
                    *v *= gamma[ci];
                }
            }
        }
        if let Some(pg) = pgrad.as_deref_mut() {
            let (gw1, gb1) = (&mut pg[layout.w1.start..layout.b1.end]).split_at_mut(
                layout.w1.end - layout.w1.start,
            );
            conv3x3_bwd_params(&acts.x, &g_h1, gw1, gb1);
        }
        conv3x3_bwd_input(&g_h1, &self.params[layout.w1.clone()], STATE_CHANNELS)
    }

    fn check_input(&self, x: &StateGrid) -> Result<()> {
        if x.dim().2 != STATE_CHANNELS {
            return Err(CoreError::shape(format!(
                "denoiser expects {STATE_CHANNELS}-channel states, got {}",
                x.dim().2
            )));
        }
        Ok(())
    }
}

impl ScoreModel for TinyDenoiser {
    fn eps_predict(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<StateGrid> {
        check_t(t, schedule)?;
        self.check_input(x_t)?;
        let emb = time_embedding(t, schedule.len(), self.cfg.time_features);
        Ok(self.forward(x_t, &emb).1)
    }

    fn tweedie_vjp(
        &self,
        x_t: &StateGrid,
        t: usize,
        schedule: &NoiseSchedule,
        cotangent: &StateGrid,
    ) -> Result<StateGrid> {
        let bar = check_t(t, schedule)?;
        self.check_input(x_t)?;
        check_shapes(x_t, cotangent)?;
        if bar <= 0.0 {
            return Err(CoreError::numerical("alpha_bar underflowed to 0"));
        }
        let emb = time_embedding(t, schedule.len(), self.cfg.time_features);
        let (acts, _) = self.forward(x_t, &emb);
        // x0_hat = (x - sqrt(1 - bar) eps(x)) / sqrt(bar)
        let jt_c = self.backward(&acts, &emb, cotangent, None);
        let root = bar.sqrt();
        let coeff = (1.0 - bar).sqrt();
        let mut out = cotangent.clone();
        out.scaled_add(-coeff, &jt_c);
        out.mapv_inplace(|v| v / root);
        Ok(out)
    }
}

/// Loss and parameter gradients on an explicit batch of
/// (noisy state, noise index, true noise) triples: mean over the batch of the
/// per-sample summed squared prediction error.
pub(crate) fn loss_and_param_grads(
    model: &TinyDenoiser,
    batch: &[(StateGrid, usize, StateGrid)],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(CoreError::invalid("empty training batch"));
    }
    let layout = Layout::new(&model.cfg);
    let mut pgrad = vec![0.0f64; layout.total];
    let mut loss = 0.0;
    let bn = batch.len() as f64;
    for (x_t, t, eps) in batch {
        check_t(*t, schedule)?;
        model.check_input(x_t)?;
        check_shapes(x_t, eps)?;
        let emb = time_embedding(*t, schedule.len(), model.cfg.time_features);
        let (acts, out) = model.forward(x_t, &emb);
        let resid = &out - eps;
        loss += resid.iter().map(|v| v * v).sum::<f64>() / bn;
        let g_out = resid.mapv(|v| 2.0 * v / bn);
        model.backward(&acts, &emb, &g_out, Some(&mut pgrad));
    }
    Ok((loss, pgrad))
}

/// Optimizer hyperparameters for [`train_denoiser`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            learning_rate: 2e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Resumable optimizer state: model parameters, momentum buffer, step count.
/// All three are what a checkpoint stores; together with the per-step derived
/// RNG this makes save/load/resume bit-identical to an uninterrupted run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TinyDenoiser,
    pub momentum: Vec<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let model = TinyDenoiser::init(cfg, seed)?;
        let n = model.n_params();
        Ok(TrainState {
            model,
            momentum: vec![0.0; n],
            step: 0,
        })
    }

    pub fn from_parts(model: TinyDenoiser, momentum: Vec<f32>, step: u64) -> Result<Self> {
        if momentum.len() != model.n_params() {
            return Err(CoreError::invalid(format!(
                "momentum buffer has {} entries, model has {} parameters",
                momentum.len(),
                model.n_params()
            )));
        }
        Ok(TrainState {
            model,
            momentum,
            step,
        })
    }
}

fn validate_dataset(dataset: &[StateGrid]) -> Result<(usize, usize)> {
    let first = dataset
        .first()
        .ok_or_else(|| CoreError::invalid("training dataset is empty"))?;
    let (h, w, c) = first.dim();
    if c != STATE_CHANNELS {
        return Err(CoreError::shape(format!(
            "training patches must have {STATE_CHANNELS} channels, got {c}"
        )));
    }
    for p in dataset {
        if p.dim() != (h, w, c) {
            return Err(CoreError::shape("training patches must share one shape"));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("training patches must be finite"));
        }
    }
    Ok((h, w))
}

/// Advance training by `n_steps` SGD-with-momentum steps. Each step seeds its
/// own RNG from (seed, step index), so resuming from a saved state continues
/// the identical sample sequence. Returns the per-step batch losses.
pub fn train_steps(
    state: &mut TrainState,
    dataset: &[StateGrid],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    n_steps: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (h, w) = validate_dataset(dataset)?;
    let dim = (h * w * STATE_CHANNELS) as f64;
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    let mut losses = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        // step 0 of the RNG tree is reserved for parameter init
        let mut rng = seeded_step(cfg.seed, Stream::Training, state.step + 1);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let x0 = &dataset[index_in(&mut rng, dataset.len())];
            let t = index_in(&mut rng, schedule.len());
            let bar = schedule.alpha_bar(t);
            let eps = normal_grid3(&mut rng, h, w, STATE_CHANNELS);
            let mut x_t = eps.mapv(|v| v * (1.0 - bar).sqrt());
            x_t.scaled_add(bar.sqrt(), x0);
            batch.push((x_t, t, eps));
        }
        let (loss, pgrad) = loss_and_param_grads(&state.model, &batch, schedule)?;
        if !loss.is_finite() || loss > 10.0 * dim {
            return Err(CoreError::Training(format!(
                "loss diverged at step {} ({loss:.3e} vs init scale {dim:.1})",
                state.step
            )));
        }
        // f32 optimizer arithmetic keeps resumed runs bit-identical.
        for i in 0..pgrad.len() {
            let g = pgrad[i] as f32;
            state.momentum[i] = mu * state.momentum[i] + g;
            state.model.params[i] -= lr * state.momentum[i];
        }
        state.step += 1;
        losses.push(loss);
    }
    Ok(losses)
}

/// Training output: final optimizer state plus the loss curve.
#[derive(Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn model(&self) -> &TinyDenoiser {
        &self.state.model
    }
}

/// Train a fresh denoiser on normalized 4-channel patches.
pub fn train_denoiser(
    dataset: &[StateGrid],
    schedule: &NoiseSchedule,
    model_cfg: &DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut state = TrainState::init(*model_cfg, cfg.seed)?;
    let losses = train_steps(&mut state, dataset, schedule, cfg, cfg.steps)?;
    Ok(TrainReport { state, losses })
}
