//! One TOML configuration tree shared by every subcommand, plus the flag
//! overrides applied on top of it. Everything is validated before any
//! computation starts, and the effective tree is hashed into each manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dfd_core::baseline::BaselineConfig;
use dfd_core::optics::CameraParams;
use dfd_core::prior::{DenoiserConfig, TrainConfig};
use dfd_core::sampler::{SamplerConfig, StepSizeRule};
use dfd_core::scene::SceneSpec;
use dfd_core::schedule::{NoiseSchedule, PosteriorVariant, ScheduleConfig};
use dfd_core::{CoreError, Result};

/// Reconstruction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Method {
    DfdDps,
    Dps,
    DdpmPriorOnly,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DfdDps => "dfd_dps",
            Method::Dps => "dps",
            Method::DdpmPriorOnly => "ddpm_prior_only",
            Method::Baseline => "baseline",
        }
    }

    pub fn needs_prior(self) -> bool {
        !matches!(self, Method::Baseline)
    }
}

/// Posterior coefficient choice as a flag value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum VariantArg {
    AsWritten,
    DdpmPosterior,
}

impl From<VariantArg> for PosteriorVariant {
    fn from(v: VariantArg) -> PosteriorVariant {
        match v {
            VariantArg::AsWritten => PosteriorVariant::AsWritten,
            VariantArg::DdpmPosterior => PosteriorVariant::DdpmPosterior,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Observation noise level in image units.
    pub sigma: f64,
    pub method: Method,
    pub out: PathBuf,
    pub n_scenes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            sigma: 0.01,
            method: Method::DfdDps,
            out: PathBuf::from("out"),
            n_scenes: 4,
        }
    }
}

/// How a scalar step size becomes a per-step rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Constant,
    /// value / (||grad|| + rule_eps): fixed displacement per step.
    GradNormalized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Reverse steps; 0 means the full schedule length.
    pub n_steps: usize,
    /// x0-space guidance size (posterior-mean method).
    pub tau: f64,
    pub tau_rule: RuleKind,
    /// x_t-space guidance size (reverse-step method).
    pub zeta: f64,
    pub zeta_rule: RuleKind,
    /// Denominator floor for the normalized rules.
    pub rule_eps: f64,
    pub inner_grad_steps: usize,
    pub eta: f64,
    pub variant: PosteriorVariant,
    pub channel_weights: [f64; 4],
    /// Keep full reconstruction snapshots every this many steps (0 = none).
    pub snapshot_stride: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_steps: 0,
            tau: 0.3,
            tau_rule: RuleKind::GradNormalized,
            zeta: 0.3,
            zeta_rule: RuleKind::GradNormalized,
            rule_eps: 1e-12,
            inner_grad_steps: 1,
            eta: 0.0,
            variant: PosteriorVariant::default(),
            channel_weights: [1.0; 4],
            snapshot_stride: 0,
        }
    }
}

impl SamplerSection {
    fn rule(&self, kind: RuleKind, value: f64) -> StepSizeRule {
        match kind {
            RuleKind::Constant => StepSizeRule::Constant(value),
            RuleKind::GradNormalized => StepSizeRule::GradNormalized {
                base: value,
                eps: self.rule_eps,
            },
        }
    }

    /// Concrete sampler configuration for one run.
    pub fn build(&self, schedule: &NoiseSchedule, seed: u64) -> Result<SamplerConfig> {
        let n_steps = if self.n_steps == 0 {
            schedule.len()
        } else {
            self.n_steps
        };
        let cfg = SamplerConfig {
            n_steps,
            tau: self.rule(self.tau_rule, self.tau),
            zeta: self.rule(self.zeta_rule, self.zeta),
            variant: self.variant,
            seed,
            inner_grad_steps: self.inner_grad_steps,
            eta: self.eta,
            channel_weights: self.channel_weights,
            snapshot_stride: self.snapshot_stride,
        };
        cfg.validate(schedule)?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.tau) || !ok(self.zeta) || !ok(self.eta) {
            return Err(CoreError::invalid(
                "sampler tau, zeta, and eta must be finite and nonnegative",
            ));
        }
        if !(self.rule_eps.is_finite() && self.rule_eps > 0.0) {
            return Err(CoreError::invalid("sampler rule_eps must be positive"));
        }
        if self.inner_grad_steps == 0 {
            return Err(CoreError::invalid("inner_grad_steps must be at least 1"));
        }
        if self.channel_weights.iter().any(|w| !ok(*w)) {
            return Err(CoreError::invalid(
                "channel_weights must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Isotropic Gaussian in normalized state space.
    Gaussian,
    /// Trained denoiser loaded from a checkpoint file.
    Checkpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub mean: f64,
    pub var: f64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: PriorKind::Gaussian,
            mean: 0.0,
            var: 0.5,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub time_features: usize,
    /// Synthesized dataset size when no --data directory is given.
    pub n_patches: usize,
    pub patch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DenoiserConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            hidden: d.hidden,
            time_features: d.time_features,
            n_patches: 100,
            patch_size: 16,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.hidden,
            time_features: self.time_features,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PsfSection {
    /// Calibrated PSF container; a synthetic coded aperture stands in when unset.
    pub path: Option<PathBuf>,
    pub size: usize,
    pub mask_seed: u64,
    /// Depth the stored kernel was captured at; midpoint of the camera depth
    /// range when unset.
    pub reference_depth: Option<f64>,
}

impl PsfSection {
    pub fn defaulted() -> Self {
        PsfSection {
            path: None,
            size: 9,
            mask_seed: 42,
            reference_depth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub camera: CameraParams,
    pub schedule: ScheduleConfig,
    pub scene: SceneSpec,
    pub sampler: SamplerSection,
    pub prior: PriorSection,
    pub baseline: BaselineConfig,
    pub train: TrainSection,
    pub psf: PsfSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            camera: CameraParams::default(),
            schedule: ScheduleConfig::default(),
            scene: SceneSpec::default(),
            sampler: SamplerSection::default(),
            prior: PriorSection::default(),
            baseline: BaselineConfig::default(),
            train: TrainSection::default(),
            psf: PsfSection::defaulted(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.scene.validate()?;
        // Constructing the schedule runs its full range checks.
        NoiseSchedule::from_config(&self.schedule)?;
        if !(self.run.sigma.is_finite() && self.run.sigma >= 0.0) {
            return Err(CoreError::invalid(format!(
                "sigma must be finite and nonnegative, got {}",
                self.run.sigma
            )));
        }
        if self.run.n_scenes == 0 {
            return Err(CoreError::invalid("n_scenes must be at least 1"));
        }
        self.sampler.validate()?;
        if self.sampler.n_steps > self.schedule.n_steps {
            return Err(CoreError::invalid(format!(
                "sampler n_steps {} exceeds schedule length {}",
                self.sampler.n_steps, self.schedule.n_steps
            )));
        }
        if !(self.prior.mean.is_finite() && self.prior.var.is_finite() && self.prior.var > 0.0) {
            return Err(CoreError::invalid(
                "prior mean must be finite and var positive",
            ));
        }
        self.baseline.validate()?;
        self.train.optimizer(0).validate()?;
        self.train.denoiser().validate()?;
        if self.train.n_patches == 0 || self.train.patch_size < 4 {
            return Err(CoreError::invalid(
                "train needs n_patches >= 1 and patch_size >= 4",
            ));
        }
        if self.psf.size % 2 == 0 || self.psf.size < 3 {
            return Err(CoreError::invalid(format!(
                "psf size {} must be odd and at least 3",
                self.psf.size
            )));
        }
        if let Some(d) = self.psf.reference_depth {
            if !(d.is_finite() && d > 0.0) {
                return Err(CoreError::invalid("psf reference_depth must be positive"));
            }
        }
        Ok(())
    }
}

/// Flag values layered over the file tree. `steps` retargets the training
/// step count for train-prior and the schedule length everywhere else.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub method: Option<Method>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub tau: Option<f64>,
    pub variant: Option<PosteriorVariant>,
    pub steps_mean_training: bool,
}

pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| {
                CoreError::invalid(format!("config {}: {e}", p.display()))
            })?
        }
    };
    if let Some(v) = ov.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = ov.sigma {
        cfg.run.sigma = v;
    }
    if let Some(v) = ov.method {
        cfg.run.method = v;
    }
    if let Some(v) = &ov.out {
        cfg.run.out = v.clone();
    }
    if let Some(v) = ov.steps {
        if ov.steps_mean_training {
            cfg.train.steps = v;
        } else {
            cfg.schedule.n_steps = v;
            if cfg.sampler.n_steps > v {
                cfg.sampler.n_steps = 0;
            }
        }
    }
    if let Some(v) = ov.tau {
        cfg.sampler.tau = v;
    }
    if let Some(v) = ov.variant {
        cfg.sampler.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Digest of the effective configuration, rendered back to TOML so the hash
/// covers defaults and overrides alike.
pub fn sha256_hex(cfg: &RunConfig) -> String {
    // The output directory is where a run lands, not what it computes, so it
    // is blanked before hashing. Reruns into different directories keep the
    // same digest and manifest cross-checks stay location independent.
    let mut keyed = cfg.clone();
    keyed.run.out = PathBuf::new();
    let text = toml::to_string(&keyed).expect("config tree serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
