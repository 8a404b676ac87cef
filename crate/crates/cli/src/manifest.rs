//! Run manifests: what a command consumed, what it wrote, and the seeds and
//! parameter digests needed to reproduce the run byte for byte. All paths
//! inside a manifest are relative to the directory holding it, so output
//! trees stay relocatable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use dfd_core::optics::CameraParams;
use dfd_core::{CoreError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    /// Wall-clock creation time, seconds since the Unix epoch. The one field
    /// allowed to differ between otherwise identical reruns.
    pub created_unix: u64,
    pub seed: u64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
    /// SHA-256 of the effective configuration rendered back to TOML.
    pub config_sha256: String,
    pub camera: CameraParams,
    /// Upstream files and digests this run consumed, by label.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Run-level outputs by label, as paths relative to this manifest.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SceneEntry {
    pub index: usize,
    pub scene_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_seed: Option<u64>,
    /// Observation PSNR against the clean render; absent when the two match
    /// exactly (the sigma = 0 infinite-PSNR case).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    /// Scene outputs by label, relative to the manifest.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(
        command: &str,
        seed: u64,
        sigma: f64,
        config_sha256: String,
        camera: CameraParams,
    ) -> Self {
        Manifest {
            command: command.to_string(),
            created_unix: now_unix(),
            seed,
            sigma,
            method: None,
            config_sha256,
            camera,
            inputs: BTreeMap::new(),
            files: BTreeMap::new(),
            scenes: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::format(path.display().to_string(), e.to_string()))
    }

    /// Resolve a run-level file label against the manifest's directory.
    pub fn file(&self, dir: &Path, label: &str) -> Result<PathBuf> {
        self.files
            .get(label)
            .map(|rel| dir.join(rel))
            .ok_or_else(|| {
                CoreError::invalid(format!(
                    "{} manifest in {} lists no '{label}' file",
                    self.command,
                    dir.display()
                ))
            })
    }
}

impl SceneEntry {
    pub fn file(&self, dir: &Path, label: &str) -> Result<PathBuf> {
        self.files
            .get(label)
            .map(|rel| dir.join(rel))
            .ok_or_else(|| {
                CoreError::invalid(format!(
                    "scene {} lists no '{label}' file",
                    self.index
                ))
            })
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
