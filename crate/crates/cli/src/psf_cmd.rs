//! `dfd psf`: inspect, rescale, or calibrate coded PSF containers.

use std::path::{Path, PathBuf};

use dfd_core::io::{read_coded_psf, read_float_map, read_rgb_png, write_coded_psf};
use dfd_core::optics::{calibrate_reference_psf, rescale_psf, CodedPsf};
use dfd_core::state::ImageGrid;
use dfd_core::{CoreError, Result};

use crate::config::{self, RunConfig};
use crate::manifest::Manifest;
use crate::simulate;

pub enum PsfAction {
    Inspect {
        psf: Option<PathBuf>,
    },
    Rescale {
        scale: f64,
        psf: Option<PathBuf>,
    },
    Calibrate {
        pinhole: PathBuf,
        background: PathBuf,
        k: usize,
        reference_depth: Option<f64>,
    },
}

fn source_psf(cfg: &RunConfig, path: &Option<PathBuf>) -> Result<(CodedPsf, String)> {
    match path {
        Some(p) => Ok((read_coded_psf(p)?, p.display().to_string())),
        None => Ok((simulate::load_psf(cfg)?, describe_default(cfg))),
    }
}

fn describe_default(cfg: &RunConfig) -> String {
    match &cfg.psf.path {
        Some(p) => p.display().to_string(),
        None => format!(
            "synthetic(size={}, mask_seed={})",
            cfg.psf.size, cfg.psf.mask_seed
        ),
    }
}

/// Image loader keyed on extension: float maps stay exact, PNGs come back at
/// their stored bit depth.
fn read_frame(path: &Path) -> Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("fmap") => read_float_map(path),
        Some("png") => read_rgb_png(path),
        other => Err(CoreError::invalid(format!(
            "frame {} has unsupported extension {:?}, need .fmap or .png",
            path.display(),
            other.unwrap_or("")
        ))),
    }
}

pub fn run(cfg: &RunConfig, action: &PsfAction) -> Result<()> {
    match action {
        PsfAction::Inspect { psf } => {
            let (psf, origin) = source_psf(cfg, psf)?;
            inspect(&psf, &origin);
            Ok(())
        }
        PsfAction::Rescale { scale, psf } => {
            let (psf, origin) = source_psf(cfg, psf)?;
            let scaled = rescale_psf(&psf, *scale)?;
            let out = cfg.run.out.clone();
            std::fs::create_dir_all(&out)?;
            write_coded_psf(out.join("psf_rescaled.cpsf"), &scaled)?;
            let mut man = manifest_for(cfg, "psf-rescale");
            man.inputs.insert("psf_source".into(), origin);
            man.files
                .insert("psf_rescaled".into(), "psf_rescaled.cpsf".into());
            man.write(&out)?;
            println!(
                "psf rescale: {}x{} at scale {} -> {} ({}x{})",
                psf.size(),
                psf.size(),
                scale,
                out.join("psf_rescaled.cpsf").display(),
                scaled.size(),
                scaled.size()
            );
            Ok(())
        }
        PsfAction::Calibrate {
            pinhole,
            background,
            k,
            reference_depth,
        } => {
            let pin = read_frame(pinhole)?;
            let bg = read_frame(background)?;
            let depth = reference_depth.unwrap_or_else(|| simulate::reference_depth(cfg));
            let psf = calibrate_reference_psf(&pin, &bg, *k, cfg.camera.pixel_pitch, depth)?;
            let out = cfg.run.out.clone();
            std::fs::create_dir_all(&out)?;
            write_coded_psf(out.join("psf_calibrated.cpsf"), &psf)?;
            let mut man = manifest_for(cfg, "psf-calibrate");
            for (label, p) in [("pinhole", pinhole), ("background", background)] {
                man.inputs.insert(label.into(), p.display().to_string());
                man.inputs
                    .insert(format!("{label}_sha256"), config::file_sha256(p)?);
            }
            man.files
                .insert("psf_calibrated".into(), "psf_calibrated.cpsf".into());
            man.write(&out)?;
            println!(
                "psf calibrate: {}x{} kernel at reference depth {} m -> {}",
                k,
                k,
                depth,
                out.join("psf_calibrated.cpsf").display()
            );
            inspect(&psf, "calibrated");
            Ok(())
        }
    }
}

fn manifest_for(cfg: &RunConfig, command: &str) -> Manifest {
    Manifest::new(
        command,
        cfg.run.seed,
        cfg.run.sigma,
        config::sha256_hex(cfg),
        cfg.camera,
    )
}

fn inspect(psf: &CodedPsf, origin: &str) {
    let k = psf.size();
    let r = (k - 1) as f64 / 2.0;
    println!("psf {origin}");
    println!(
        "  size {k}x{k}, pixel_pitch {} m, reference_depth {} m",
        psf.pixel_pitch, psf.reference_depth
    );
    for c in 0..3 {
        let kern = psf.kernel(c);
        let sum: f64 = kern.iter().sum();
        let mut ci = 0.0;
        let mut cj = 0.0;
        for ((i, j), v) in kern.indexed_iter() {
            ci += v * (i as f64 - r);
            cj += v * (j as f64 - r);
        }
        println!("  channel {c}: sum {sum:.6}, centroid offset ({ci:+.3}, {cj:+.3}) px");
    }
}
