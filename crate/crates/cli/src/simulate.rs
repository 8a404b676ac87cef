//! `dfd simulate`: draw synthetic scenes, render coded-defocus observations
//! at the configured noise level, and write ground truth plus a manifest.

use std::collections::BTreeMap;

use dfd_core::forward::{add_observation_noise, render};
use dfd_core::io::{
    read_coded_psf, write_coded_psf, write_depth_map, write_float_map, write_gray_png16,
    write_rgb_png,
};
use dfd_core::metrics::psnr;
use dfd_core::optics::{synthetic_coded_psf, CodedPsf};
use dfd_core::rng::{seeded, Stream};
use dfd_core::scene::{generate_scene, SceneSpec};
use dfd_core::Result;

use crate::config::{self, RunConfig};
use crate::figures;
use crate::manifest::{Manifest, SceneEntry};

/// The configured PSF: a calibrated container when a path is given, the
/// seeded synthetic coded aperture otherwise.
pub fn load_psf(cfg: &RunConfig) -> Result<CodedPsf> {
    match &cfg.psf.path {
        Some(p) => read_coded_psf(p),
        None => synthetic_coded_psf(
            cfg.psf.size,
            cfg.psf.mask_seed,
            cfg.camera.pixel_pitch,
            reference_depth(cfg),
        ),
    }
}

pub fn reference_depth(cfg: &RunConfig) -> f64 {
    cfg.psf.reference_depth.unwrap_or_else(|| {
        let r = cfg.camera.depth_range;
        0.5 * (r.min + r.max)
    })
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out)?;
    let psf = load_psf(cfg)?;
    write_coded_psf(out.join("psf.cpsf"), &psf)?;

    let mut man = Manifest::new(
        "simulate",
        cfg.run.seed,
        cfg.run.sigma,
        config::sha256_hex(cfg),
        cfg.camera,
    );
    man.files.insert("psf".into(), "psf.cpsf".into());
    if let Some(p) = &cfg.psf.path {
        man.inputs.insert("psf_source".into(), p.display().to_string());
        man.inputs
            .insert("psf_source_sha256".into(), config::file_sha256(p)?);
    }

    for i in 0..cfg.run.n_scenes {
        let scene_seed = cfg.run.seed.wrapping_add(i as u64);
        let spec = SceneSpec {
            seed: scene_seed,
            ..cfg.scene.clone()
        };
        let truth = generate_scene(&spec)?;
        let clean = render(&truth, &cfg.camera, &psf)?;
        let mut rng = seeded(scene_seed, Stream::ObservationNoise);
        let image = add_observation_noise(&clean, cfg.run.sigma, &mut rng)?;
        let p = psnr(&image, &clean)?;

        let rel = format!("scene_{i:03}");
        let dir = out.join(&rel);
        std::fs::create_dir_all(&dir)?;
        write_float_map(dir.join("truth_rgb.fmap"), &truth.rgb)?;
        write_depth_map(dir.join("truth_depth.dmap"), &truth.depth)?;
        write_float_map(dir.join("observation.fmap"), &image)?;
        write_rgb_png(dir.join("truth_rgb.png"), &truth.rgb)?;
        write_gray_png16(
            dir.join("truth_depth.png"),
            &figures::depth_norm(&truth.depth, &cfg.camera.depth_range),
        )?;
        write_rgb_png(dir.join("observation.png"), &image)?;

        let mut files = BTreeMap::new();
        for (label, name) in [
            ("truth_rgb", "truth_rgb.fmap"),
            ("truth_depth", "truth_depth.dmap"),
            ("observation", "observation.fmap"),
            ("truth_rgb_png", "truth_rgb.png"),
            ("truth_depth_png", "truth_depth.png"),
            ("observation_png", "observation.png"),
        ] {
            files.insert(label.to_string(), format!("{rel}/{name}"));
        }
        man.scenes.push(SceneEntry {
            index: i,
            scene_seed,
            noise_seed: Some(scene_seed),
            sampler_seed: None,
            psnr_db: p.is_finite().then_some(p),
            files,
        });
        println!("scene {i:03}: observation psnr {}", fmt_db(p));
    }

    man.write(&out)?;
    println!(
        "simulate: {} scenes, sigma {}, psf {}x{} -> {}",
        cfg.run.n_scenes,
        cfg.run.sigma,
        psf.size(),
        psf.size(),
        out.display()
    );
    Ok(())
}

pub fn fmt_db(p: f64) -> String {
    if p.is_finite() {
        format!("{p:.2} dB")
    } else {
        "inf dB".to_string()
    }
}
