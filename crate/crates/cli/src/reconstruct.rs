//! `dfd reconstruct`: read a simulation's observations and recover scenes
//! with the selected method, writing maps, previews, trajectories, and a
//! manifest tied to the inputs by digest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dfd_core::baseline::depth_sweep_reconstruct;
use dfd_core::forward::{CodedDefocusModel, Observation};
use dfd_core::io::{
    read_checkpoint, read_coded_psf, read_float_map, write_depth_map, write_float_map,
    write_gray_png16, write_rgb_png,
};
use dfd_core::optics::build_psf_bank;
use dfd_core::prior::{GaussianPrior, ScoreModel, TinyDenoiser};
use dfd_core::sampler::{
    log_trajectory, sample_ddpm, sample_dfd_dps, sample_dps_state, Trajectory,
};
use dfd_core::schedule::NoiseSchedule;
use dfd_core::state::RgbdState;
use dfd_core::{CoreError, Result};

use crate::config::{self, Method, PriorKind, RunConfig};
use crate::figures::{self, Series};
use crate::manifest::{Manifest, SceneEntry, MANIFEST_NAME};

pub struct ReconArgs {
    pub sim: PathBuf,
    /// Reconstruct only this scene index when set.
    pub scene: Option<usize>,
}

enum PriorModel {
    Gaussian { mean: f64, var: f64 },
    Net(TinyDenoiser),
}

impl PriorModel {
    fn instantiate(&self, h: usize, w: usize) -> Result<Box<dyn ScoreModel>> {
        match self {
            PriorModel::Gaussian { mean, var } => Ok(Box::new(GaussianPrior::isotropic(
                (h, w, 4),
                *mean,
                *var,
            )?)),
            PriorModel::Net(model) => Ok(Box::new(model.clone())),
        }
    }
}

fn build_prior(cfg: &RunConfig, man: &mut Manifest) -> Result<PriorModel> {
    match cfg.prior.kind {
        PriorKind::Gaussian => Ok(PriorModel::Gaussian {
            mean: cfg.prior.mean,
            var: cfg.prior.var,
        }),
        PriorKind::Checkpoint => {
            let path = cfg.prior.checkpoint.as_ref().ok_or_else(|| {
                CoreError::invalid("prior.kind = checkpoint needs prior.checkpoint")
            })?;
            man.inputs
                .insert("prior_checkpoint".into(), path.display().to_string());
            man.inputs
                .insert("prior_checkpoint_sha256".into(), config::file_sha256(path)?);
            Ok(PriorModel::Net(read_checkpoint(path)?.model))
        }
    }
}

pub fn run(cfg: &RunConfig, args: &ReconArgs) -> Result<()> {
    let sim_dir = &args.sim;
    let sim = Manifest::read(sim_dir)?;
    if sim.command != "simulate" {
        return Err(CoreError::invalid(format!(
            "--sim points at a '{}' manifest, need a simulate run",
            sim.command
        )));
    }
    let psf = read_coded_psf(sim.file(sim_dir, "psf")?)?;
    let camera = sim.camera;
    let method = cfg.run.method;
    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out)?;

    let mut man = Manifest::new(
        "reconstruct",
        cfg.run.seed,
        sim.sigma,
        config::sha256_hex(cfg),
        camera,
    );
    man.method = Some(method.name().to_string());
    man.inputs
        .insert("sim_manifest".into(), sim_dir.join(MANIFEST_NAME).display().to_string());
    man.inputs.insert(
        "sim_manifest_sha256".into(),
        config::file_sha256(&sim_dir.join(MANIFEST_NAME))?,
    );
    man.inputs
        .insert("sim_config_sha256".into(), sim.config_sha256.clone());

    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let prior = if method.needs_prior() {
        Some(build_prior(cfg, &mut man)?)
    } else {
        None
    };
    let bank = if method == Method::Baseline {
        Some(build_psf_bank(&psf, &camera, cfg.baseline.n_depths)?)
    } else {
        None
    };

    let selected: Vec<&SceneEntry> = match args.scene {
        Some(k) => vec![sim.scenes.iter().find(|e| e.index == k).ok_or_else(|| {
            CoreError::invalid(format!("simulation has no scene index {k}"))
        })?],
        None => sim.scenes.iter().collect(),
    };

    for entry in selected {
        let y_img = read_float_map(entry.file(sim_dir, "observation")?)?;
        let (h, w, _) = y_img.dim();
        let obs = Observation {
            image: y_img,
            noise_sigma: sim.sigma,
            camera,
            psf: psf.clone(),
        };
        let sampler_seed = cfg.run.seed.wrapping_add(entry.index as u64);
        let rel = format!("scene_{:03}", entry.index);
        let dir = out.join(&rel);
        std::fs::create_dir_all(&dir)?;
        let mut files = BTreeMap::new();
        let mut used_sampler = true;

        let (state, traj): (RgbdState, Option<Trajectory>) = match method {
            Method::Baseline => {
                used_sampler = false;
                let rec = depth_sweep_reconstruct(&obs, bank.as_ref().unwrap(), &cfg.baseline)?;
                let conf = rec.low_confidence.mapv(|b| if b { 1.0 } else { 0.0 });
                write_gray_png16(dir.join("low_confidence.png"), &conf)?;
                files.insert(
                    "low_confidence_png".into(),
                    format!("{rel}/low_confidence.png"),
                );
                let flagged = rec.low_confidence.iter().filter(|b| **b).count();
                println!(
                    "scene {:03}: baseline, {} of {} pixels flagged low-confidence",
                    entry.index,
                    flagged,
                    h * w
                );
                (rec.state, None)
            }
            Method::DdpmPriorOnly => {
                // Prior-only draws always run the full schedule; that keeps
                // them the exact zero-guidance reduction of the guided runs
                // at the default (full-length) sampler setting.
                let model = prior.as_ref().unwrap().instantiate(h, w)?;
                let z = sample_ddpm(&*model, &schedule, (h, w), sampler_seed)?;
                println!("scene {:03}: prior-only draw", entry.index);
                (RgbdState::decode(&z, &camera.depth_range)?, None)
            }
            Method::DfdDps => {
                let model = prior.as_ref().unwrap().instantiate(h, w)?;
                let scfg = cfg.sampler.build(&schedule, sampler_seed)?;
                let op = CodedDefocusModel::from_observation(&obs)?;
                let (state, traj) = sample_dfd_dps(&*model, &schedule, &op, &obs, &scfg)?;
                (state, Some(traj))
            }
            Method::Dps => {
                let model = prior.as_ref().unwrap().instantiate(h, w)?;
                let scfg = cfg.sampler.build(&schedule, sampler_seed)?;
                let op = CodedDefocusModel::from_observation(&obs)?;
                let (z, traj) = sample_dps_state(&*model, &schedule, &op, &obs.image, &scfg)?;
                (RgbdState::decode(&z, &camera.depth_range)?, Some(traj))
            }
        };

        write_float_map(dir.join("recon_rgb.fmap"), &state.rgb)?;
        write_depth_map(dir.join("recon_depth.dmap"), &state.depth)?;
        write_rgb_png(dir.join("recon_rgb.png"), &state.rgb)?;
        write_gray_png16(
            dir.join("recon_depth.png"),
            &figures::depth_norm(&state.depth, &camera.depth_range),
        )?;
        for (label, name) in [
            ("recon_rgb", "recon_rgb.fmap"),
            ("recon_depth", "recon_depth.dmap"),
            ("recon_rgb_png", "recon_rgb.png"),
            ("recon_depth_png", "recon_depth.png"),
        ] {
            files.insert(label.to_string(), format!("{rel}/{name}"));
        }

        if let Some(traj) = &traj {
            log_trajectory(traj, &dir)?;
            files.insert("trajectory".into(), format!("{rel}/trajectory.csv"));
            let fids = traj.fidelities();
            let plot = figures::line_plot(
                240,
                360,
                &[Series {
                    values: &fids,
                    color: figures::BLUE,
                }],
            );
            write_rgb_png(dir.join("fidelity.png"), &plot)?;
            files.insert("fidelity_png".into(), format!("{rel}/fidelity.png"));
            println!(
                "scene {:03}: {} finished, fidelity {:.4e} -> {:.4e}",
                entry.index,
                method.name(),
                fids.first().copied().unwrap_or(f64::NAN),
                fids.last().copied().unwrap_or(f64::NAN),
            );
        }

        let mut panels = Vec::new();
        let truth_rgb = entry
            .file(sim_dir, "truth_rgb")
            .ok()
            .and_then(|p| read_float_map(p).ok());
        if let Some(t) = &truth_rgb {
            panels.push(t.clone());
        }
        panels.push(obs.image.clone());
        panels.push(state.rgb.clone());
        panels.push(figures::depth_panel(&state.depth, &camera.depth_range));
        let refs: Vec<&_> = panels.iter().collect();
        write_rgb_png(dir.join("comparison.png"), &figures::hstack(&refs, 4)?)?;
        files.insert("comparison_png".into(), format!("{rel}/comparison.png"));

        man.scenes.push(SceneEntry {
            index: entry.index,
            scene_seed: entry.scene_seed,
            noise_seed: entry.noise_seed,
            sampler_seed: used_sampler.then_some(sampler_seed),
            psnr_db: None,
            files,
        });
    }

    man.write(&out)?;
    println!(
        "reconstruct: {} with {} scenes -> {}",
        method.name(),
        man.scenes.len(),
        out.display()
    );
    Ok(())
}
