//! `dfd train-prior`: fit the small denoiser on ground-truth patches, either
//! synthesized on the fly or taken from a simulate run, and write a resumable
//! checkpoint plus the loss curve.

use std::path::{Path, PathBuf};

use dfd_core::io::{read_checkpoint, read_depth_map, read_float_map, write_checkpoint, write_csv};
use dfd_core::prior::{train_steps, TrainState};
use dfd_core::scene::{generate_scene, SceneSpec};
use dfd_core::schedule::NoiseSchedule;
use dfd_core::state::{RgbdState, StateGrid};
use dfd_core::{CoreError, Result};

use crate::config::{self, RunConfig};
use crate::figures::{self, Series};
use crate::manifest::{Manifest, MANIFEST_NAME};

pub struct TrainArgs {
    /// Simulate run whose ground truths become the dataset; synthesized
    /// patches when absent.
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn dataset_from_run(dir: &Path, man: &mut Manifest) -> Result<Vec<StateGrid>> {
    let sim = Manifest::read(dir)?;
    if sim.command != "simulate" {
        return Err(CoreError::invalid(format!(
            "--data points at a '{}' manifest, need a simulate run",
            sim.command
        )));
    }
    man.inputs
        .insert("data_manifest".into(), dir.join(MANIFEST_NAME).display().to_string());
    man.inputs.insert(
        "data_manifest_sha256".into(),
        config::file_sha256(&dir.join(MANIFEST_NAME))?,
    );
    let range = sim.camera.depth_range;
    sim.scenes
        .iter()
        .map(|e| {
            let rgb = read_float_map(e.file(dir, "truth_rgb")?)?;
            let depth = read_depth_map(e.file(dir, "truth_depth")?)?;
            Ok(RgbdState::new(rgb, depth)?.encode(&range))
        })
        .collect()
}

fn synthesized_dataset(cfg: &RunConfig) -> Result<Vec<StateGrid>> {
    (0..cfg.train.n_patches)
        .map(|i| {
            let spec = SceneSpec {
                height: cfg.train.patch_size,
                width: cfg.train.patch_size,
                seed: cfg.run.seed.wrapping_add(i as u64),
                ..cfg.scene.clone()
            };
            Ok(generate_scene(&spec)?.encode(&cfg.camera.depth_range))
        })
        .collect()
}

pub fn run(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out)?;
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;

    let mut man = Manifest::new(
        "train-prior",
        cfg.run.seed,
        cfg.run.sigma,
        config::sha256_hex(cfg),
        cfg.camera,
    );

    let dataset = match &args.data {
        Some(dir) => dataset_from_run(dir, &mut man)?,
        None => synthesized_dataset(cfg)?,
    };

    let mut state = match &args.resume {
        Some(p) => {
            man.inputs
                .insert("resume_checkpoint".into(), p.display().to_string());
            man.inputs
                .insert("resume_checkpoint_sha256".into(), config::file_sha256(p)?);
            read_checkpoint(p)?
        }
        None => TrainState::init(cfg.train.denoiser(), cfg.run.seed)?,
    };
    let start_step = state.step;
    let opt = cfg.train.optimizer(cfg.run.seed);
    let losses = train_steps(&mut state, &dataset, &schedule, &opt, cfg.train.steps)?;

    write_checkpoint(out.join("prior.ckpt"), &state)?;
    man.files.insert("checkpoint".into(), "prior.ckpt".into());

    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(k, l)| vec![(start_step + k as u64).to_string(), format!("{l:.12e}")])
        .collect();
    write_csv(out.join("loss_curve.csv"), &["step", "loss"], &rows)?;
    man.files.insert("loss_curve".into(), "loss_curve.csv".into());
    if losses.len() >= 2 {
        let plot = figures::line_plot(
            240,
            360,
            &[Series {
                values: &losses,
                color: figures::BLUE,
            }],
        );
        dfd_core::io::write_rgb_png(out.join("loss_curve.png"), &plot)?;
        man.files
            .insert("loss_curve_png".into(), "loss_curve.png".into());
    }

    man.write(&out)?;
    match (losses.first(), losses.last()) {
        (Some(first), Some(last)) => println!(
            "train-prior: {} patches, steps {}..{}, loss {:.2} -> {:.2}",
            dataset.len(),
            start_step,
            state.step,
            first,
            last
        ),
        _ => println!(
            "train-prior: {} patches, checkpoint written at step {}",
            dataset.len(),
            state.step
        ),
    }
    Ok(())
}
