//! `dfd eval`: score one or two reconstruction runs against their ground
//! truth, writing per-scene CSVs, aggregate summaries, and paired plots.

use std::path::{Path, PathBuf};

use dfd_core::io::{read_depth_map, read_float_map};
use dfd_core::metrics::{depth_mae, depth_mae_interior, psnr, EvalReport, SceneEval};
use dfd_core::state::{DepthGrid, ImageGrid};
use dfd_core::{CoreError, Result};

use crate::config::{self, RunConfig};
use crate::figures::{self, Series};
use crate::manifest::{Manifest, SceneEntry, MANIFEST_NAME};

pub struct EvalArgs {
    pub truth: PathBuf,
    pub recon: PathBuf,
    pub recon_b: Option<PathBuf>,
    /// Exclude this many border pixels from the depth MAE (0 = whole frame).
    pub boundary_margin: usize,
}

struct LoadedRun {
    dir: PathBuf,
    manifest: Manifest,
}

impl LoadedRun {
    fn open(dir: &Path) -> Result<Self> {
        Ok(LoadedRun {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(dir)?,
        })
    }

    fn method_name(&self) -> String {
        self.manifest
            .method
            .clone()
            .unwrap_or_else(|| self.manifest.command.clone())
    }

    /// Reconstruction maps for one scene; a simulate run evaluates its own
    /// ground truth (the self-check case).
    fn recon_maps(&self, entry: &SceneEntry) -> Result<(ImageGrid, DepthGrid)> {
        let (rgb_label, depth_label) = if self.manifest.command == "simulate" {
            ("truth_rgb", "truth_depth")
        } else {
            ("recon_rgb", "recon_depth")
        };
        Ok((
            read_float_map(entry.file(&self.dir, rgb_label)?)?,
            read_depth_map(entry.file(&self.dir, depth_label)?)?,
        ))
    }
}

fn check_alignment(truth: &LoadedRun, recon: &LoadedRun) -> Result<()> {
    if truth.manifest.command != "simulate" {
        return Err(CoreError::invalid(format!(
            "--truth points at a '{}' manifest, need a simulate run",
            truth.manifest.command
        )));
    }
    if recon.manifest.command == "reconstruct" {
        match recon.manifest.inputs.get("sim_config_sha256") {
            Some(h) if *h == truth.manifest.config_sha256 => {}
            Some(_) => {
                return Err(CoreError::invalid(
                    "reconstruction was produced from a different simulation (config digest mismatch)",
                ))
            }
            None => {
                return Err(CoreError::invalid(
                    "reconstruction manifest does not name its simulation",
                ))
            }
        }
    }
    for e in &recon.manifest.scenes {
        let t = truth
            .manifest
            .scenes
            .iter()
            .find(|te| te.index == e.index)
            .ok_or_else(|| {
                CoreError::invalid(format!("truth run has no scene index {}", e.index))
            })?;
        if t.scene_seed != e.scene_seed {
            return Err(CoreError::invalid(format!(
                "scene {} seed mismatch: truth {} vs reconstruction {}",
                e.index, t.scene_seed, e.scene_seed
            )));
        }
    }
    Ok(())
}

fn score(truth: &LoadedRun, recon: &LoadedRun, margin: usize) -> Result<EvalReport> {
    check_alignment(truth, recon)?;
    let mut report = EvalReport::new(
        recon.method_name(),
        recon.manifest.sigma,
        recon.manifest.seed,
    );
    for entry in &recon.manifest.scenes {
        let t_entry = truth
            .manifest
            .scenes
            .iter()
            .find(|te| te.index == entry.index)
            .expect("alignment checked");
        let truth_rgb = read_float_map(t_entry.file(&truth.dir, "truth_rgb")?)?;
        let truth_depth = read_depth_map(t_entry.file(&truth.dir, "truth_depth")?)?;
        let (rgb, depth) = recon.recon_maps(entry)?;
        let mae = if margin == 0 {
            depth_mae(&depth, &truth_depth)?
        } else {
            depth_mae_interior(&depth, &truth_depth, margin)?
        };
        report.push(SceneEval {
            scene_seed: entry.scene_seed,
            depth_mae: mae,
            psnr: psnr(&rgb, &truth_rgb)?,
        });
    }
    Ok(report)
}

pub fn run(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let truth = LoadedRun::open(&args.truth)?;
    let run_a = LoadedRun::open(&args.recon)?;
    let run_b = args.recon_b.as_deref().map(LoadedRun::open).transpose()?;

    let report_a = score(&truth, &run_a, args.boundary_margin)?;
    let report_b = run_b
        .as_ref()
        .map(|r| score(&truth, r, args.boundary_margin))
        .transpose()?;

    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out)?;
    report_a.write_csv(out.join("eval_a.csv"))?;
    if let Some(rb) = &report_b {
        rb.write_csv(out.join("eval_b.csv"))?;
    }

    let mut summary = String::new();
    summary.push_str(&format!("boundary_margin={}\n", args.boundary_margin));
    summary.push_str(&report_a.summary());
    summary.push('\n');
    if let Some(rb) = &report_b {
        summary.push_str(&rb.summary());
        summary.push('\n');
        summary.push_str(&paired_block(&report_a, rb));
    }
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");

    let mae_a: Vec<f64> = report_a.scenes.iter().map(|s| s.depth_mae).collect();
    let psnr_a: Vec<f64> = report_a.scenes.iter().map(|s| s.psnr).collect();
    let mut mae_series = vec![Series {
        values: &mae_a,
        color: figures::BLUE,
    }];
    let mut psnr_series = vec![Series {
        values: &psnr_a,
        color: figures::BLUE,
    }];
    let (mae_b, psnr_b);
    if let Some(rb) = &report_b {
        mae_b = rb.scenes.iter().map(|s| s.depth_mae).collect::<Vec<_>>();
        psnr_b = rb.scenes.iter().map(|s| s.psnr).collect::<Vec<_>>();
        mae_series.push(Series {
            values: &mae_b,
            color: figures::ORANGE,
        });
        psnr_series.push(Series {
            values: &psnr_b,
            color: figures::ORANGE,
        });
    }
    dfd_core::io::write_rgb_png(
        out.join("depth_mae.png"),
        &figures::line_plot(240, 360, &mae_series),
    )?;
    dfd_core::io::write_rgb_png(
        out.join("psnr.png"),
        &figures::line_plot(240, 360, &psnr_series),
    )?;

    let mut man = Manifest::new(
        "eval",
        cfg.run.seed,
        report_a.noise_sigma,
        config::sha256_hex(cfg),
        truth.manifest.camera,
    );
    for (label, dir) in [
        ("truth_manifest", Some(&args.truth)),
        ("recon_manifest", Some(&args.recon)),
        ("recon_b_manifest", args.recon_b.as_ref()),
    ] {
        if let Some(d) = dir {
            let p = d.join(MANIFEST_NAME);
            man.inputs.insert(label.into(), p.display().to_string());
            man.inputs
                .insert(format!("{label}_sha256"), config::file_sha256(&p)?);
        }
    }
    for name in ["eval_a.csv", "summary.txt", "depth_mae.png", "psnr.png"] {
        man.files.insert(name.replace('.', "_"), name.to_string());
    }
    if report_b.is_some() {
        man.files.insert("eval_b_csv".into(), "eval_b.csv".into());
    }
    man.write(&out)?;
    Ok(())
}

/// Two-method comparison: aggregate row per method plus the per-scene win
/// count on depth MAE, lower being better.
fn paired_block(a: &EvalReport, b: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("\npaired comparison (depth MAE in m, PSNR in dB)\n");
    s.push_str(&format!(
        "{:<18} {:>10} {:>12} {:>10}\n",
        "method", "sigma", "depth_mae", "psnr"
    ));
    for r in [a, b] {
        s.push_str(&format!(
            "{:<18} {:>10} {:>12.6} {:>10.4}\n",
            r.method,
            r.noise_sigma,
            r.mean_depth_mae(),
            r.mean_psnr()
        ));
    }
    let paired = a
        .scenes
        .iter()
        .zip(&b.scenes)
        .filter(|(x, y)| x.scene_seed == y.scene_seed)
        .collect::<Vec<_>>();
    let wins = paired
        .iter()
        .filter(|(x, y)| x.depth_mae < y.depth_mae)
        .count();
    s.push_str(&format!(
        "depth MAE wins: {} beats {} on {}/{} scenes\n",
        a.method,
        b.method,
        wins,
        paired.len()
    ));
    s
}
