//! End-to-end checks of the `dfd` binary: every subcommand runs against tiny
//! inputs, and the manifest, determinism, and exit-code contracts hold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfd"))
        .args(args)
        .output()
        .expect("spawn dfd")
}

fn run_ok(args: &[&str]) -> Output {
    let out = dfd(args);
    assert!(
        out.status.success(),
        "dfd {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str], expected: i32) -> Output {
    let out = dfd(args);
    assert_eq!(
        out.status.code(),
        Some(expected),
        "dfd {args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest.json");
    serde_json::from_str(&text).expect("valid manifest JSON")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Recursive relpath -> content listing for whole-tree comparisons.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

const TINY_SIM: &str = r#"
[run]
seed = 9
sigma = 0.0
n_scenes = 3

[scene]
height = 16
width = 16
n_objects = 2

[psf]
size = 5
"#;

#[test]
fn simulate_manifest_lists_every_scene_and_flags_sigma_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_SIM);
    let sim = tmp.path().join("sim");
    run_ok(&[
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&sim),
        "simulate",
    ]);

    let man = manifest(&sim);
    assert_eq!(man["command"], "simulate");
    assert_eq!(man["sigma"], 0.0);
    let scenes = man["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 3, "manifest must list exactly n_scenes entries");
    for (i, entry) in scenes.iter().enumerate() {
        assert_eq!(entry["index"], i as u64);
        assert!(
            entry.get("psnr_db").is_none(),
            "sigma = 0 observation equals the clean render, PSNR entry must be absent"
        );
        for label in ["truth_rgb", "truth_depth", "observation", "observation_png"] {
            let rel = entry["files"][label].as_str().unwrap();
            assert!(sim.join(rel).is_file(), "missing {rel}");
        }
    }
    assert!(sim.join("psf.cpsf").is_file());
    assert_eq!(man["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_observation_psnr_tracks_the_noise_level() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[run]
seed = 4
sigma = 0.01
n_scenes = 2

[scene]
height = 128
width = 128

[psf]
size = 5
"#,
    );
    let sim = tmp.path().join("sim");
    run_ok(&[
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&sim),
        "simulate",
    ]);
    let man = manifest(&sim);
    let scenes = man["scenes"].as_array().unwrap();
    let mean: f64 = scenes
        .iter()
        .map(|e| e["psnr_db"].as_f64().expect("finite PSNR at sigma 0.01"))
        .sum::<f64>()
        / scenes.len() as f64;
    assert!(
        (mean - 40.0).abs() < 0.1,
        "sigma 0.01 must land at 40 dB, got {mean:.3}"
    );
}

const TINY_RECON: &str = r#"
[run]
sigma = 0.01
n_scenes = 1

[scene]
height = 12
width = 12

[psf]
size = 5

[schedule]
kind = "linear"
n_steps = 20

[sampler]
tau_rule = "constant"
zeta_rule = "constant"

[prior]
kind = "gaussian"
var = 0.5
"#;

#[test]
fn dfd_dps_at_tau_zero_bit_reproduces_the_prior_only_sampler() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_RECON);
    let cfg = path_str(&cfg);
    let sim = tmp.path().join("sim");
    run_ok(&["--config", &cfg, "--seed", "3", "--out", &path_str(&sim), "simulate"]);

    let r1 = tmp.path().join("dfd0");
    let r2 = tmp.path().join("prior_only");
    run_ok(&[
        "--config", &cfg, "--seed", "5", "--out", &path_str(&r1),
        "--method", "dfd_dps", "--tau", "0",
        "reconstruct", "--sim", &path_str(&sim),
    ]);
    run_ok(&[
        "--config", &cfg, "--seed", "5", "--out", &path_str(&r2),
        "--method", "ddpm_prior_only",
        "reconstruct", "--sim", &path_str(&sim),
    ]);

    for name in ["recon_rgb.fmap", "recon_depth.dmap"] {
        assert_eq!(
            bytes(&r1.join("scene_000").join(name)),
            bytes(&r2.join("scene_000").join(name)),
            "tau = 0 guided run must reproduce the prior-only draw bit for bit ({name})"
        );
    }

    // The guided run also leaves its trajectory and preview files behind.
    let man = manifest(&r1);
    assert_eq!(man["method"], "dfd_dps");
    let entry = &man["scenes"][0];
    assert_eq!(entry["sampler_seed"], 5);
    let traj = r1.join(entry["files"]["trajectory"].as_str().unwrap());
    let text = std::fs::read_to_string(traj).unwrap();
    assert!(text.starts_with("step,t,fidelity,step_size"));
    assert_eq!(text.lines().count(), 21, "header plus one row per step");
    for label in ["comparison_png", "fidelity_png", "recon_rgb_png"] {
        assert!(r1.join(entry["files"][label].as_str().unwrap()).is_file());
    }
}

#[test]
fn baseline_flat_scene_depth_mae_stays_under_the_bank_spacing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
[run]
seed = 11
sigma = 0.0
n_scenes = 1

[scene]
height = 64
width = 64
n_objects = 0
floor = true
floor_slope = [0.0, 0.0]
texture = "noise"

[psf]
size = 13

[baseline]
n_depths = 4
"#,
    );
    let cfg = path_str(&cfg);
    let sim = tmp.path().join("sim");
    let rec = tmp.path().join("baseline");
    let ev = tmp.path().join("eval");
    run_ok(&["--config", &cfg, "--out", &path_str(&sim), "simulate"]);
    run_ok(&[
        "--config", &cfg, "--out", &path_str(&rec), "--method", "baseline",
        "reconstruct", "--sim", &path_str(&sim),
    ]);
    run_ok(&[
        "--config", &cfg, "--out", &path_str(&ev),
        "eval", "--truth", &path_str(&sim), "--recon", &path_str(&rec),
        "--boundary-margin", "13",
    ]);

    let csv = std::fs::read_to_string(ev.join("eval_a.csv")).unwrap();
    let row = csv.lines().nth(1).expect("one scene row");
    let mae: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    let spacing = (4.0 - 2.0) / 3.0;
    assert!(
        mae < spacing,
        "single-plane depth MAE {mae} must stay under the bank spacing {spacing}"
    );
    assert!(ev.join("summary.txt").is_file());
    assert!(rec.join("scene_000/low_confidence.png").is_file());
}

#[test]
fn eval_scores_truth_against_itself_as_perfect() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_SIM);
    let cfg = path_str(&cfg);
    let sim = tmp.path().join("sim");
    let ev = tmp.path().join("eval");
    run_ok(&["--config", &cfg, "--out", &path_str(&sim), "simulate"]);
    run_ok(&[
        "--config", &cfg, "--out", &path_str(&ev),
        "eval", "--truth", &path_str(&sim), "--recon", &path_str(&sim),
    ]);
    let csv = std::fs::read_to_string(ev.join("eval_a.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[3], "0.000000", "depth MAE of truth vs itself");
        assert_eq!(cells[4], "inf", "PSNR sentinel of an exact match");
    }
}

#[test]
fn paired_eval_reports_per_scene_wins() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_RECON);
    let cfg = path_str(&cfg);
    let sim = tmp.path().join("sim");
    run_ok(&["--config", &cfg, "--seed", "3", "--out", &path_str(&sim), "simulate"]);
    let ra = tmp.path().join("ra");
    let rb = tmp.path().join("rb");
    run_ok(&[
        "--config", &cfg, "--seed", "5", "--out", &path_str(&ra),
        "--method", "dfd_dps", "reconstruct", "--sim", &path_str(&sim),
    ]);
    run_ok(&[
        "--config", &cfg, "--seed", "5", "--out", &path_str(&rb),
        "--method", "dps", "reconstruct", "--sim", &path_str(&sim),
    ]);
    let ev = tmp.path().join("eval");
    let out = run_ok(&[
        "--config", &cfg, "--out", &path_str(&ev),
        "eval", "--truth", &path_str(&sim),
        "--recon", &path_str(&ra), "--recon-b", &path_str(&rb),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("depth MAE wins"), "paired summary missing:\n{stdout}");
    assert!(ev.join("eval_b.csv").is_file());
    let summary = std::fs::read_to_string(ev.join("summary.txt")).unwrap();
    assert!(summary.contains("dfd_dps") && summary.contains("dps"));
}

const TINY_TRAIN: &str = r#"
[run]
seed = 2

[schedule]
kind = "linear"
n_steps = 40

[train]
steps = 6
batch_size = 4
hidden = 6
time_features = 8
n_patches = 6
patch_size = 8
"#;

#[test]
fn train_prior_zero_steps_saves_init_and_resume_is_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_TRAIN);
    let cfg = path_str(&cfg);

    let t0 = tmp.path().join("t0");
    run_ok(&["--config", &cfg, "--steps", "0", "--out", &path_str(&t0), "train-prior"]);
    let ckpt0 = dfd_core::io::read_checkpoint(t0.join("prior.ckpt")).unwrap();
    assert_eq!(ckpt0.step, 0, "zero steps must save the initial weights");
    let curve = std::fs::read_to_string(t0.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "header only at zero steps");

    let ta = tmp.path().join("ta");
    run_ok(&["--config", &cfg, "--out", &path_str(&ta), "train-prior"]);

    let tb1 = tmp.path().join("tb1");
    let tb2 = tmp.path().join("tb2");
    run_ok(&["--config", &cfg, "--steps", "3", "--out", &path_str(&tb1), "train-prior"]);
    run_ok(&[
        "--config", &cfg, "--steps", "3", "--out", &path_str(&tb2),
        "train-prior", "--resume", &path_str(&tb1.join("prior.ckpt")),
    ]);
    assert_eq!(
        bytes(&ta.join("prior.ckpt")),
        bytes(&tb2.join("prior.ckpt")),
        "resumed training must match the uninterrupted run bit for bit"
    );
    let curve_a = std::fs::read_to_string(ta.join("loss_curve.csv")).unwrap();
    assert_eq!(curve_a.lines().count(), 7, "header plus six steps");
}

#[test]
fn trained_checkpoint_drives_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_TRAIN);
    let tr = tmp.path().join("tr");
    run_ok(&["--config", &path_str(&cfg), "--out", &path_str(&tr), "train-prior"]);

    let recon_cfg = write_config(
        &tmp.path().join("."),
        &format!(
            r#"
[run]
sigma = 0.01
n_scenes = 1

[scene]
height = 12
width = 12

[psf]
size = 5

[schedule]
kind = "linear"
n_steps = 15

[prior]
kind = "checkpoint"
checkpoint = "{}"
"#,
            tr.join("prior.ckpt").display()
        ),
    );
    let sim = tmp.path().join("sim");
    let rec = tmp.path().join("rec");
    run_ok(&["--config", &path_str(&recon_cfg), "--out", &path_str(&sim), "simulate"]);
    run_ok(&[
        "--config", &path_str(&recon_cfg), "--out", &path_str(&rec),
        "--method", "dfd_dps", "reconstruct", "--sim", &path_str(&sim),
    ]);
    let man = manifest(&rec);
    assert!(man["inputs"]["prior_checkpoint_sha256"].as_str().unwrap().len() == 64);
    assert!(rec.join("scene_000/recon_depth.dmap").is_file());
}

#[test]
fn psf_rescale_at_unit_scale_copies_the_payload() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_SIM);
    let sim = tmp.path().join("sim");
    run_ok(&["--config", &path_str(&cfg), "--out", &path_str(&sim), "simulate"]);

    let pr = tmp.path().join("pr");
    run_ok(&[
        "--out", &path_str(&pr),
        "psf", "rescale", "--scale", "1.0",
        "--psf", &path_str(&sim.join("psf.cpsf")),
    ]);
    assert_eq!(
        bytes(&pr.join("psf_rescaled.cpsf")),
        bytes(&sim.join("psf.cpsf")),
        "unit rescale must copy the payload"
    );
}

#[test]
fn psf_inspect_reports_unit_channel_sums() {
    let out = run_ok(&["psf", "inspect"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        stdout.matches("sum 1.000000").count(),
        3,
        "three normalized channels expected:\n{stdout}"
    );
}

#[test]
fn psf_calibrate_recovers_a_planted_kernel() {
    use ndarray::{Array2, Array3};

    let tmp = TempDir::new().unwrap();
    // The crop centers on the intensity centroid, so the round trip is exact
    // only for a kernel whose centroid sits at its geometric center. Plant a
    // symmetric tent with a channel-dependent center boost.
    let kernels: [Array2<f64>; 3] = std::array::from_fn(|c| {
        Array2::from_shape_fn((5, 5), |(i, j)| {
            let tent = (3.0 - (i as f64 - 2.0).abs()) * (3.0 - (j as f64 - 2.0).abs());
            if (i, j) == (2, 2) { tent + c as f64 } else { tent }
        })
    });
    let psf = dfd_core::optics::CodedPsf::from_raw(kernels, 13e-6, 3.0).unwrap();
    let (h, w) = (32, 32);
    let background = Array3::from_elem((h, w, 3), 0.07);
    let mut pinhole = background.clone();
    for c in 0..3 {
        let kern = psf.kernel(c);
        for ((i, j), v) in kern.indexed_iter() {
            pinhole[[h / 2 - 2 + i, w / 2 - 2 + j, c]] += 0.9 * v;
        }
    }
    let pin_path = tmp.path().join("pinhole.fmap");
    let bg_path = tmp.path().join("background.fmap");
    dfd_core::io::write_float_map(&pin_path, &pinhole).unwrap();
    dfd_core::io::write_float_map(&bg_path, &background).unwrap();

    let pc = tmp.path().join("pc");
    run_ok(&[
        "--out", &path_str(&pc),
        "psf", "calibrate",
        "--pinhole", &path_str(&pin_path),
        "--background", &path_str(&bg_path),
        "--k", "5",
    ]);
    let recovered = dfd_core::io::read_coded_psf(pc.join("psf_calibrated.cpsf")).unwrap();
    for c in 0..3 {
        let planted = psf.kernel(c);
        let got = recovered.kernel(c);
        let diff = planted
            .iter()
            .zip(got.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "channel {c} kernel off by {diff}");
    }

    // A flat frame carries no peak to calibrate on: capability exit code.
    run_code(
        &[
            "--out", &path_str(&tmp.path().join("pc2")),
            "psf", "calibrate",
            "--pinhole", &path_str(&bg_path),
            "--background", &path_str(&bg_path),
            "--k", "5",
        ],
        3,
    );
}

#[test]
fn config_validation_rejects_unknown_keys_and_bad_ranges_before_compute() {
    let tmp = TempDir::new().unwrap();
    let bad_key = write_config(tmp.path(), "[run]\nbogus = 1\n");
    let out_dir = tmp.path().join("never");
    let out = run_code(
        &["--config", &path_str(&bad_key), "--out", &path_str(&out_dir), "simulate"],
        2,
    );
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("bogus"),
        "error should name the unknown key"
    );
    assert!(!out_dir.exists(), "validation must fail before any output");

    let fine = write_config(tmp.path(), TINY_SIM);
    run_code(
        &["--config", &path_str(&fine), "--sigma=-0.5", "--out", &path_str(&out_dir), "simulate"],
        2,
    );
    assert!(!out_dir.exists());
}

#[test]
fn missing_inputs_exit_with_the_io_code() {
    let tmp = TempDir::new().unwrap();
    let nowhere = tmp.path().join("nowhere");
    run_code(
        &["--out", &path_str(&tmp.path().join("r")), "reconstruct", "--sim", &path_str(&nowhere)],
        5,
    );
    run_code(
        &[
            "--out", &path_str(&tmp.path().join("e")),
            "eval", "--truth", &path_str(&nowhere), "--recon", &path_str(&nowhere),
        ],
        5,
    );
}

#[test]
fn reruns_are_byte_identical_except_the_manifest_timestamp() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_RECON);
    let cfg = path_str(&cfg);

    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    run_ok(&["--config", &cfg, "--seed", "3", "--out", &path_str(&s1), "simulate"]);
    run_ok(&["--config", &cfg, "--seed", "3", "--out", &path_str(&s2), "simulate"]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        run_ok(&[
            "--config", &cfg, "--seed", "5", "--out", &path_str(r),
            "--method", "dfd_dps", "reconstruct", "--sim", &path_str(&s1),
        ]);
    }

    for (a, b) in [(s1, s2), (r1, r2)] {
        let ta = tree(&a);
        let tb = tree(&b);
        assert_eq!(
            ta.keys().collect::<Vec<_>>(),
            tb.keys().collect::<Vec<_>>(),
            "identical file sets"
        );
        for (rel, content) in &ta {
            if rel == "manifest.json" {
                let mut ma: serde_json::Value = serde_json::from_slice(content).unwrap();
                let mut mb: serde_json::Value = serde_json::from_slice(&tb[rel]).unwrap();
                ma.as_object_mut().unwrap().remove("created_unix");
                mb.as_object_mut().unwrap().remove("created_unix");
                assert_eq!(ma, mb, "manifests differ beyond the timestamp");
            } else {
                assert_eq!(content, &tb[rel], "{rel} differs between reruns");
            }
        }
    }
}
