//! Evaluation metrics and report plumbing.

use crate::error::CoreError;
use crate::io::write_csv;
use crate::state::{DepthGrid, ImageGrid};
use crate::Result;

/// Mean absolute depth error in meters.
pub fn depth_mae(pred: &DepthGrid, truth: &DepthGrid) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(CoreError::shape(format!(
            "depth {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// MAE over the interior only, ignoring a `margin`-pixel boundary band.
/// Used when comparing against the periodic-boundary baseline.
pub fn depth_mae_interior(pred: &DepthGrid, truth: &DepthGrid, margin: usize) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(CoreError::shape(format!(
            "depth {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (h, w) = pred.dim();
    if h <= 2 * margin || w <= 2 * margin {
        return Err(CoreError::invalid(format!(
            "margin {margin} leaves no interior in a {h}x{w} grid"
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in margin..h - margin {
        for j in margin..w - margin {
            acc += (pred[[i, j]] - truth[[i, j]]).abs();
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1, single MSE across all
/// channels. Identical inputs return the +inf sentinel.
pub fn psnr(pred: &ImageGrid, truth: &ImageGrid) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(CoreError::shape(format!(
            "image {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mse = pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Per-scene evaluation record.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub scene_seed: u64,
    pub depth_mae: f64,
    pub psnr: f64,
}

/// A method's evaluation over a batch of scenes, exportable as CSV and a
/// short text summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub noise_sigma: f64,
    pub seed: u64,
    pub scenes: Vec<SceneEval>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, noise_sigma: f64, seed: u64) -> Self {
        EvalReport {
            method: method.into(),
            noise_sigma,
            seed,
            scenes: Vec::new(),
        }
    }

    pub fn push(&mut self, eval: SceneEval) {
        self.scenes.push(eval);
    }

    pub fn mean_depth_mae(&self) -> f64 {
        if self.scenes.is_empty() {
            return f64::NAN;
        }
        self.scenes.iter().map(|s| s.depth_mae).sum::<f64>() / self.scenes.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        if self.scenes.is_empty() {
            return f64::NAN;
        }
        self.scenes.iter().map(|s| s.psnr).sum::<f64>() / self.scenes.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .scenes
            .iter()
            .map(|s| {
                vec![
                    self.method.clone(),
                    format!("{}", self.noise_sigma),
                    format!("{}", s.scene_seed),
                    format!("{:.6}", s.depth_mae),
                    format!("{:.4}", s.psnr),
                ]
            })
            .collect();
        write_csv(
            path,
            &["method", "noise_sigma", "scene_seed", "depth_mae_m", "psnr_db"],
            &rows,
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "method={} sigma={} scenes={} mean_depth_mae={:.4} m mean_psnr={:.2} dB",
            self.method,
            self.noise_sigma,
            self.scenes.len(),
            self.mean_depth_mae(),
            self.mean_psnr()
        )
    }
}

/// Convenience for tests: iid Gaussian perturbation of an image.
pub fn perturbed(truth: &ImageGrid, sigma: f64, rng: &mut impl rand::RngCore) -> ImageGrid {
    let mut out = truth.clone();
    for v in out.iter_mut() {
        *v += sigma * crate::rng::standard_normal(rng);
    }
    out
}

/// Guard against silent NaN metrics in reports.
pub fn finite_or_err(value: f64, what: &str) -> Result<f64> {
    if value.is_nan() {
        return Err(CoreError::numerical(format!("{what} is NaN")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_in, Stream};
    use ndarray::{Array2, Array3};

    #[test]
    fn mae_hand_checks() {
        let a = Array2::from_shape_vec((2, 2), vec![2.0, 2.5, 3.0, 3.5]).unwrap();
        assert_eq!(depth_mae(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((depth_mae(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        // 4x4 random pair against an independently written accumulation.
        let mut rng = seeded(3, Stream::Misc);
        let p = Array2::from_shape_fn((4, 4), |_| uniform_in(&mut rng, 2.0, 4.0));
        let q = Array2::from_shape_fn((4, 4), |_| uniform_in(&mut rng, 2.0, 4.0));
        let mut hand = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                hand += (p[[i, j]] - q[[i, j]]).abs();
            }
        }
        assert!((depth_mae(&p, &q).unwrap() - hand / 16.0).abs() < 1e-15);
        assert!(depth_mae(&p, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn mae_is_symmetric_and_triangular() {
        let mut rng = seeded(4, Stream::Misc);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((3, 5), |_| uniform_in(&mut rng, 2.0, 4.0));
            let b = Array2::from_shape_fn((3, 5), |_| uniform_in(&mut rng, 2.0, 4.0));
            let c = Array2::from_shape_fn((3, 5), |_| uniform_in(&mut rng, 2.0, 4.0));
            let ab = depth_mae(&a, &b).unwrap();
            let ba = depth_mae(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let ac = depth_mae(&a, &c).unwrap();
            let cb = depth_mae(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-15);
        }
    }

    #[test]
    fn interior_mae_ignores_the_border() {
        let truth = Array2::from_elem((8, 8), 3.0);
        let mut pred = truth.clone();
        for j in 0..8 {
            pred[[0, j]] = 4.0;
            pred[[7, j]] = 4.0;
        }
        assert!(depth_mae(&pred, &truth).unwrap() > 0.0);
        assert_eq!(depth_mae_interior(&pred, &truth, 1).unwrap(), 0.0);
        assert!(depth_mae_interior(&pred, &truth, 4).is_err());
    }

    #[test]
    fn psnr_definitional_identity() {
        let mut rng = seeded(5, Stream::Misc);
        for trial in 0..20 {
            let truth = Array3::from_shape_fn((6, 6, 3), |_| uniform_in(&mut rng, 0.0, 1.0));
            let sigma = 0.001 + 0.01 * trial as f64;
            let noisy = perturbed(&truth, sigma, &mut rng);
            let e2 = (&noisy - &truth).iter().map(|v| v * v).sum::<f64>() / truth.len() as f64;
            let got = psnr(&noisy, &truth).unwrap();
            assert!((got - 10.0 * (1.0 / e2).log10()).abs() < 1e-12);
        }
        let x = Array3::from_elem((4, 4, 3), 0.5);
        assert!(psnr(&x, &x).unwrap().is_infinite());
    }

    #[test]
    fn report_aggregates_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut rep = EvalReport::new("dfd_dps", 0.01, 7);
        rep.push(SceneEval {
            scene_seed: 1,
            depth_mae: 0.02,
            psnr: 30.0,
        });
        rep.push(SceneEval {
            scene_seed: 2,
            depth_mae: 0.04,
            psnr: 34.0,
        });
        assert!((rep.mean_depth_mae() - 0.03).abs() < 1e-15);
        assert!((rep.mean_psnr() - 32.0).abs() < 1e-12);
        let p = dir.path().join("report.csv");
        rep.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,noise_sigma,scene_seed,depth_mae_m,psnr_db\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(rep.summary().contains("scenes=2"));
    }
}
