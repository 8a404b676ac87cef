//! Deterministic synthetic RGBD scenes.
//!
//! Textured fronto-parallel rectangles scattered over a sloped textured
//! floor, nearer object winning per pixel. Stands in for rendered datasets:
//! procedural textures only, no external assets.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng::{index_in, seeded, uniform_in, Stream};
use crate::state::{DepthRange, RgbdState};
use crate::Result;

/// Procedural texture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Smooth value noise, bilinearly upsampled from a coarse lattice.
    #[default]
    Noise,
    /// Two-tone checkerboard with a random cell size.
    Checker,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub depth_range: DepthRange,
    /// Include the sloped floor plane behind the objects.
    pub floor: bool,
    /// Floor tilt across the image height as a fraction of the depth span.
    pub floor_slope: (f64, f64),
    pub texture: TextureKind,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            n_objects: 3,
            depth_range: DepthRange { min: 2.0, max: 4.0 },
            floor: true,
            floor_slope: (0.2, 0.8),
            texture: TextureKind::Noise,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(CoreError::invalid(format!(
                "scene must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        DepthRange::new(self.depth_range.min, self.depth_range.max)?;
        if !self.floor && self.n_objects == 0 {
            return Err(CoreError::invalid(
                "degenerate scene: no floor and no objects",
            ));
        }
        let (lo, hi) = self.floor_slope;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(CoreError::invalid(format!(
                "floor_slope must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// A generated scene plus its instance labels (0 = floor, k = object k),
/// kept so tests can tie depth discontinuities to object boundaries.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub state: RgbdState,
    pub instance: Array2<usize>,
}

fn smooth_noise_texture(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
) -> Array3<f64> {
    // Coarse random lattice, bilinear upsample; cheap band-limited texture.
    let cell = 4usize;
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let mut lattice = Array3::zeros((gh, gw, 3));
    for v in lattice.iter_mut() {
        *v = uniform_in(rng, lo, hi);
    }
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        let fi = i as f64 / cell as f64;
        let fj = j as f64 / cell as f64;
        let (i0, j0) = (fi.floor() as usize, fj.floor() as usize);
        let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
        lattice[[i0, j0, c]] * (1.0 - di) * (1.0 - dj)
            + lattice[[i0 + 1, j0, c]] * di * (1.0 - dj)
            + lattice[[i0, j0 + 1, c]] * (1.0 - di) * dj
            + lattice[[i0 + 1, j0 + 1, c]] * di * dj
    })
}

fn checker_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    let cell = 2 + index_in(rng, 4);
    let a: [f64; 3] = [
        uniform_in(rng, 0.1, 0.9),
        uniform_in(rng, 0.1, 0.9),
        uniform_in(rng, 0.1, 0.9),
    ];
    let b: [f64; 3] = [
        uniform_in(rng, 0.1, 0.9),
        uniform_in(rng, 0.1, 0.9),
        uniform_in(rng, 0.1, 0.9),
    ];
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        if (i / cell + j / cell) % 2 == 0 {
            a[c]
        } else {
            b[c]
        }
    })
}

fn texture(rng: &mut ChaCha8Rng, kind: TextureKind, h: usize, w: usize) -> Array3<f64> {
    match kind {
        TextureKind::Noise => smooth_noise_texture(rng, h, w, 0.1, 0.9),
        TextureKind::Checker => checker_texture(rng, h, w),
    }
}

/// Generate a scene deterministically from its spec.
pub fn generate_scene_detailed(spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let range = spec.depth_range;
    let mut rng = seeded(spec.seed, Stream::Scene);

    let mut rgb;
    let mut depth;
    let mut instance = Array2::zeros((h, w));
    if spec.floor {
        rgb = texture(&mut rng, spec.texture, h, w);
        // Ground plane: depth falls off linearly from the top row (far) to
        // the bottom row (near), tilt drawn from the configured span.
        let slope = uniform_in(&mut rng, spec.floor_slope.0, spec.floor_slope.1);
        let far = range.max;
        let near = range.max - slope * range.span();
        depth = Array2::from_shape_fn((h, w), |(i, _)| {
            let u = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
            far + (near - far) * u
        });
    } else {
        // No floor: objects will cover everything below; start at the far
        // plane so uncovered pixels stay valid.
        rgb = Array3::from_elem((h, w, 3), 0.5);
        depth = Array2::from_elem((h, w), range.max);
    }

    // Far-to-near painting keeps the nearer object on top.
    let mut rects = Vec::with_capacity(spec.n_objects);
    for id in 1..=spec.n_objects {
        let rh = (h / 4).max(2) + index_in(&mut rng, (h / 4).max(1));
        let rw = (w / 4).max(2) + index_in(&mut rng, (w / 4).max(1));
        let i0 = index_in(&mut rng, h - rh.min(h - 1));
        let j0 = index_in(&mut rng, w - rw.min(w - 1));
        let d = uniform_in(&mut rng, range.min, range.max);
        let tex = texture(&mut rng, spec.texture, rh, rw);
        rects.push((d, id, i0, j0, rh, rw, tex));
    }
    rects.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (d, id, i0, j0, rh, rw, tex) in rects {
        for i in 0..rh {
            for j in 0..rw {
                let (pi, pj) = (i0 + i, j0 + j);
                if pi >= h || pj >= w {
                    continue;
                }
                if d <= depth[[pi, pj]] {
                    depth[[pi, pj]] = d;
                    instance[[pi, pj]] = id;
                    for c in 0..3 {
                        rgb[[pi, pj, c]] = tex[[i, j, c]];
                    }
                }
            }
        }
    }

    for v in depth.iter_mut() {
        *v = range.clamp(*v);
    }
    Ok(GeneratedScene {
        state: RgbdState::new(rgb, depth)?,
        instance,
    })
}

/// Spec-driven scene generation; see [`generate_scene_detailed`] for the
/// variant that keeps instance labels.
pub fn generate_scene(spec: &SceneSpec) -> Result<RgbdState> {
    Ok(generate_scene_detailed(spec)?.state)
}

/// A textured background plane with a centered textured rectangle in front:
/// the controlled two-plane probe used by the depth-discrimination tests.
pub fn two_plane_scene(
    h: usize,
    w: usize,
    near_depth: f64,
    far_depth: f64,
    seed: u64,
) -> Result<RgbdState> {
    if !(near_depth < far_depth) {
        return Err(CoreError::invalid(format!(
            "need near < far, got {near_depth} vs {far_depth}"
        )));
    }
    let mut rng = seeded(seed, Stream::Scene);
    // Per-pixel noise, not the smooth lattice texture: defocus discrimination
    // needs energy above the blur kernels' first spectral zeros, and a probe
    // scene without it would be blind to depth by construction.
    let mut rgb = Array3::zeros((h, w, 3));
    for v in rgb.iter_mut() {
        *v = uniform_in(&mut rng, 0.05, 0.95);
    }
    let mut depth = Array2::from_elem((h, w), far_depth);
    for i in h / 4..h - h / 4 {
        for j in w / 4..w - w / 4 {
            depth[[i, j]] = near_depth;
        }
    }
    RgbdState::new(rgb, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_scene_exactly() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(
            a.rgb.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.rgb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = generate_scene(&SceneSpec {
            seed: 1,
            ..spec.clone()
        })
        .unwrap();
        assert!(a.depth != c.depth);
    }

    #[test]
    fn bare_floor_depth_is_linear_down_the_rows() {
        let spec = SceneSpec {
            n_objects: 0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let (h, w) = scene.depth.dim();
        // Constant along rows, linear along columns.
        for i in 0..h {
            for j in 1..w {
                assert_eq!(scene.depth[[i, j]], scene.depth[[i, 0]]);
            }
        }
        let d0 = scene.depth[[0, 0]];
        let d1 = scene.depth[[h - 1, 0]];
        assert!(d0 > d1, "top row should be farther");
        for i in 0..h {
            let expect = d0 + (d1 - d0) * i as f64 / (h - 1) as f64;
            assert!((scene.depth[[i, 0]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_support_stays_in_range_and_matches_instances() {
        let spec = SceneSpec {
            n_objects: 6,
            seed: 9,
            ..SceneSpec::default()
        };
        let scene = generate_scene_detailed(&spec).unwrap();
        let range = spec.depth_range;
        for d in scene.state.depth.iter() {
            assert!(range.contains(*d));
        }
        // Depth discontinuities only at instance-label changes.
        let (h, w) = scene.state.depth.dim();
        let floor_step = range.span() / (h as f64 - 1.0); // max slope of the floor
        for i in 0..h {
            for j in 1..w {
                let dd = (scene.state.depth[[i, j]] - scene.state.depth[[i, j - 1]]).abs();
                if dd > floor_step + 1e-12 {
                    assert_ne!(
                        scene.instance[[i, j]],
                        scene.instance[[i, j - 1]],
                        "depth jump without an object boundary at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let spec = SceneSpec {
            floor: false,
            n_objects: 0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec).is_err());
        let bad = SceneSpec {
            floor_slope: (0.9, 0.1),
            ..SceneSpec::default()
        };
        assert!(generate_scene(&bad).is_err());
    }

    #[test]
    fn two_plane_scene_has_exactly_two_depths() {
        let s = two_plane_scene(16, 16, 2.2, 3.4, 4).unwrap();
        let mut seen: Vec<u64> = s.depth.iter().map(|d| d.to_bits()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 2);
        assert!(two_plane_scene(16, 16, 3.4, 2.2, 4).is_err());
    }
}
