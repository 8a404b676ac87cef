//! Static figure rendering: polyline plots and side-by-side image strips,
//! composed in memory and written through the shared PNG writers. These are
//! quick diagnostics next to their CSVs, not publication graphics.

use ndarray::{Array2, Array3};

use dfd_core::state::{DepthGrid, DepthRange, ImageGrid};
use dfd_core::{CoreError, Result};

/// One polyline: y values over an implicit 0..n x axis.
pub struct Series<'a> {
    pub values: &'a [f64],
    pub color: [f64; 3],
}

pub const BLUE: [f64; 3] = [0.12, 0.35, 0.80];
pub const ORANGE: [f64; 3] = [0.90, 0.45, 0.10];

const MARGIN: usize = 10;

/// White background, gray frame, quartile gridlines, one polyline per
/// series. The y range spans all finite values with a small pad.
pub fn line_plot(h: usize, w: usize, series: &[Series]) -> ImageGrid {
    let mut img = Array3::from_elem((h, w, 3), 1.0);
    let (top, bottom) = (MARGIN, h - 1 - MARGIN);
    let (left, right) = (MARGIN, w - 1 - MARGIN);
    for q in 0..=4 {
        let r = top + q * (bottom - top) / 4;
        let c = left + q * (right - left) / 4;
        let shade = if q == 0 || q == 4 { 0.45 } else { 0.85 };
        for j in left..=right {
            set(&mut img, r, j, [shade; 3]);
        }
        for i in top..=bottom {
            set(&mut img, i, c, [shade; 3]);
        }
    }

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (hi - lo).max(1e-12);
    let (lo, hi) = (lo - pad, hi + pad);

    for s in series {
        let n = s.values.len();
        if n == 0 {
            continue;
        }
        let point = |k: usize| -> Option<(usize, usize)> {
            let v = s.values[k];
            if !v.is_finite() {
                return None;
            }
            let x = if n == 1 {
                (left + right) / 2
            } else {
                left + k * (right - left) / (n - 1)
            };
            let frac = (v - lo) / (hi - lo);
            let y = bottom - (frac * (bottom - top) as f64).round() as usize;
            Some((y.clamp(top, bottom), x))
        };
        let mut prev: Option<(usize, usize)> = None;
        for k in 0..n {
            let cur = point(k);
            if let (Some(a), Some(b)) = (prev, cur) {
                draw_segment(&mut img, a, b, s.color);
            } else if let Some(b) = cur {
                set(&mut img, b.0, b.1, s.color);
            }
            prev = cur;
        }
    }
    img
}

fn set(img: &mut ImageGrid, i: usize, j: usize, color: [f64; 3]) {
    for c in 0..3 {
        img[[i, j, c]] = color[c];
    }
}

fn draw_segment(img: &mut ImageGrid, a: (usize, usize), b: (usize, usize), color: [f64; 3]) {
    let steps = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let i = a.0 as f64 + t * (b.0 as f64 - a.0 as f64);
        let j = a.1 as f64 + t * (b.1 as f64 - a.1 as f64);
        set(img, i.round() as usize, j.round() as usize, color);
    }
}

/// Grayscale depth panel normalized over the camera's depth range.
pub fn depth_panel(depth: &DepthGrid, range: &DepthRange) -> ImageGrid {
    let span = (range.max - range.min).max(1e-12);
    let (h, w) = depth.dim();
    Array3::from_shape_fn((h, w, 3), |(i, j, _)| {
        ((depth[[i, j]] - range.min) / span).clamp(0.0, 1.0)
    })
}

/// Normalized depth for the 16-bit grayscale writer.
pub fn depth_norm(depth: &DepthGrid, range: &DepthRange) -> Array2<f64> {
    let span = (range.max - range.min).max(1e-12);
    depth.mapv(|d| ((d - range.min) / span).clamp(0.0, 1.0))
}

/// Panels left to right with a mid-gray gutter; all panels must share one
/// height.
pub fn hstack(panels: &[&ImageGrid], gutter: usize) -> Result<ImageGrid> {
    let h = panels
        .first()
        .ok_or_else(|| CoreError::invalid("empty panel list"))?
        .dim()
        .0;
    if panels.iter().any(|p| p.dim().0 != h) {
        return Err(CoreError::shape("panels must share one height".to_string()));
    }
    let total_w: usize =
        panels.iter().map(|p| p.dim().1).sum::<usize>() + gutter * (panels.len() - 1);
    let mut out = Array3::from_elem((h, total_w, 3), 0.5);
    let mut col = 0;
    for p in panels {
        let (ph, pw, _) = p.dim();
        for i in 0..ph {
            for j in 0..pw {
                for c in 0..3 {
                    out[[i, col + j, c]] = p[[i, j, c]];
                }
            }
        }
        col += pw + gutter;
    }
    Ok(out)
}
