//! File formats.
//!
//! Four small container formats, each a one-line ASCII header followed by a
//! little-endian binary payload, chosen over ad hoc serialization so round
//! trips are bit-exact and failures carry byte offsets:
//!
//! * `FMAP1`: float maps, any (H, W, C) grid of f64.
//! * `CPSF1`: the calibrated coded PSF with its physical metadata.
//! * `SCHED1`: a noise schedule (betas plus derived-table checksums).
//! * `CKPT1`: denoiser training state (f32 params, momentum, step count).
//!
//! Plus 8/16-bit PNG import/export for images and depth maps, and a small
//! CSV writer shared by the evaluation reports and trajectory logs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::CoreError;
use crate::optics::CodedPsf;
use crate::prior::{DenoiserConfig, TinyDenoiser, TrainState};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::state::{DepthGrid, ImageGrid};
use crate::Result;

fn fmt_err(path: &Path, detail: impl Into<String>) -> CoreError {
    CoreError::format(path.display().to_string(), detail.into())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| fmt_err(path, format!("cannot read: {e}")))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| fmt_err(path, format!("cannot create: {e}")))?;
    f.write_all(bytes)
        .map_err(|e| fmt_err(path, format!("write failed: {e}")))
}

/// Split off the ASCII header line, returning (fields, payload offset).
fn header_line<'a>(bytes: &'a [u8], path: &Path, magic: &str) -> Result<(Vec<&'a str>, usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt_err(path, "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| fmt_err(path, "header is not ASCII"))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.first() != Some(&magic) {
        return Err(fmt_err(
            path,
            format!(
                "bad magic at byte 0: expected {magic}, found {:?}",
                fields.first().copied().unwrap_or("")
            ),
        ));
    }
    Ok((fields, nl + 1))
}

fn parse_field<T: std::str::FromStr>(fields: &[&str], i: usize, path: &Path) -> Result<T> {
    fields
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fmt_err(path, format!("bad or missing header field {i}")))
}

fn check_payload(bytes: &[u8], offset: usize, need: usize, path: &Path) -> Result<()> {
    let have = bytes.len() - offset;
    if have != need {
        return Err(fmt_err(
            path,
            format!("payload at byte {offset} is {have} bytes, expected {need}"),
        ));
    }
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, it: impl Iterator<Item = f64>) {
    for v in it {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn pull_f64s(bytes: &[u8], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()))
        .collect()
}

/// Write an (H, W, C) grid of f64 in iteration order.
pub fn write_float_map(path: impl AsRef<Path>, grid: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = grid.dim();
    let mut out = format!("FMAP1 {h} {w} {c}\n").into_bytes();
    push_f64s(&mut out, grid.iter().cloned());
    write_all(path, &out)
}

pub fn read_float_map(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (fields, off) = header_line(&bytes, path, "FMAP1")?;
    let h: usize = parse_field(&fields, 1, path)?;
    let w: usize = parse_field(&fields, 2, path)?;
    let c: usize = parse_field(&fields, 3, path)?;
    let n = h * w * c;
    check_payload(&bytes, off, n * 8, path)?;
    Array3::from_shape_vec((h, w, c), pull_f64s(&bytes[off..], n))
        .map_err(|e| fmt_err(path, format!("shape error: {e}")))
}

/// Depth maps ride the float-map format as (H, W, 1).
pub fn write_depth_map(path: impl AsRef<Path>, depth: &DepthGrid) -> Result<()> {
    let (h, w) = depth.dim();
    let grid = Array3::from_shape_vec((h, w, 1), depth.iter().cloned().collect()).unwrap();
    write_float_map(path, &grid)
}

pub fn read_depth_map(path: impl AsRef<Path>) -> Result<DepthGrid> {
    let path = path.as_ref();
    let grid = read_float_map(path)?;
    let (h, w, c) = grid.dim();
    if c != 1 {
        return Err(fmt_err(path, format!("expected 1 channel, found {c}")));
    }
    Ok(Array2::from_shape_vec((h, w), grid.iter().cloned().collect()).unwrap())
}

/// PSF container: size, physical metadata, three channel planes.
pub fn write_coded_psf(path: impl AsRef<Path>, psf: &CodedPsf) -> Result<()> {
    let path = path.as_ref();
    let k = psf.size();
    let mut out = format!(
        "CPSF1 {k} {} {}\n",
        psf.pixel_pitch, psf.reference_depth
    )
    .into_bytes();
    for c in 0..3 {
        push_f64s(&mut out, psf.kernel(c).iter().cloned());
    }
    write_all(path, &out)
}

pub fn read_coded_psf(path: impl AsRef<Path>) -> Result<CodedPsf> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (fields, off) = header_line(&bytes, path, "CPSF1")?;
    let k: usize = parse_field(&fields, 1, path)?;
    let pitch: f64 = parse_field(&fields, 2, path)?;
    let reference: f64 = parse_field(&fields, 3, path)?;
    check_payload(&bytes, off, 3 * k * k * 8, path)?;
    let plane = |i: usize| -> Array2<f64> {
        let vals = pull_f64s(&bytes[off + i * k * k * 8..], k * k);
        Array2::from_shape_vec((k, k), vals).unwrap()
    };
    CodedPsf::from_normalized([plane(0), plane(1), plane(2)], pitch, reference)
        .map_err(|e| fmt_err(path, format!("invalid stored PSF: {e}")))
}

/// Noise schedule: kind, step count, betas. The derived tables are stored
/// too and must match recomputation bit for bit, catching corruption.
pub fn write_schedule(path: impl AsRef<Path>, schedule: &NoiseSchedule) -> Result<()> {
    let path = path.as_ref();
    let kind = match schedule.kind() {
        ScheduleKind::Linear => "linear",
        ScheduleKind::Cosine => "cosine",
    };
    let n = schedule.len();
    let mut out = format!("SCHED1 {kind} {n}\n").into_bytes();
    push_f64s(&mut out, schedule.betas().iter().cloned());
    push_f64s(&mut out, schedule.alpha_bars().iter().cloned());
    write_all(path, &out)
}

pub fn read_schedule(path: impl AsRef<Path>) -> Result<NoiseSchedule> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (fields, off) = header_line(&bytes, path, "SCHED1")?;
    let kind = match fields.get(1) {
        Some(&"linear") => ScheduleKind::Linear,
        Some(&"cosine") => ScheduleKind::Cosine,
        other => {
            return Err(fmt_err(
                path,
                format!("unknown schedule kind {:?}", other.copied().unwrap_or(""))
            ))
        }
    };
    let n: usize = parse_field(&fields, 2, path)?;
    check_payload(&bytes, off, 2 * n * 8, path)?;
    let betas = pull_f64s(&bytes[off..], n);
    let stored_bars = pull_f64s(&bytes[off + n * 8..], n);
    let schedule = NoiseSchedule::from_betas(betas, kind)
        .map_err(|e| fmt_err(path, format!("invalid stored schedule: {e}")))?;
    if schedule
        .alpha_bars()
        .iter()
        .zip(stored_bars.iter())
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(fmt_err(
            path,
            "stored alpha_bar table does not match the betas; file corrupt",
        ));
    }
    Ok(schedule)
}

/// Denoiser training state: architecture, step count, f32 parameters and
/// momentum. Loading and resuming reproduces an uninterrupted run exactly.
pub fn write_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let path = path.as_ref();
    let cfg = state.model.config();
    let n = state.model.n_params();
    let mut out = format!(
        "CKPT1 {} {} {} {n}\n",
        cfg.hidden, cfg.time_features, state.step
    )
    .into_bytes();
    for p in state.model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for m in &state.momentum {
        out.extend_from_slice(&m.to_le_bytes());
    }
    write_all(path, &out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (fields, off) = header_line(&bytes, path, "CKPT1")?;
    let cfg = DenoiserConfig {
        hidden: parse_field(&fields, 1, path)?,
        time_features: parse_field(&fields, 2, path)?,
    };
    let step: u64 = parse_field(&fields, 3, path)?;
    let n: usize = parse_field(&fields, 4, path)?;
    check_payload(&bytes, off, 2 * n * 4, path)?;
    let pull = |start: usize| -> Vec<f32> {
        (0..n)
            .map(|i| {
                f32::from_le_bytes(bytes[start + i * 4..start + i * 4 + 4].try_into().unwrap())
            })
            .collect()
    };
    let model = TinyDenoiser::from_params(cfg, pull(off))
        .map_err(|e| fmt_err(path, format!("invalid stored parameters: {e}")))?;
    TrainState::from_parts(model, pull(off + n * 4), step)
        .map_err(|e| fmt_err(path, format!("invalid stored state: {e}")))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 8-bit RGB PNG of a [0,1] image.
pub fn write_rgb_png(path: impl AsRef<Path>, image: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(fmt_err(path, format!("need 3 channels for RGB PNG, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([
                    to_u8(image[[i, j, 0]]),
                    to_u8(image[[i, j, 1]]),
                    to_u8(image[[i, j, 2]]),
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| fmt_err(path, format!("PNG encode failed: {e}")))
}

/// Read an RGB PNG back to [0,1] at its stored bit depth.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| fmt_err(path, format!("PNG decode failed: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    match img {
        image::DynamicImage::ImageRgb16(buf) => {
            for i in 0..h {
                for j in 0..w {
                    let px = buf.get_pixel(j as u32, i as u32);
                    for c in 0..3 {
                        out[[i, j, c]] = px.0[c] as f64 / 65535.0;
                    }
                }
            }
        }
        other => {
            let buf = other.to_rgb8();
            for i in 0..h {
                for j in 0..w {
                    let px = buf.get_pixel(j as u32, i as u32);
                    for c in 0..3 {
                        out[[i, j, c]] = px.0[c] as f64 / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 16-bit grayscale PNG of a [0,1] grid (depth maps after normalization).
pub fn write_gray_png16(path: impl AsRef<Path>, grid: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = grid.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(j as u32, i as u32, image::Luma([to_u16(grid[[i, j]])]));
        }
    }
    buf.save(path)
        .map_err(|e| fmt_err(path, format!("PNG encode failed: {e}")))
}

pub fn read_gray_png16(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| fmt_err(path, format!("PNG decode failed: {e}")))?;
    let buf = img.to_luma16();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = buf.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0;
        }
    }
    Ok(out)
}

/// Minimal CSV writer: quoted nothing, caller formats the cells.
pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_all(path, out.as_bytes())
}
