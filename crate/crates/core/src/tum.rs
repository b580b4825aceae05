//! TUM-style dataset IO: association files, 16-bit depth PNGs, masks,
//! calibration, and prior-twist files.
//!
//! An association file lists `rgb_ts rgb_path depth_ts depth_path` per line,
//! `#` starts a comment, and paths are resolved relative to the file itself.
//! Depth PNGs are 16-bit grayscale storing `meters * depth_scale`.

use crate::frame::{FrameError, Intrinsics, RgbdFrame};
use crate::img::Image;
use crate::se3::Twist;
use nalgebra::Vector3;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TumError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TumError + '_ {
    move |source| TumError::Io { path: path.to_path_buf(), source }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> TumError + '_ {
    move |source| TumError::Image { path: path.to_path_buf(), source }
}

/// Non-comment, non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Loads a full RGB-D sequence through its association file. Frames come back
/// sorted by RGB timestamp, which also becomes the frame timestamp.
pub fn load_tum_sequence(
    assoc_path: &Path,
    intrinsics: &Intrinsics,
    depth_scale: f64,
) -> Result<Vec<RgbdFrame>, TumError> {
    let text = fs::read_to_string(assoc_path).map_err(io_err(assoc_path))?;
    let dir = assoc_path.parent().unwrap_or(Path::new("."));

    let mut entries: Vec<(f64, PathBuf, PathBuf)> = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(TumError::Parse {
                path: assoc_path.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 fields (rgb_ts rgb depth_ts depth), got {}", tokens.len()),
            });
        }
        let ts: f64 = tokens[0].parse().map_err(|_| TumError::Parse {
            path: assoc_path.to_path_buf(),
            line: line_no,
            msg: format!("bad timestamp {:?}", tokens[0]),
        })?;
        entries.push((ts, dir.join(tokens[1]), dir.join(tokens[3])));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut frames = Vec::with_capacity(entries.len());
    for (ts, rgb_path, depth_path) in entries {
        let intensity = load_intensity_png(&rgb_path)?;
        let depth = load_depth_png(&depth_path, depth_scale)?;
        frames.push(RgbdFrame::new(intensity, depth, ts, *intrinsics)?);
    }
    Ok(frames)
}

/// Loads any RGB/gray PNG as normalized grayscale via the usual luma weights.
pub fn load_intensity_png(path: &Path) -> Result<Image<f32>, TumError> {
    let img = image::open(path).map_err(img_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new_fill(w, h, 0.0f32);
    for (x, y, px) in img.enumerate_pixels() {
        let [r, g, b] = px.0;
        let luma = (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0;
        out.set(x as usize, y as usize, luma);
    }
    Ok(out)
}

/// Writes intensity in `[0, 1]` as an 8-bit RGB PNG (gray values).
pub fn save_intensity_png(path: &Path, intensity: &Image<f32>) -> Result<(), TumError> {
    let (w, h) = (intensity.width(), intensity.height());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = (intensity.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        px.0 = [v, v, v];
    }
    img.save(path).map_err(img_err(path))
}

pub fn load_depth_png(path: &Path, depth_scale: f64) -> Result<Image<f32>, TumError> {
    let img = image::open(path).map_err(img_err(path))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new_fill(w, h, 0.0f32);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, (px.0[0] as f64 / depth_scale) as f32);
    }
    Ok(out)
}

pub fn save_depth_png(path: &Path, depth: &Image<f32>, depth_scale: f64) -> Result<(), TumError> {
    let (w, h) = (depth.width(), depth.height());
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let d = depth.get(x as usize, y as usize) as f64;
        px.0[0] = (d * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16;
    }
    img.save(path).map_err(img_err(path))
}

/// Masks are 8-bit grayscale, 255 = dynamic. Loads as boolean "dynamic".
pub fn load_mask_png(path: &Path) -> Result<Image<bool>, TumError> {
    let img = image::open(path).map_err(img_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new_fill(w, h, false);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, px.0[0] >= 128);
    }
    Ok(out)
}

pub fn save_mask_png(path: &Path, dynamic: &Image<bool>) -> Result<(), TumError> {
    let (w, h) = (dynamic.width(), dynamic.height());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0[0] = if dynamic.get(x as usize, y as usize) { 255 } else { 0 };
    }
    img.save(path).map_err(img_err(path))
}

/// Per-frame static score image, stored as 8-bit gray `round(gamma * 255)`.
pub fn save_gamma_png(path: &Path, gamma: &Image<f32>) -> Result<(), TumError> {
    let (w, h) = (gamma.width(), gamma.height());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0[0] = (gamma.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.save(path).map_err(img_err(path))
}

pub fn load_gamma_png(path: &Path) -> Result<Image<f32>, TumError> {
    let img = image::open(path).map_err(img_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new_fill(w, h, 1.0f32);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, px.0[0] as f32 / 255.0);
    }
    Ok(out)
}

/// Prior twists: one per frame pair, six floats per line in `(v, w)` order.
pub fn load_priors(path: &Path) -> Result<Vec<Twist>, TumError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| TumError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: "non-numeric twist component".into(),
        })?;
        if vals.len() != 6 {
            return Err(TumError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 6 twist components, got {}", vals.len()),
            });
        }
        out.push(Twist::new(
            Vector3::new(vals[0], vals[1], vals[2]),
            Vector3::new(vals[3], vals[4], vals[5]),
        ));
    }
    Ok(out)
}

pub fn save_priors(path: &Path, priors: &[Twist]) -> Result<(), TumError> {
    let mut text = String::from("# vx vy vz wx wy wz (one inter-frame twist per line)\n");
    for t in priors {
        text.push_str(&format!(
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            t.v.x, t.v.y, t.v.z, t.w.x, t.w.y, t.w.z
        ));
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Single-line pinhole calibration: `fx fy cx cy width height`.
pub fn load_calibration(path: &Path) -> Result<Intrinsics, TumError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (line_no, line) = content_lines(&text).next().ok_or_else(|| TumError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty calibration file".into(),
    })?;
    let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
    let vals = vals.map_err(|_| TumError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: "non-numeric calibration value".into(),
    })?;
    if vals.len() != 6 {
        return Err(TumError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected `fx fy cx cy width height`, got {} values", vals.len()),
        });
    }
    Intrinsics::new(vals[0], vals[1], vals[2], vals[3], vals[4] as usize, vals[5] as usize)
        .map_err(TumError::from)
}

pub fn save_calibration(path: &Path, k: &Intrinsics) -> Result<(), TumError> {
    let text = format!(
        "# fx fy cx cy width height\n{:.9} {:.9} {:.9} {:.9} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn depth_png_round_trip_is_lossless_up_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut depth = Image::new_fill(8, 4, 0.0f32);
        for (i, d) in depth.data_mut().iter_mut().enumerate() {
            *d = 0.3 + 0.01 * i as f32;
        }
        depth.set(3, 1, 0.0); // dropouts survive the round trip
        save_depth_png(&path, &depth, 5000.0).unwrap();
        let back = load_depth_png(&path, 5000.0).unwrap();
        for (a, b) in depth.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 5000.0 + 1e-7, "{a} vs {b}");
        }
        assert_eq!(back.get(3, 1), 0.0);
    }

    #[test]
    fn intensity_png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let mut intensity = Image::new_fill(4, 4, 0.0f32);
        for (i, v) in intensity.data_mut().iter_mut().enumerate() {
            *v = i as f32 / 16.0;
        }
        save_intensity_png(&path, &intensity).unwrap();
        let back = load_intensity_png(&path).unwrap();
        for (a, b) in intensity.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn association_loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let assoc = dir.path().join("associations.txt");
        fs::write(&assoc, "# header\n0.0 rgb.png 0.0\n").unwrap();
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        let err = load_tum_sequence(&assoc, &k, 5000.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "missing line number in {msg:?}");
    }

    #[test]
    fn empty_association_file_yields_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let assoc = dir.path().join("associations.txt");
        fs::write(&assoc, "# nothing here\n").unwrap();
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        assert!(load_tum_sequence(&assoc, &k, 5000.0).unwrap().is_empty());
    }

    #[test]
    fn sequence_loads_sorted_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0, 4, 4).unwrap();
        let gray = Image::new_fill(4, 4, 0.5f32);
        let depth = Image::new_fill(4, 4, 1.0f32);
        for name in ["a", "b"] {
            save_intensity_png(&dir.path().join(format!("{name}.png")), &gray).unwrap();
            save_depth_png(&dir.path().join(format!("{name}_d.png")), &depth, 5000.0).unwrap();
        }
        let assoc = dir.path().join("associations.txt");
        fs::write(&assoc, "2.5 b.png 2.5 b_d.png\n1.5 a.png 1.5 a_d.png\n").unwrap();
        let frames = load_tum_sequence(&assoc, &k, 5000.0).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[0].timestamp < frames[1].timestamp);
        assert_relative_eq!(frames[0].depth.get(1, 1), 1.0, epsilon = 1e-4);
    }

    #[test]
    fn priors_round_trip_and_reject_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let twists = vec![
            Twist::new(Vector3::new(0.01, -0.02, 0.003), Vector3::new(0.001, 0.0, -0.004)),
            Twist::zero(),
        ];
        save_priors(&path, &twists).unwrap();
        let back = load_priors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(crate::se3::twist_distance(&twists[0], &back[0]) < 1e-9);

        fs::write(&path, "0.1 0.2 0.3 0.4 0.5\n").unwrap();
        let msg = load_priors(&path).unwrap_err().to_string();
        assert!(msg.contains(":1:"), "{msg}");
    }

    #[test]
    fn mask_and_gamma_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.png");
        let mut mask = Image::new_fill(4, 2, false);
        mask.set(2, 1, true);
        save_mask_png(&mpath, &mask).unwrap();
        assert_eq!(load_mask_png(&mpath).unwrap(), mask);

        let gpath = dir.path().join("g.png");
        let mut gamma = Image::new_fill(4, 2, 1.0f32);
        gamma.set(0, 0, 0.25);
        save_gamma_png(&gpath, &gamma).unwrap();
        let back = load_gamma_png(&gpath).unwrap();
        assert!((back.get(0, 0) - 0.25).abs() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.txt");
        let k = Intrinsics::new(270.0, 268.5, 159.5, 119.5, 320, 240).unwrap();
        save_calibration(&path, &k).unwrap();
        let back = load_calibration(&path).unwrap();
        assert_eq!(back, k);
    }
}
