//! Camera intrinsics, RGB-D frames, and coarse-to-fine pyramids.
//!
//! Pixel `(x, y)` addresses continuous image coordinate `(x, y)` exactly, so
//! `project` and integer pixel indices share one convention. Depth images
//! store meters with 0.0 meaning "no reading".

use crate::img::Image;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point behind camera (z = {z:.6})")]
    BehindCamera { z: f64 },
    #[error("invalid depth {depth:.6} at back-projection")]
    InvalidDepth { depth: f64 },
    #[error("image dimensions {got:?} do not match intrinsics {expected:?}")]
    SizeMismatch { got: (usize, usize), expected: (usize, usize) },
    #[error("cannot build a {levels}-level pyramid from a {width}x{height} image")]
    PyramidTooDeep { levels: usize, width: usize, height: usize },
}

/// Pinhole camera model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, FrameError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(FrameError::InvalidIntrinsics(format!("fx = {fx}, fy = {fy} must be positive")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(FrameError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), FrameError> {
        if p.z <= 0.0 {
            return Err(FrameError::BehindCamera { z: p.z });
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Lifts pixel `(u, v)` at `depth` meters back into the camera frame.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, FrameError> {
        if depth <= 0.0 {
            return Err(FrameError::InvalidDepth { depth });
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Intrinsics of pyramid level `level`: all four parameters scaled by
    /// `2^-level`, dimensions halved accordingly.
    pub fn at_level(&self, level: usize) -> Intrinsics {
        let s = (1u64 << level) as f64;
        Intrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width >> level,
            height: self.height >> level,
        }
    }
}

/// One intensity + depth pair. Intensity is grayscale in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub intensity: Image<f32>,
    pub depth: Image<f32>,
    pub timestamp: f64,
    pub intrinsics: Intrinsics,
}

impl RgbdFrame {
    pub fn new(
        intensity: Image<f32>,
        depth: Image<f32>,
        timestamp: f64,
        intrinsics: Intrinsics,
    ) -> Result<Self, FrameError> {
        let expected = (intrinsics.width, intrinsics.height);
        for img in [&intensity, &depth] {
            let got = (img.width(), img.height());
            if got != expected {
                return Err(FrameError::SizeMismatch { got, expected });
            }
        }
        Ok(Self { intensity, depth, timestamp, intrinsics })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|d| **d > 0.0).count()
    }
}

/// Multi-scale pyramid; `levels[0]` is the full-resolution frame.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    pub levels: Vec<RgbdFrame>,
}

impl FramePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn full(&self) -> &RgbdFrame {
        &self.levels[0]
    }
}

/// Builds an `n_levels` pyramid by 2x2 averaging. Intensity averages all four
/// pixels; depth averages only valid (> 0) entries and writes 0 when the whole
/// block is invalid. Odd dimensions are cropped (not padded) to the largest
/// size divisible by `2^(n_levels-1)`.
pub fn build_pyramid(frame: &RgbdFrame, n_levels: usize) -> Result<FramePyramid, FrameError> {
    assert!(n_levels >= 1, "a pyramid needs at least one level");
    let factor = 1usize << (n_levels - 1);
    let w0 = frame.width() / factor * factor;
    let h0 = frame.height() / factor * factor;
    if w0 == 0 || h0 == 0 {
        return Err(FrameError::PyramidTooDeep {
            levels: n_levels,
            width: frame.width(),
            height: frame.height(),
        });
    }

    let base = if (w0, h0) == (frame.width(), frame.height()) {
        frame.clone()
    } else {
        crop(frame, w0, h0)
    };

    let mut levels = vec![base];
    for level in 1..n_levels {
        levels.push(downsample(&levels[level - 1]));
    }
    Ok(FramePyramid { levels })
}

fn crop(frame: &RgbdFrame, w: usize, h: usize) -> RgbdFrame {
    let mut intensity = Image::new_fill(w, h, 0.0f32);
    let mut depth = Image::new_fill(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            intensity.set(x, y, frame.intensity.get(x, y));
            depth.set(x, y, frame.depth.get(x, y));
        }
    }
    let mut k = frame.intrinsics;
    k.width = w;
    k.height = h;
    RgbdFrame { intensity, depth, timestamp: frame.timestamp, intrinsics: k }
}

fn downsample(src: &RgbdFrame) -> RgbdFrame {
    let w = src.width() / 2;
    let h = src.height() / 2;
    let mut intensity = Image::new_fill(w, h, 0.0f32);
    let mut depth = Image::new_fill(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let (x2, y2) = (2 * x, 2 * y);
            let i = src.intensity.get(x2, y2)
                + src.intensity.get(x2 + 1, y2)
                + src.intensity.get(x2, y2 + 1)
                + src.intensity.get(x2 + 1, y2 + 1);
            intensity.set(x, y, i * 0.25);

            let mut sum = 0.0f32;
            let mut n = 0u32;
            for d in [
                src.depth.get(x2, y2),
                src.depth.get(x2 + 1, y2),
                src.depth.get(x2, y2 + 1),
                src.depth.get(x2 + 1, y2 + 1),
            ] {
                if d > 0.0 {
                    sum += d;
                    n += 1;
                }
            }
            depth.set(x, y, if n > 0 { sum / n as f32 } else { 0.0 });
        }
    }
    let k = Intrinsics {
        fx: src.intrinsics.fx / 2.0,
        fy: src.intrinsics.fy / 2.0,
        cx: src.intrinsics.cx / 2.0,
        cy: src.intrinsics.cy / 2.0,
        width: w,
        height: h,
    };
    RgbdFrame { intensity, depth, timestamp: src.timestamp, intrinsics: k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(270.0, 268.0, 159.5, 119.5, 320, 240).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = test_intrinsics();
        let (u, v) = k.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(u, k.cx, epsilon = 1e-12);
        assert_relative_eq!(v, k.cy, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_and_invalid_depth_are_rejected() {
        let k = test_intrinsics();
        assert!(matches!(k.project(&Vector3::new(0.1, 0.1, 0.0)), Err(FrameError::BehindCamera { .. })));
        assert!(matches!(k.project(&Vector3::new(0.1, 0.1, -1.0)), Err(FrameError::BehindCamera { .. })));
        assert!(matches!(k.back_project(10.0, 10.0, 0.0), Err(FrameError::InvalidDepth { .. })));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 10.0, 10.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 100.0, 10.0, 100, 100).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 99.0, 10.0, 100, 100).is_ok());
    }

    proptest! {
        #[test]
        fn project_back_project_round_trip(
            u in 0.0f64..319.0,
            v in 0.0f64..239.0,
            d in 0.05f64..10.0,
        ) {
            let k = test_intrinsics();
            let p = k.back_project(u, v, d).unwrap();
            let (u2, v2) = k.project(&p).unwrap();
            prop_assert!((u2 - u).abs() < 1e-9);
            prop_assert!((v2 - v).abs() < 1e-9);
        }
    }

    fn ramp_frame(w: usize, h: usize) -> RgbdFrame {
        let k = Intrinsics::new(100.0, 100.0, w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h).unwrap();
        let mut intensity = Image::new_fill(w, h, 0.0f32);
        let mut depth = Image::new_fill(w, h, 0.0f32);
        for y in 0..h {
            for x in 0..w {
                intensity.set(x, y, (x + y * w) as f32);
                depth.set(x, y, 2.0);
            }
        }
        RgbdFrame::new(intensity, depth, 0.0, k).unwrap()
    }

    #[test]
    fn downsampling_averages_intensity_blocks() {
        let frame = ramp_frame(4, 4);
        let pyr = build_pyramid(&frame, 2).unwrap();
        let half = &pyr.levels[1];
        // Top-left block of the ramp: values 0, 1, 4, 5 -> mean 2.5.
        assert_relative_eq!(half.intensity.get(0, 0), 2.5, epsilon = 1e-6);
        assert_eq!(half.width(), 2);
    }

    #[test]
    fn depth_downsampling_averages_only_valid_readings() {
        let mut frame = ramp_frame(4, 4);
        frame.depth.set(0, 0, 0.0); // one dropout in the top-left block
        frame.depth.set(1, 0, 3.0);
        let pyr = build_pyramid(&frame, 2).unwrap();
        // Remaining readings 3.0, 2.0, 2.0 -> 7/3.
        assert_relative_eq!(pyr.levels[1].depth.get(0, 0), 7.0 / 3.0, epsilon = 1e-6);

        // A fully invalid block downsamples to "no reading".
        for (x, y) in [(2, 2), (3, 2), (2, 3), (3, 3)] {
            frame.depth.set(x, y, 0.0);
        }
        let pyr = build_pyramid(&frame, 2).unwrap();
        assert_eq!(pyr.levels[1].depth.get(1, 1), 0.0);
    }

    #[test]
    fn constant_depth_plane_stays_constant_across_levels() {
        let frame = ramp_frame(32, 16);
        let pyr = build_pyramid(&frame, 3).unwrap();
        for level in &pyr.levels {
            for d in level.depth.data() {
                assert_relative_eq!(*d, 2.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn mean_intensity_is_preserved_by_downsampling() {
        let frame = ramp_frame(32, 16);
        let pyr = build_pyramid(&frame, 3).unwrap();
        let mean = |img: &Image<f32>| img.data().iter().map(|v| *v as f64).sum::<f64>() / img.data().len() as f64;
        let m0 = mean(&pyr.levels[0].intensity);
        for level in &pyr.levels[1..] {
            assert_relative_eq!(mean(&level.intensity), m0, epsilon = 1e-6);
        }
    }

    #[test]
    fn odd_dimensions_are_cropped_to_pyramid_compatible_size() {
        let frame = ramp_frame(5, 7);
        let pyr = build_pyramid(&frame, 2).unwrap();
        assert_eq!((pyr.levels[0].width(), pyr.levels[0].height()), (4, 6));
        assert_eq!((pyr.levels[1].width(), pyr.levels[1].height()), (2, 3));
        // Cropping keeps the top-left content.
        assert_eq!(pyr.levels[0].intensity.get(3, 0), 3.0);
    }

    #[test]
    fn pyramid_deeper_than_the_image_errors() {
        let frame = ramp_frame(4, 4);
        assert!(matches!(build_pyramid(&frame, 4), Err(FrameError::PyramidTooDeep { .. })));
    }

    #[test]
    fn level_projection_is_consistent_with_scaled_intrinsics() {
        let k = test_intrinsics();
        let p = k.back_project(101.25, 33.5, 1.7).unwrap();
        let (u0, v0) = k.project(&p).unwrap();
        let (u1, v1) = k.at_level(1).project(&p).unwrap();
        assert_relative_eq!(u1, u0 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(v1, v0 / 2.0, epsilon = 1e-12);
    }
}
