//! Image pyramids for the fixed 12x12 receptive field.
//!
//! Level `k` has scale `s0 * f^k` with `s0 = 12 / min_face`, so a face of
//! `min_face` pixels fills one network window at the base level. Levels stop
//! once the shorter side would drop under 12 pixels. A sparse pyramid
//! (small `f`) can optionally get one extra level at `s0 / 2`.

use thiserror::Error;

use crate::network::WINDOW;
use crate::tensor::Tensor3;

/// Scales closer than this are the same level.
pub const SCALE_DEDUP_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("scale factor must be in (0, 1), got {0}")]
    ScaleFactor(f64),
    #[error("minimum face size must be at least 1 pixel, got {0}")]
    MinFace(f64),
    #[error("a {height}x{width} image is smaller than 12x12 at the base scale {scale}")]
    ImageTooSmall { height: usize, width: usize, scale: f64 },
    #[error("resize target must be at least 1x1, got {0}x{1}")]
    ZeroTarget(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidConfig {
    /// Ratio between consecutive level scales.
    pub scale_factor: f64,
    /// Smallest face, in original pixels, the pyramid must expose.
    pub min_face: f64,
    /// Add a level at half the base scale.
    pub extra_layer: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scale_factor: 0.25,
            min_face: 20.0,
            extra_layer: false,
        }
    }
}

impl PyramidConfig {
    pub fn new(scale_factor: f64, min_face: f64, extra_layer: bool) -> Result<Self, PyramidError> {
        let cfg = Self {
            scale_factor,
            min_face,
            extra_layer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(PyramidError::ScaleFactor(self.scale_factor));
        }
        if !(self.min_face >= 1.0 && self.min_face.is_finite()) {
            return Err(PyramidError::MinFace(self.min_face));
        }
        Ok(())
    }

    pub fn base_scale(&self) -> f64 {
        WINDOW as f64 / self.min_face
    }
}

/// Scale and pixel size of one level, without pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeometry {
    pub scale: f64,
    pub height: usize,
    pub width: usize,
}

impl LevelGeometry {
    fn at(scale: f64, height: usize, width: usize) -> Self {
        Self {
            scale,
            height: (height as f64 * scale).round() as usize,
            width: (width as f64 * scale).round() as usize,
        }
    }

    fn fits_window(&self) -> bool {
        self.height.min(self.width) >= WINDOW
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale: f64,
    pub image: Tensor3,
}

impl PyramidLevel {
    pub fn geometry(&self) -> LevelGeometry {
        LevelGeometry {
            scale: self.scale,
            height: self.image.height(),
            width: self.image.width(),
        }
    }
}

/// Anything with a level size, for workload accounting.
pub trait LevelSize {
    fn level_size(&self) -> (usize, usize);
}

impl LevelSize for LevelGeometry {
    fn level_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl LevelSize for PyramidLevel {
    fn level_size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }
}

/// Level scales and sizes for an `height x width` image, largest first.
pub fn pyramid_geometry(height: usize, width: usize, cfg: &PyramidConfig) -> Result<Vec<LevelGeometry>, PyramidError> {
    cfg.validate()?;
    let s0 = cfg.base_scale();
    let base = LevelGeometry::at(s0, height, width);
    if !base.fits_window() {
        return Err(PyramidError::ImageTooSmall {
            height,
            width,
            scale: s0,
        });
    }
    let mut levels = Vec::new();
    for k in 0.. {
        let level = LevelGeometry::at(s0 * cfg.scale_factor.powi(k), height, width);
        if !level.fits_window() {
            break;
        }
        levels.push(level);
    }
    if cfg.extra_layer {
        let extra = LevelGeometry::at(0.5 * s0, height, width);
        let duplicate = levels.iter().any(|l| (l.scale - extra.scale).abs() < SCALE_DEDUP_EPS);
        if extra.fits_window() && !duplicate {
            levels.push(extra);
            levels.sort_by(|a, b| b.scale.total_cmp(&a.scale));
        }
    }
    Ok(levels)
}

/// Resizes `image` into every level of the pyramid.
pub fn build_pyramid(image: &Tensor3, cfg: &PyramidConfig) -> Result<Vec<PyramidLevel>, PyramidError> {
    pyramid_geometry(image.height(), image.width(), cfg)?
        .into_iter()
        .map(|g| {
            Ok(PyramidLevel {
                scale: g.scale,
                image: resize_bilinear(image, g.height, g.width)?,
            })
        })
        .collect()
}

/// Total pixels processed across all levels.
pub fn pyramid_workload<L: LevelSize>(levels: &[L]) -> u64 {
    levels
        .iter()
        .map(|l| {
            let (h, w) = l.level_size();
            h as u64 * w as u64
        })
        .sum()
}

/// Bilinear resampling with pixel-center alignment: output pixel `x` samples
/// the input at `(x + 0.5) * in / out - 0.5`, clamped to the image.
pub fn resize_bilinear(image: &Tensor3, new_h: usize, new_w: usize) -> Result<Tensor3, PyramidError> {
    if new_h == 0 || new_w == 0 {
        return Err(PyramidError::ZeroTarget(new_h, new_w));
    }
    if new_h == image.height() && new_w == image.width() {
        return Ok(image.clone());
    }
    let ys = sample_taps(image.height(), new_h);
    let xs = sample_taps(image.width(), new_w);
    let ch = image.channels();
    let mut data = Vec::with_capacity(new_h * new_w * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let top = image.get(y0, x0, c) as f64 * (1.0 - fx) + image.get(y0, x1, c) as f64 * fx;
                let bottom = image.get(y1, x0, c) as f64 * (1.0 - fx) + image.get(y1, x1, c) as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(Tensor3::new(new_h, new_w, ch, data).expect("resize output size"))
}

fn sample_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    let last = input.saturating_sub(1) as f64;
    (0..output)
        .map(|x| {
            let src = ((x as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
