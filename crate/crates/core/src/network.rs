//! The 12x12 multi-label proposal network and its fully-convolutional use.
//!
//! The layer stack is fixed:
//!
//! | layer | kernel | output for a 12x12x3 patch |
//! |-------|--------|----------------------------|
//! | conv1 (pad 1) + PReLU | 3x3 | 12x12x16 |
//! | pool1 (stride 2, ceil) | 3x3 | 6x6x16 |
//! | conv2 + PReLU | 3x3 | 4x4x32 |
//! | conv3 + PReLU | 3x3 | 2x2x32 |
//! | conv4 + PReLU | 2x2 | 1x1x64 |
//! | conv5 + softmax | 1x1 | 1x1xC |
//!
//! Run over a whole image the same stack yields one class distribution per
//! grid cell; cell `(r, c)` corresponds to the 12x12 window with top-left
//! `(2c, 2r)` in the input.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{self, ConvKernels, Tensor3, TensorError};

/// Side of the square input window seen by one heatmap cell.
pub const WINDOW: usize = 12;
/// Input-pixel step between neighbouring heatmap cells.
pub const STRIDE: usize = 2;
/// Classes in the default model: background, face, eye, nose, mouth.
pub const DEFAULT_NUM_CLASSES: usize = 5;

pub const BACKGROUND_CLASS: usize = 0;
pub const FACE_CLASS: usize = 1;
pub const EYE_CLASS: usize = 2;
pub const NOSE_CLASS: usize = 3;
pub const MOUTH_CLASS: usize = 4;

const MAGIC: &[u8; 4] = b"FPNW";
const FORMAT_VERSION: u32 = 1;
const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("patch must be 12x12x3, got {0}x{1}x{2}")]
    PatchShape(usize, usize, usize),
    #[error("image must be at least 12x12 with 3 channels, got {0}x{1}x{2}")]
    ImageTooSmall(usize, usize, usize),
    #[error("network needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("layer {index} ({name}): {reason}")]
    Architecture { index: usize, name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("weight file truncated")]
    Truncated,
    #[error("unknown layer kind code {0}")]
    UnknownKind(u8),
    #[error("layer name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error("shape mismatch: {0}")]
    Shape(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
    Prelu,
    Softmax,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Pool => 1,
            LayerKind::Prelu => 2,
            LayerKind::Softmax => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv,
            1 => LayerKind::Pool,
            2 => LayerKind::Prelu,
            3 => LayerKind::Softmax,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, kernel: usize, stride: usize, pad: usize, cin: usize, cout: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel,
            stride,
            pad,
            in_channels: cin,
            out_channels: cout,
        }
    }

    fn same_shape(&self, other: &LayerSpec) -> bool {
        self.kind == other.kind
            && self.kernel == other.kernel
            && self.stride == other.stride
            && self.pad == other.pad
            && self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
    }
}

/// The fixed layer sequence for a network with `num_classes` outputs.
pub fn canonical_layers(num_classes: usize) -> Vec<LayerSpec> {
    use LayerKind::*;
    vec![
        LayerSpec::new("conv1", Conv, 3, 1, 1, 3, 16),
        LayerSpec::new("prelu1", Prelu, 1, 1, 0, 16, 16),
        LayerSpec::new("pool1", Pool, 3, 2, 0, 16, 16),
        LayerSpec::new("conv2", Conv, 3, 1, 0, 16, 32),
        LayerSpec::new("prelu2", Prelu, 1, 1, 0, 32, 32),
        LayerSpec::new("conv3", Conv, 3, 1, 0, 32, 32),
        LayerSpec::new("prelu3", Prelu, 1, 1, 0, 32, 32),
        LayerSpec::new("conv4", Conv, 2, 1, 0, 32, 64),
        LayerSpec::new("prelu4", Prelu, 1, 1, 0, 64, 64),
        LayerSpec::new("conv5", Conv, 1, 1, 0, 64, num_classes),
        LayerSpec::new("prob", Softmax, 1, 1, 0, num_classes, num_classes),
    ]
}

/// Product of the layer strides.
pub fn composite_stride(layers: &[LayerSpec]) -> usize {
    layers.iter().map(|l| l.stride).product()
}

/// Heatmap grid size for an `height x width` input, or `None` if the
/// input is smaller than one window.
pub fn grid_dims(height: usize, width: usize) -> Option<(usize, usize)> {
    if height < WINDOW || width < WINDOW {
        return None;
    }
    let axis = |n: usize| tensor::pool_out_dim(n, 3, 2) - 5;
    Some((axis(height), axis(width)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { kernels: ConvKernels, bias: Vec<f32> },
    Prelu { slopes: Vec<f32> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

impl Layer {
    /// Applies the layer. `pad_override` replaces a conv layer's padding.
    pub fn apply(&self, input: &Tensor3, pad_override: Option<usize>) -> Result<Tensor3, TensorError> {
        let s = &self.spec;
        match (&s.kind, &self.params) {
            (LayerKind::Conv, LayerParams::Conv { kernels, bias }) => {
                tensor::conv2d(input, kernels, bias, pad_override.unwrap_or(s.pad), s.stride)
            }
            (LayerKind::Pool, _) => tensor::maxpool(input, s.kernel, s.stride),
            (LayerKind::Prelu, LayerParams::Prelu { slopes }) => tensor::prelu(input, slopes),
            (LayerKind::Softmax, _) => tensor::softmax_channels(input),
            // Construction through NetworkWeights::new rules this out.
            _ => unreachable!("layer {} carries parameters of the wrong kind", s.name),
        }
    }
}

/// Validated parameters for the canonical layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    num_classes: usize,
    layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn new(num_classes: usize, layers: Vec<Layer>) -> Result<Self, NetworkError> {
        if num_classes < 2 {
            return Err(NetworkError::TooFewClasses(num_classes));
        }
        let canon = canonical_layers(num_classes);
        if layers.len() != canon.len() {
            return Err(NetworkError::Architecture {
                index: layers.len().min(canon.len()),
                name: String::new(),
                reason: format!("expected {} layers, found {}", canon.len(), layers.len()),
            });
        }
        for (index, (layer, want)) in layers.iter().zip(&canon).enumerate() {
            let fail = |reason: String| NetworkError::Architecture {
                index,
                name: layer.spec.name.clone(),
                reason,
            };
            if !layer.spec.same_shape(want) {
                return Err(fail(format!(
                    "layer {:?} does not match expected {:?}",
                    layer.spec, want
                )));
            }
            match &layer.params {
                LayerParams::Conv { kernels, bias } if want.kind == LayerKind::Conv => {
                    let ok = kernels.out_channels() == want.out_channels
                        && kernels.in_channels() == want.in_channels
                        && kernels.kh() == want.kernel
                        && kernels.kw() == want.kernel
                        && bias.len() == want.out_channels;
                    if !ok {
                        return Err(fail("convolution parameter shape".into()));
                    }
                }
                LayerParams::Prelu { slopes } if want.kind == LayerKind::Prelu => {
                    if slopes.len() != want.out_channels {
                        return Err(fail(format!(
                            "{} slopes for {} channels",
                            slopes.len(),
                            want.out_channels
                        )));
                    }
                }
                LayerParams::None if matches!(want.kind, LayerKind::Pool | LayerKind::Softmax) => {}
                _ => return Err(fail("parameters do not match layer kind".into())),
            }
        }
        Ok(Self { num_classes, layers })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Number of stored parameters.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.params {
                LayerParams::Conv { kernels, bias } => kernels.values().len() + bias.len(),
                LayerParams::Prelu { slopes } => slopes.len(),
                LayerParams::None => 0,
            })
            .sum()
    }

    /// Deterministic weights for tests and benchmarks. Kernel values are
    /// uniform in `±1/sqrt(fan_in)`, biases in `±0.1`, slopes in `(0.05, 0.5)`.
    pub fn random(seed: u64, num_classes: usize) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = canonical_layers(num_classes)
            .into_iter()
            .map(|spec| {
                let params = match spec.kind {
                    LayerKind::Conv => {
                        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
                        let r = 1.0 / (fan_in as f32).sqrt();
                        let n = spec.out_channels * fan_in;
                        let values = (0..n).map(|_| rng.random_range(-r..r)).collect();
                        let kernels =
                            ConvKernels::new(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel, values)?;
                        let bias = (0..spec.out_channels).map(|_| rng.random_range(-0.1..0.1)).collect();
                        LayerParams::Conv { kernels, bias }
                    }
                    LayerKind::Prelu => LayerParams::Prelu {
                        slopes: (0..spec.out_channels).map(|_| rng.random_range(0.05..0.5)).collect(),
                    },
                    _ => LayerParams::None,
                };
                Ok(Layer { spec, params })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Self::new(num_classes, layers)
    }

    fn run(&self, input: &Tensor3) -> Result<Tensor3, NetworkError> {
        let mut x = self.layers[0].apply(input, None)?;
        for layer in &self.layers[1..] {
            x = layer.apply(&x, None)?;
        }
        Ok(x)
    }

    /// Class probabilities for a single normalized 12x12x3 patch.
    pub fn forward_patch(&self, patch: &Tensor3) -> Result<Vec<f32>, NetworkError> {
        if patch.height() != WINDOW || patch.width() != WINDOW || patch.channels() != INPUT_CHANNELS {
            return Err(NetworkError::PatchShape(
                patch.height(),
                patch.width(),
                patch.channels(),
            ));
        }
        let out = self.run(patch)?;
        debug_assert_eq!((out.height(), out.width()), (1, 1));
        Ok(out.pixel(0, 0).to_vec())
    }

    /// Runs the network over a whole image. The returned set reports
    /// coordinates in the input's own pixels (level scale 1).
    pub fn forward_fcn(&self, image: &Tensor3) -> Result<HeatmapSet, NetworkError> {
        if image.height() < WINDOW || image.width() < WINDOW || image.channels() != INPUT_CHANNELS {
            return Err(NetworkError::ImageTooSmall(
                image.height(),
                image.width(),
                image.channels(),
            ));
        }
        let probs = self.run(image)?;
        debug_assert_eq!(
            Some((probs.height(), probs.width())),
            grid_dims(image.height(), image.width())
        );
        Ok(HeatmapSet::from_probabilities(
            &probs,
            1.0,
            image.height(),
            image.width(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 4 * self.parameter_count());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let u32le = |v: usize| (v as u32).to_le_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u32le(self.num_classes))?;
        w.write_all(&u32le(self.layers.len()))?;
        for layer in &self.layers {
            let s = &layer.spec;
            w.write_all(&u32le(s.name.len()))?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&[s.kind.code()])?;
            for v in [s.kernel, s.stride, s.pad, s.in_channels, s.out_channels] {
                w.write_all(&u32le(v))?;
            }
            let floats: Vec<&[f32]> = match &layer.params {
                LayerParams::Conv { kernels, bias } => vec![kernels.values(), bias],
                LayerParams::Prelu { slopes } => vec![slopes],
                LayerParams::None => vec![],
            };
            for v in floats.into_iter().flatten() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(r.take(4)?);
        if &magic != MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::Version(version));
        }
        let num_classes = r.u32()? as usize;
        let layer_count = r.u32()? as usize;
        let canon_len = canonical_layers(num_classes.max(2)).len();
        if layer_count != canon_len {
            return Err(NetworkError::Architecture {
                index: 0,
                name: String::new(),
                reason: format!("header declares {layer_count} layers, expected {canon_len}"),
            }
            .into());
        }
        let mut layers = Vec::with_capacity(layer_count);
        for index in 0..layer_count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::BadName)?
                .to_string();
            let code = r.take(1)?[0];
            let kind = LayerKind::from_code(code).ok_or(WeightsError::UnknownKind(code))?;
            let mut dims = [0usize; 5];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let [kernel, stride, pad, in_channels, out_channels] = dims;
            let spec = LayerSpec {
                name,
                kind,
                kernel,
                stride,
                pad,
                in_channels,
                out_channels,
            };
            // Check the declared shape before trusting it to size reads.
            let want = &canonical_layers(num_classes.max(2))[index];
            if !spec.same_shape(want) {
                return Err(NetworkError::Architecture {
                    index,
                    name: spec.name,
                    reason: format!("declared shape does not match expected {want:?}"),
                }
                .into());
            }
            let params = match kind {
                LayerKind::Conv => {
                    let values = r.f32s(out_channels * in_channels * kernel * kernel)?;
                    let bias = r.f32s(out_channels)?;
                    let kernels = ConvKernels::new(out_channels, in_channels, kernel, kernel, values)
                        .map_err(NetworkError::from)?;
                    LayerParams::Conv { kernels, bias }
                }
                LayerKind::Prelu => LayerParams::Prelu {
                    slopes: r.f32s(out_channels)?,
                },
                LayerKind::Pool | LayerKind::Softmax => LayerParams::None,
            };
            layers.push(Layer { spec, params });
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self::new(num_classes, layers)?)
    }

    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self, WeightsError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights, WeightsError> {
    NetworkWeights::from_bytes(&fs::read(path)?)
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn random_weights(seed: u64, num_classes: usize) -> Result<NetworkWeights, NetworkError> {
    NetworkWeights::random(seed, num_classes)
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).ok_or(WeightsError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(WeightsError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, WeightsError> {
        let bytes = self.take(n.checked_mul(4).ok_or(WeightsError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// A 2-D grid of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ScoreGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), rows * cols, "score grid size");
        Self { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.cols + col] = v;
    }
}

/// Per-class probability maps for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub maps: Vec<ScoreGrid>,
    /// Level pixels per original-image pixel.
    pub level_scale: f64,
    /// Size of the original image, used for clamping boxes.
    pub image_height: usize,
    pub image_width: usize,
}

impl HeatmapSet {
    pub const STRIDE: usize = STRIDE;
    pub const WINDOW: usize = WINDOW;

    pub fn from_probabilities(probs: &Tensor3, level_scale: f64, image_height: usize, image_width: usize) -> Self {
        let (rows, cols) = (probs.height(), probs.width());
        let maps = (0..probs.channels())
            .map(|ch| {
                let mut values = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        values.push(probs.get(r, c, ch));
                    }
                }
                ScoreGrid::new(rows, cols, values)
            })
            .collect();
        Self {
            maps,
            level_scale,
            image_height,
            image_width,
        }
    }

    /// Re-labels the set as belonging to a pyramid level of the given scale
    /// over an original image of the given size.
    pub fn at_level(mut self, level_scale: f64, image_height: usize, image_width: usize) -> Self {
        self.level_scale = level_scale;
        self.image_height = image_height;
        self.image_width = image_width;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }

    pub fn grid_rows(&self) -> usize {
        self.maps.first().map_or(0, |m| m.rows())
    }

    pub fn grid_cols(&self) -> usize {
        self.maps.first().map_or(0, |m| m.cols())
    }

    pub fn class_map(&self, class: usize) -> Option<&ScoreGrid> {
        self.maps.get(class)
    }

    /// Probability vector at one grid cell.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f32> {
        self.maps.iter().map(|m| m.get(row, col)).collect()
    }
}
