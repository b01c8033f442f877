//! Dense feature-map arithmetic for the proposal network.
//!
//! Maps are stored as `f32` in row-major `(row, column, channel)` order.
//! Convolution sums are accumulated in `f64` and rounded once on store.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("input has {input} channels but kernels expect {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("kernel array holds {len} values, expected {expected}")]
    KernelLength { len: usize, expected: usize },
    #[error("bias has {len} values but there are {out} output channels")]
    BiasLength { len: usize, out: usize },
    #[error("slope array has {len} values but input has {channels} channels")]
    SlopeLength { len: usize, channels: usize },
    #[error("{op}: output would be empty for a {height}x{width} input")]
    EmptyOutput {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("{op}: {what} must be at least 1")]
    ZeroParameter { op: &'static str, what: &'static str },
    #[error("softmax needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
}

/// A `height x width x channels` map of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != height * width * channels {
            return Err(TensorError::DataLength {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// All channel values at one location.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    /// Copies a `height x width` window starting at `(top, left)`.
    /// Cells outside the map read as zero.
    pub fn crop_zero_padded(&self, top: isize, left: isize, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, self.channels, |r, c, ch| {
            let y = top + r as isize;
            let x = left + c as isize;
            if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
                0.0
            } else {
                self.get(y as usize, x as usize, ch)
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights laid out as `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    values: Vec<f32>,
}

impl ConvKernels {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        values: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let expected = out_channels * in_channels * kh * kw;
        if values.len() != expected {
            return Err(TensorError::KernelLength {
                len: values.len(),
                expected,
            });
        }
        if kh == 0 || kw == 0 {
            return Err(TensorError::ZeroParameter {
                op: "conv2d",
                what: "kernel size",
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            values,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, out: usize, input: usize, ky: usize, kx: usize) -> f32 {
        self.values[((out * self.in_channels + input) * self.kh + ky) * self.kw + kx]
    }

    /// Reorders to `[ky][kx][in][out]` so the inner loop runs over output channels.
    fn taps_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = ((ky * self.kw + kx) * self.in_channels + i) * self.out_channels + o;
                        out[dst] = self.get(o, i, ky, kx) as f64;
                    }
                }
            }
        }
        out
    }
}

fn conv_out_dim(input: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Zero-padded cross-correlation plus bias.
pub fn conv2d(
    input: &Tensor3,
    kernels: &ConvKernels,
    bias: &[f32],
    pad: usize,
    stride: usize,
) -> Result<Tensor3, TensorError> {
    if stride == 0 {
        return Err(TensorError::ZeroParameter {
            op: "conv2d",
            what: "stride",
        });
    }
    if input.channels != kernels.in_channels {
        return Err(TensorError::ChannelMismatch {
            input: input.channels,
            kernel: kernels.in_channels,
        });
    }
    if bias.len() != kernels.out_channels {
        return Err(TensorError::BiasLength {
            len: bias.len(),
            out: kernels.out_channels,
        });
    }
    let empty = TensorError::EmptyOutput {
        op: "conv2d",
        height: input.height,
        width: input.width,
    };
    let out_h = conv_out_dim(input.height, pad, kernels.kh, stride).ok_or(empty.clone())?;
    let out_w = conv_out_dim(input.width, pad, kernels.kw, stride).ok_or(empty.clone())?;
    if out_h == 0 || out_w == 0 || kernels.out_channels == 0 {
        return Err(empty);
    }

    let taps = kernels.taps_major();
    let n_out = kernels.out_channels;
    let n_in = kernels.in_channels;
    let mut acc = vec![0.0f64; n_out];
    let mut data = Vec::with_capacity(out_h * out_w * n_out);

    for oy in 0..out_h {
        for ox in 0..out_w {
            for (a, b) in acc.iter_mut().zip(bias) {
                *a = *b as f64;
            }
            for ky in 0..kernels.kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy as usize >= input.height {
                    continue;
                }
                for kx in 0..kernels.kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= input.width {
                        continue;
                    }
                    let px = input.pixel(iy as usize, ix as usize);
                    let tap = &taps[(ky * kernels.kw + kx) * n_in * n_out..][..n_in * n_out];
                    for (i, &x) in px.iter().enumerate() {
                        let x = x as f64;
                        for (a, w) in acc.iter_mut().zip(&tap[i * n_out..(i + 1) * n_out]) {
                            *a += x * w;
                        }
                    }
                }
            }
            data.extend(acc.iter().map(|&a| a as f32));
        }
    }
    Tensor3::new(out_h, out_w, n_out, data)
}

/// Number of ceil-mode pooling windows along one axis. Every window starts
/// inside the input; the last one may be cut short by the border.
pub fn pool_out_dim(input: usize, k: usize, stride: usize) -> usize {
    let mut n = input.saturating_sub(k).div_ceil(stride) + 1;
    while n > 1 && (n - 1) * stride >= input {
        n -= 1;
    }
    n
}

/// Ceil-mode max pooling; border windows take the max over in-bounds cells.
pub fn maxpool(input: &Tensor3, k: usize, stride: usize) -> Result<Tensor3, TensorError> {
    if k == 0 {
        return Err(TensorError::ZeroParameter {
            op: "maxpool",
            what: "kernel size",
        });
    }
    if stride == 0 {
        return Err(TensorError::ZeroParameter {
            op: "maxpool",
            what: "stride",
        });
    }
    if input.height == 0 || input.width == 0 {
        return Err(TensorError::EmptyOutput {
            op: "maxpool",
            height: input.height,
            width: input.width,
        });
    }
    let out_h = pool_out_dim(input.height, k, stride);
    let out_w = pool_out_dim(input.width, k, stride);
    let ch = input.channels;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    let mut best = vec![f32::NEG_INFINITY; ch];
    for oy in 0..out_h {
        let y0 = oy * stride;
        let y1 = (y0 + k).min(input.height);
        for ox in 0..out_w {
            let x0 = ox * stride;
            let x1 = (x0 + k).min(input.width);
            best.fill(f32::NEG_INFINITY);
            for y in y0..y1 {
                for x in x0..x1 {
                    for (b, &v) in best.iter_mut().zip(input.pixel(y, x)) {
                        if v > *b {
                            *b = v;
                        }
                    }
                }
            }
            data.extend_from_slice(&best);
        }
    }
    Tensor3::new(out_h, out_w, ch, data)
}

/// Per-channel parametric ReLU. Zero slopes give a plain ReLU.
pub fn prelu(input: &Tensor3, slopes: &[f32]) -> Result<Tensor3, TensorError> {
    if slopes.len() != input.channels {
        return Err(TensorError::SlopeLength {
            len: slopes.len(),
            channels: input.channels,
        });
    }
    let mut out = input.clone();
    if input.channels == 0 {
        return Ok(out);
    }
    for px in out.data.chunks_exact_mut(input.channels) {
        for (v, &a) in px.iter_mut().zip(slopes) {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
    Ok(out)
}

/// Softmax across channels at every location.
pub fn softmax_channels(input: &Tensor3) -> Result<Tensor3, TensorError> {
    if input.channels < 2 {
        return Err(TensorError::TooFewChannels(input.channels));
    }
    let mut out = input.clone();
    let mut exps = vec![0.0f64; input.channels];
    for px in out.data.chunks_exact_mut(input.channels) {
        let max = px.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut sum = 0.0;
        for (e, &v) in exps.iter_mut().zip(px.iter()) {
            *e = (v as f64 - max).exp();
            sum += *e;
        }
        for (v, e) in px.iter_mut().zip(&exps) {
            *v = (e / sum) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
        Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(input: &Tensor3, k: &ConvKernels, bias: &[f32], pad: usize, stride: usize) -> Tensor3 {
        let oh = (input.height() + 2 * pad - k.kh()) / stride + 1;
        let ow = (input.width() + 2 * pad - k.kw()) / stride + 1;
        Tensor3::from_fn(oh, ow, k.out_channels(), |oy, ox, o| {
            let mut s = bias[o] as f64;
            for i in 0..k.in_channels() {
                for ky in 0..k.kh() {
                    for kx in 0..k.kw() {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if y >= 0 && x >= 0 && (y as usize) < input.height() && (x as usize) < input.width() {
                            s += input.get(y as usize, x as usize, i) as f64 * k.get(o, i, ky, kx) as f64;
                        }
                    }
                }
            }
            s as f32
        })
    }

    #[test]
    fn conv1_output_shape() {
        let input = Tensor3::zeros(12, 12, 3);
        let k = ConvKernels::new(16, 3, 3, 3, vec![0.0; 16 * 27]).unwrap();
        let out = conv2d(&input, &k, &[0.0; 16], 1, 1).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (12, 12, 16));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, 5, 7, 1);
        let k = ConvKernels::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d(&input, &k, &[0.0], 0, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (pad, stride) in [(0, 1), (1, 1), (0, 2), (2, 3)] {
            let input = random_tensor(&mut rng, 6, 6, 2);
            let vals = (0..4 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = ConvKernels::new(4, 2, 3, 3, vals).unwrap();
            let bias: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d(&input, &k, &bias, pad, stride).unwrap();
            let slow = naive_conv(&input, &k, &bias, pad, stride);
            assert_eq!(fast, slow, "pad {pad} stride {stride}");
        }
    }

    #[test]
    fn conv_errors() {
        let input = Tensor3::zeros(2, 2, 3);
        let k = ConvKernels::new(1, 2, 1, 1, vec![0.0; 2]).unwrap();
        assert!(matches!(
            conv2d(&input, &k, &[0.0], 0, 1),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let k = ConvKernels::new(1, 3, 3, 3, vec![0.0; 27]).unwrap();
        assert!(matches!(
            conv2d(&input, &k, &[0.0], 0, 1),
            Err(TensorError::EmptyOutput { .. })
        ));
        assert!(matches!(
            conv2d(&input, &k, &[0.0, 1.0], 1, 1),
            Err(TensorError::BiasLength { .. })
        ));
        assert!(ConvKernels::new(1, 3, 3, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn pool1_output_shape() {
        let out = maxpool(&Tensor3::zeros(12, 12, 16), 3, 2).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (6, 6, 16));
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let out = maxpool(&Tensor3::filled(9, 5, 2, 0.25), 3, 2).unwrap();
        assert_eq!((out.height(), out.width()), (4, 2));
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pool_matches_window_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, 14, 14, 1);
        let out = maxpool(&input, 3, 2).unwrap();
        assert_eq!((out.height(), out.width()), (7, 7));
        for oy in 0..7 {
            for ox in 0..7 {
                let mut m = f32::NEG_INFINITY;
                for y in 2 * oy..(2 * oy + 3).min(14) {
                    for x in 2 * ox..(2 * ox + 3).min(14) {
                        m = m.max(input.get(y, x, 0));
                    }
                }
                assert_eq!(out.get(oy, ox, 0), m);
            }
        }
    }

    #[test]
    fn pool_windows_start_inside() {
        assert_eq!(pool_out_dim(4, 1, 2), 2);
        assert_eq!(pool_out_dim(2, 3, 2), 1);
        assert_eq!(pool_out_dim(14, 3, 2), 7);
        assert!(maxpool(&Tensor3::zeros(0, 3, 1), 3, 2).is_err());
    }

    #[test]
    fn prelu_cases() {
        let t = Tensor3::new(1, 2, 2, vec![1.0, -2.0, 0.0, 3.0]).unwrap();
        let out = prelu(&t, &[0.5, 0.25]).unwrap();
        assert_eq!(out.data(), &[1.0, -0.5, 0.0, 3.0]);
        let relu = prelu(&t, &[0.0, 0.0]).unwrap();
        assert_eq!(relu.data(), &[1.0, 0.0, 0.0, 3.0]);
        let pos = Tensor3::filled(2, 2, 2, 0.5);
        assert_eq!(prelu(&pos, &[0.1, 0.9]).unwrap(), pos);
        assert!(matches!(prelu(&t, &[0.1]), Err(TensorError::SlopeLength { .. })));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_channels(&Tensor3::filled(2, 3, 4, 1.5)).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let lim = softmax_channels(&Tensor3::new(1, 1, 2, vec![0.0, 200.0]).unwrap()).unwrap();
        assert!(lim.get(0, 0, 0) < 1e-30);
        assert_eq!(lim.get(0, 0, 1), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random_tensor(&mut rng, 2, 2, 5);
        let out = softmax_channels(&logits).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let z: f64 = logits.pixel(r, c).iter().map(|&v| (v as f64).exp()).sum();
                for ch in 0..5 {
                    let expect = (logits.get(r, c, ch) as f64).exp() / z;
                    // Storage is f32, so compare against the f32-rounded oracle.
                    assert!((out.get(r, c, ch) as f64 - expect as f32 as f64).abs() <= 1e-12);
                }
                let s: f64 = out.pixel(r, c).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(softmax_channels(&Tensor3::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn crop_reads_zero_outside() {
        let t = Tensor3::filled(2, 2, 1, 1.0);
        let c = t.crop_zero_padded(-1, -1, 4, 4);
        let ones = c.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 4);
        assert_eq!(c.get(0, 0, 0), 0.0);
        assert_eq!(c.get(1, 1, 0), 1.0);
    }
}
