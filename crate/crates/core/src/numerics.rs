//! Dense 2D/3D grids of `f64` and the handful of kernels the network and the
//! feature pipeline need: multi-channel convolution, max/average pooling,
//! channel concatenation and bilinear resampling.
//!
//! Layout is row-major; [`Grid3`] is channel-last, so the value at
//! `(y, x, c)` lives at `(y * width + x) * channels + c`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("grid extent must be positive, got {height}x{width}x{channels}")]
    EmptyExtent {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {actual} does not match extent (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("channel mismatch: kernel has {kernel} channels, input has {input}")]
    ChannelMismatch { kernel: usize, input: usize },
    #[error("kernel/window {window:?} larger than padded input {padded:?}")]
    WindowTooLarge {
        window: (usize, usize),
        padded: (usize, usize),
    },
    #[error("expected {expected} biases, got {actual}")]
    BiasCount { expected: usize, actual: usize },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("window {window:?} with stride {stride:?} does not tile {extent:?}")]
    NonCovering {
        extent: (usize, usize),
        window: (usize, usize),
        stride: (usize, usize),
    },
    #[error("spatial extent mismatch: {a:?} vs {b:?}")]
    SpatialMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("nothing to concatenate")]
    NoParts,
    #[error("channel {index} out of range for {channels} channels")]
    ChannelIndex { index: usize, channels: usize },
}

/// Single-channel real grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if height == 0 || width == 0 {
            return Err(ShapeError::EmptyExtent {
                height,
                width,
                channels: 1,
            });
        }
        if data.len() != height * width {
            return Err(ShapeError::DataLength {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid extent must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds a grid by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid extent must be positive");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Reads with coordinates clamped to the grid (replicated border).
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    /// Bilinear sample at a continuous position; coordinates outside the grid
    /// are clamped to the border.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multi-channel real grid, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ShapeError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ShapeError::EmptyExtent {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ShapeError::DataLength {
                expected,
                actual: data.len(),
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
        assert!(
            height > 0 && width > 0 && channels > 0,
            "grid extent must be positive"
        );
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    g.set(y, x, c, f(y, x, c));
                }
            }
        }
        g
    }

    /// Stacks single-channel grids of equal extent into one grid.
    pub fn from_channels(parts: &[Grid2]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::NoParts)?;
        let (h, w) = first.extent();
        for p in parts {
            if p.extent() != (h, w) {
                return Err(ShapeError::SpatialMismatch {
                    a: (h, w),
                    b: p.extent(),
                });
            }
        }
        let n = parts.len();
        let mut data = Vec::with_capacity(h * w * n);
        for i in 0..h * w {
            for p in parts {
                data.push(p.data[i]);
            }
        }
        Self::new(h, w, n, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Copies out one channel as a [`Grid2`].
    pub fn channel(&self, c: usize) -> Result<Grid2, ShapeError> {
        if c >= self.channels {
            return Err(ShapeError::ChannelIndex {
                index: c,
                channels: self.channels,
            });
        }
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Grid2::new(self.height, self.width, data)
    }

    /// Copies out channels `start..end`.
    pub fn channel_range(&self, start: usize, end: usize) -> Result<Grid3, ShapeError> {
        if end > self.channels || start >= end {
            return Err(ShapeError::ChannelIndex {
                index: end,
                channels: self.channels,
            });
        }
        let n = end - start;
        let mut data = Vec::with_capacity(self.height * self.width * n);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..end]);
        }
        Grid3::new(self.height, self.width, n, data)
    }
}

fn check_stride(stride: (usize, usize)) -> Result<(), ShapeError> {
    if stride.0 == 0 || stride.1 == 0 {
        Err(ShapeError::ZeroStride)
    } else {
        Ok(())
    }
}

/// Output length along one axis for a sliding window.
#[inline]
pub fn window_output_len(input: usize, window: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - window) / stride + 1
}

/// Multi-channel 2D convolution (cross-correlation). Every kernel spans all
/// input channels; output channel `k` is `bias[k] + Σ input · kernels[k]`
/// over the window. Padding cells read as zero.
pub fn conv2d_multi(
    input: &Grid3,
    kernels: &[Grid3],
    bias: &[f64],
    stride: (usize, usize),
    padding: usize,
) -> Result<Grid3, ShapeError> {
    check_stride(stride)?;
    if kernels.is_empty() {
        return Err(ShapeError::NoParts);
    }
    if bias.len() != kernels.len() {
        return Err(ShapeError::BiasCount {
            expected: kernels.len(),
            actual: bias.len(),
        });
    }
    let (kh, kw, kc) = kernels[0].shape();
    for k in kernels {
        if k.channels != input.channels {
            return Err(ShapeError::ChannelMismatch {
                kernel: k.channels,
                input: input.channels,
            });
        }
        if k.shape() != (kh, kw, kc) {
            return Err(ShapeError::SpatialMismatch {
                a: (kh, kw),
                b: (k.height, k.width),
            });
        }
    }
    let padded = (input.height + 2 * padding, input.width + 2 * padding);
    if kh > padded.0 || kw > padded.1 {
        return Err(ShapeError::WindowTooLarge {
            window: (kh, kw),
            padded,
        });
    }
    let out_h = window_output_len(input.height, kh, stride.0, padding);
    let out_w = window_output_len(input.width, kw, stride.1, padding);
    let nk = kernels.len();
    let cin = input.channels;
    let mut out = Grid3::zeros(out_h, out_w, nk);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let base = (oy * out_w + ox) * nk;
            for (k, kernel) in kernels.iter().enumerate() {
                let mut acc = bias[k];
                for dy in 0..kh {
                    let iy = (oy * stride.0 + dy) as isize - padding as isize;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = (ox * stride.1 + dx) as isize - padding as isize;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let ip = input.index(iy as usize, ix as usize, 0);
                        let kp = kernel.index(dy, dx, 0);
                        for c in 0..cin {
                            acc += input.data[ip + c] * kernel.data[kp + c];
                        }
                    }
                }
                out.data[base + k] = acc;
            }
        }
    }
    Ok(out)
}

/// Result of [`max_pool_with_argmax`]: pooled values plus, for each output
/// cell, the flat index into the input grid that supplied the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolOutput {
    pub pooled: Grid3,
    pub argmax: Vec<usize>,
}

/// Per-channel max pooling. Padding cells never win; ties resolve to the
/// first cell in row-major scan order.
pub fn max_pool_with_argmax(
    input: &Grid3,
    window: (usize, usize),
    stride: (usize, usize),
    padding: usize,
) -> Result<MaxPoolOutput, ShapeError> {
    check_stride(stride)?;
    if window.0 == 0 || window.1 == 0 {
        return Err(ShapeError::EmptyExtent {
            height: window.0,
            width: window.1,
            channels: 1,
        });
    }
    let padded = (input.height + 2 * padding, input.width + 2 * padding);
    if window.0 > padded.0 || window.1 > padded.1 {
        return Err(ShapeError::WindowTooLarge { window, padded });
    }
    // A window made only of padding would have no real cell to select.
    if padding >= window.0 || padding >= window.1 {
        return Err(ShapeError::WindowTooLarge { window, padded });
    }
    let out_h = window_output_len(input.height, window.0, stride.0, padding);
    let out_w = window_output_len(input.width, window.1, stride.1, padding);
    let ch = input.channels;
    let mut pooled = Grid3::zeros(out_h, out_w, ch);
    let mut argmax = vec![0usize; out_h * out_w * ch];
    for oy in 0..out_h {
        let y0 = (oy * stride.0) as isize - padding as isize;
        for ox in 0..out_w {
            let x0 = (ox * stride.1) as isize - padding as isize;
            for c in 0..ch {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for y in y0..y0 + window.0 as isize {
                    if y < 0 || y >= input.height as isize {
                        continue;
                    }
                    for x in x0..x0 + window.1 as isize {
                        if x < 0 || x >= input.width as isize {
                            continue;
                        }
                        let idx = input.index(y as usize, x as usize, c);
                        let v = input.data[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                if best_idx == usize::MAX {
                    return Err(ShapeError::WindowTooLarge { window, padded });
                }
                let o = pooled.index(oy, ox, c);
                pooled.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(MaxPoolOutput { pooled, argmax })
}

pub fn max_pool(
    input: &Grid3,
    window: (usize, usize),
    stride: (usize, usize),
    padding: usize,
) -> Result<Grid3, ShapeError> {
    max_pool_with_argmax(input, window, stride, padding).map(|o| o.pooled)
}

/// Per-channel average pooling without padding. The windows must tile the
/// input exactly: `(extent - window)` has to be a multiple of the stride on
/// both axes.
pub fn avg_pool(
    input: &Grid3,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Grid3, ShapeError> {
    check_stride(stride)?;
    let extent = (input.height, input.width);
    if window.0 == 0
        || window.1 == 0
        || window.0 > extent.0
        || window.1 > extent.1
        || (extent.0 - window.0) % stride.0 != 0
        || (extent.1 - window.1) % stride.1 != 0
    {
        return Err(ShapeError::NonCovering {
            extent,
            window,
            stride,
        });
    }
    let out_h = window_output_len(extent.0, window.0, stride.0, 0);
    let out_w = window_output_len(extent.1, window.1, stride.1, 0);
    let ch = input.channels;
    let area = (window.0 * window.1) as f64;
    let mut out = Grid3::zeros(out_h, out_w, ch);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for c in 0..ch {
                let mut acc = 0.0;
                for y in oy * stride.0..oy * stride.0 + window.0 {
                    for x in ox * stride.1..ox * stride.1 + window.1 {
                        acc += input.get(y, x, c);
                    }
                }
                out.set(oy, ox, c, acc / area);
            }
        }
    }
    Ok(out)
}

/// Concatenates grids along the channel axis in argument order.
pub fn concat_channels(parts: &[&Grid3]) -> Result<Grid3, ShapeError> {
    let first = parts.first().ok_or(ShapeError::NoParts)?;
    let (h, w) = (first.height, first.width);
    for p in parts {
        if (p.height, p.width) != (h, w) {
            return Err(ShapeError::SpatialMismatch {
                a: (h, w),
                b: (p.height, p.width),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.channels).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for i in 0..h * w {
        for p in parts {
            data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
        }
    }
    Grid3::new(h, w, total, data)
}

/// Corner-aligned bilinear resampling: output corners map onto input
/// corners. A single-sample output axis samples the input centre.
pub fn resample_bilinear(input: &Grid2, out_height: usize, out_width: usize) -> Grid2 {
    assert!(
        out_height > 0 && out_width > 0,
        "output extent must be positive"
    );
    let scale = |out: usize, inp: usize| -> Box<dyn Fn(usize) -> f64> {
        if out == 1 {
            let c = (inp - 1) as f64 / 2.0;
            Box::new(move |_| c)
        } else {
            let r = (inp - 1) as f64 / (out - 1) as f64;
            Box::new(move |i| i as f64 * r)
        }
    };
    let sy = scale(out_height, input.height);
    let sx = scale(out_width, input.width);
    Grid2::from_fn(out_height, out_width, |y, x| {
        input.sample_bilinear(sy(y), sx(x))
    })
}
