//! Image and depth-map containers plus the resampling primitives everything
//! else is built on: bilinear resize (align-corners-false, edge-clamped),
//! horizontal flip and the fixed four-level pyramid.

use crate::error::{Error, Result};

/// Dense H x W x C buffer, row-major, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::BadChannelCount(channels));
        }
        if data.len() != width * height * channels {
            return Err(Error::BadBufferLength {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput {
                    what: "image buffer",
                    reason: format!("value {v} outside [0, 1]"),
                });
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mean absolute difference against another buffer of identical shape.
    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch");
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / self.data.len() as f64
    }
}

/// H x W map of strictly positive scalars with a validity mask. Used for both
/// depth (meters) and disparity (1/meters); the reciprocal of one is the
/// other wherever valid. Invalid entries are stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

/// Alias documenting intent at call sites that operate on 1/depth.
pub type DisparityMap = DepthMap;

impl DepthMap {
    /// Builds a map from raw values; zeros and non-finite entries become invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::BadBufferLength {
                width,
                height,
                channels: 1,
                got: values.len(),
            });
        }
        let mut mask = vec![false; values.len()];
        let mut clean = values;
        for (v, m) in clean.iter_mut().zip(mask.iter_mut()) {
            if v.is_finite() && *v > 0.0 {
                *m = true;
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            values: clean,
            mask,
        })
    }

    /// Builds a map with an explicit mask. Valid entries must be finite and
    /// strictly positive; invalid entries are normalized to 0.
    pub fn from_values_masked(
        width: usize,
        height: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != width * height || mask.len() != values.len() {
            return Err(Error::BadBufferLength {
                width,
                height,
                channels: 1,
                got: values.len().max(mask.len()),
            });
        }
        let mut clean = values;
        for (v, &m) in clean.iter_mut().zip(mask.iter()) {
            if m {
                if !v.is_finite() || *v <= 0.0 {
                    return Err(Error::InvalidInput {
                        what: "depth map",
                        reason: format!("value {v} marked valid but not strictly positive"),
                    });
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            values: clean,
            mask,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_values(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Element-wise reciprocal on valid entries: depth -> disparity and back.
    pub fn reciprocal(&self) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { 1.0 / v } else { 0.0 })
            .collect();
        DepthMap {
            width: self.width,
            height: self.height,
            values,
            mask: self.mask.clone(),
        }
    }

    pub fn flip_horizontal(&self) -> DepthMap {
        let mut values = vec![0.0; self.values.len()];
        let mut mask = vec![false; self.mask.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + (self.width - 1 - x);
                let dst = y * self.width + x;
                values[dst] = self.values[src];
                mask[dst] = self.mask[src];
            }
        }
        DepthMap {
            width: self.width,
            height: self.height,
            values,
            mask,
        }
    }

    /// Nearest-neighbor resize. Used to bring predictions up to ground-truth
    /// resolution for evaluation; never interpolates across depth edges.
    pub fn resize_nearest(&self, width: usize, height: usize) -> DepthMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut values = vec![0.0; width * height];
        let mut mask = vec![false; width * height];
        for y in 0..height {
            let src_y = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize)
                .min(self.height - 1);
            for x in 0..width {
                let src_x = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize)
                    .min(self.width - 1);
                let src = src_y * self.width + src_x;
                let dst = y * width + x;
                values[dst] = self.values[src];
                mask[dst] = self.mask[src];
            }
        }
        DepthMap {
            width,
            height,
            values,
            mask,
        }
    }

    /// Halves resolution with a mask-aware 2x2 average: invalid entries are
    /// left out of the mean and the result is invalid only if all four are.
    pub fn downsample_half_masked(&self) -> DepthMap {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut values = vec![0.0; w * h];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sx = 2 * x + dx;
                        let sy = 2 * y + dy;
                        if sx < self.width && sy < self.height && self.is_valid(sx, sy) {
                            sum += self.value(sx, sy);
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    values[y * w + x] = sum / n as f64;
                    mask[y * w + x] = true;
                }
            }
        }
        DepthMap {
            width: w,
            height: h,
            values,
            mask,
        }
    }
}

/// Number of pyramid levels used throughout.
pub const PYRAMID_LEVELS: usize = 4;

/// The four level sizes used by the multi-scale losses; level 0 is the input
/// resolution and each level halves both dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pyramid {
    levels: [(usize, usize); PYRAMID_LEVELS],
}

impl Pyramid {
    pub fn for_input(width: usize, height: usize) -> Result<Pyramid> {
        if width % 8 != 0 || height % 8 != 0 || width == 0 || height == 0 {
            return Err(Error::NotDivisibleBy8 {
                what: "pyramid input",
                width,
                height,
            });
        }
        let mut levels = [(0, 0); PYRAMID_LEVELS];
        for (i, level) in levels.iter_mut().enumerate() {
            *level = (width >> i, height >> i);
        }
        Ok(Pyramid { levels })
    }

    pub fn sizes(&self) -> &[(usize, usize); PYRAMID_LEVELS] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> (usize, usize) {
        self.levels[i]
    }
}

/// Per-axis bilinear resampling weights: output index i reads
/// `(1 - frac) * src[i0] + frac * src[i1]`.
fn axis_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Single-channel bilinear resize on a raw row-major slice.
pub(crate) fn resize_bilinear_slice(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let wx = axis_weights(src_w, dst_w);
    let wy = axis_weights(src_h, dst_h);
    let mut out = vec![0.0; dst_w * dst_h];
    for (y, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (x, &(x0, x1, fx)) in wx.iter().enumerate() {
            let top = (1.0 - fx) * src[y0 * src_w + x0] + fx * src[y0 * src_w + x1];
            let bot = (1.0 - fx) * src[y1 * src_w + x0] + fx * src[y1 * src_w + x1];
            out[y * dst_w + x] = (1.0 - fy) * top + fy * bot;
        }
    }
    out
}

/// Adjoint of [`resize_bilinear_slice`]: scatters an output-sized gradient
/// back onto the source grid with the same interpolation weights.
pub(crate) fn resize_bilinear_adjoint(
    grad_out: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let wx = axis_weights(src_w, dst_w);
    let wy = axis_weights(src_h, dst_h);
    let mut grad_src = vec![0.0; src_w * src_h];
    for (y, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (x, &(x0, x1, fx)) in wx.iter().enumerate() {
            let g = grad_out[y * dst_w + x];
            grad_src[y0 * src_w + x0] += (1.0 - fy) * (1.0 - fx) * g;
            grad_src[y0 * src_w + x1] += (1.0 - fy) * fx * g;
            grad_src[y1 * src_w + x0] += fy * (1.0 - fx) * g;
            grad_src[y1 * src_w + x1] += fy * fx * g;
        }
    }
    grad_src
}

/// Bilinear resize with edge clamping, pixel centers at integer coordinates
/// (align-corners-false). Resizing to the input size is exact.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    let c = img.channels;
    let wx = axis_weights(img.width, width);
    let wy = axis_weights(img.height, height);
    let mut data = vec![0.0; width * height * c];
    for (y, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (x, &(x0, x1, fx)) in wx.iter().enumerate() {
            for ch in 0..c {
                let a = img.data[(y0 * img.width + x0) * c + ch];
                let b = img.data[(y0 * img.width + x1) * c + ch];
                let d = img.data[(y1 * img.width + x0) * c + ch];
                let e = img.data[(y1 * img.width + x1) * c + ch];
                let top = (1.0 - fx) * a + fx * b;
                let bot = (1.0 - fx) * d + fx * e;
                let v = (1.0 - fy) * top + fy * bot;
                // Convex combination; clamp only shaves float dust at the ends.
                data[(y * width + x) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer {
        width,
        height,
        channels: c,
        data,
    }
}

/// Mirrors the image about its vertical center line.
pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let c = img.channels;
    let mut data = vec![0.0; img.data.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..c {
                data[(y * img.width + x) * c + ch] =
                    img.data[(y * img.width + (img.width - 1 - x)) * c + ch];
            }
        }
    }
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: c,
        data,
    }
}

/// Builds the four-level pyramid by repeated halving. Level 0 is the input.
pub fn build_pyramid(img: &ImageBuffer) -> Result<Vec<ImageBuffer>> {
    let pyramid = Pyramid::for_input(img.width, img.height)?;
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    levels.push(img.clone());
    for i in 1..PYRAMID_LEVELS {
        let (w, h) = pyramid.level(i);
        let prev = &levels[i - 1];
        levels.push(resize_bilinear(prev, w, h));
    }
    Ok(levels)
}
