//! Differentiable bilinear sampling. Out-of-bounds targets are masked out
//! rather than clamped, so boundary pixels drop out of the losses instead of
//! smearing edge values.
//!
//! At exact integer coordinates the derivative takes the right-continuous
//! branch (the cell to the right); the single exception is the far edge
//! `u == width - 1`, where only the left cell exists. Both choices are pinned
//! by tests.

use crate::geometry::FlowField;
use crate::image::ImageBuffer;

/// Sampled values plus a per-pixel validity mask. Masked-out pixels hold 0.
#[derive(Debug, Clone)]
pub struct SampleResult {
    width: usize,
    height: usize,
    channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SampleResult {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-pixel, per-channel derivatives of the sampled values with respect to
/// the sample coordinates; zero where the sample is masked out.
#[derive(Debug, Clone)]
pub struct SampleJacobian {
    pub d_u: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// Interpolation cell along one axis: base index and fractional offset.
/// None when the coordinate leaves `[0, len - 1]`.
#[inline]
fn cell(u: f64, len: usize) -> Option<(usize, f64)> {
    if u < 0.0 || u > (len - 1) as f64 {
        return None;
    }
    let i0 = (u.floor() as usize).min(len.saturating_sub(2));
    Some((i0, u - i0 as f64))
}

fn sample_impl(
    src: &ImageBuffer,
    flow: &FlowField,
    mut jacobian: Option<&mut SampleJacobian>,
) -> SampleResult {
    let (w, h, c) = (flow.width(), flow.height(), src.channels());
    let (sw, sh) = (src.width(), src.height());
    let mut out = SampleResult {
        width: w,
        height: h,
        channels: c,
        values: vec![0.0; w * h * c],
        mask: vec![false; w * h],
    };
    let data = src.data();
    for i in 0..w * h {
        if !flow.valid[i] {
            continue;
        }
        let (u, v) = flow.coords(i);
        let (Some((x0, fx)), Some((y0, fy))) = (cell(u, sw), cell(v, sh)) else {
            continue;
        };
        let x1 = (x0 + 1).min(sw - 1);
        let y1 = (y0 + 1).min(sh - 1);
        out.mask[i] = true;
        for ch in 0..c {
            let a = data[(y0 * sw + x0) * c + ch];
            let b = data[(y0 * sw + x1) * c + ch];
            let d = data[(y1 * sw + x0) * c + ch];
            let e = data[(y1 * sw + x1) * c + ch];
            let top = (1.0 - fx) * a + fx * b;
            let bot = (1.0 - fx) * d + fx * e;
            out.values[i * c + ch] = (1.0 - fy) * top + fy * bot;
            if let Some(jac) = jacobian.as_deref_mut() {
                jac.d_u[i * c + ch] = (1.0 - fy) * (b - a) + fy * (e - d);
                jac.d_v[i * c + ch] = (1.0 - fx) * (d - a) + fx * (e - b);
            }
        }
    }
    out
}

/// Pulls source intensities onto the flow's pixel grid.
pub fn bilinear_sample(src: &ImageBuffer, flow: &FlowField) -> SampleResult {
    sample_impl(src, flow, None)
}

/// Coordinate Jacobian of [`bilinear_sample`] at the flow's coordinates.
pub fn bilinear_sample_jacobian(src: &ImageBuffer, flow: &FlowField) -> SampleJacobian {
    let n = flow.width() * flow.height() * src.channels();
    let mut jac = SampleJacobian {
        d_u: vec![0.0; n],
        d_v: vec![0.0; n],
    };
    sample_impl(src, flow, Some(&mut jac));
    jac
}

/// Sample and Jacobian in one pass; what the optimizer uses.
pub fn sample_with_jacobian(src: &ImageBuffer, flow: &FlowField) -> (SampleResult, SampleJacobian) {
    let n = flow.width() * flow.height() * src.channels();
    let mut jac = SampleJacobian {
        d_u: vec![0.0; n],
        d_v: vec![0.0; n],
    };
    let out = sample_impl(src, flow, Some(&mut jac));
    (out, jac)
}
