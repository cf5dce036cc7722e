//! The photometric training objective: L1 reconstruction, structural
//! similarity, edge-aware disparity smoothness, the two multi-scale
//! evaluation strategies and the weighted total. Losses are sums over valid
//! pixels, not means, and every term has an analytic gradient so a direct
//! optimizer can descend them.

use crate::error::{Error, Result};
use crate::geometry::{warp_coords, Intrinsics, RigidTransform};
use crate::image::{
    build_pyramid, resize_bilinear_slice, DepthMap, DisparityMap, ImageBuffer, Pyramid,
    PYRAMID_LEVELS,
};
use crate::sampler::{bilinear_sample, SampleResult};

/// Stabilization constants and window size for the structural-similarity
/// score. Defaults are the standard choices for unit-range images with a
/// uniform 3x3 window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    /// Full window side length; odd and at least 3.
    pub window: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: 3,
        }
    }
}

impl SsimParams {
    fn radius(&self) -> usize {
        assert!(
            self.window >= 3 && self.window % 2 == 1,
            "ssim window must be odd and >= 3, got {}",
            self.window
        );
        self.window / 2
    }
}

/// Weights of the four loss terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Reconstruction (L1) weight.
    pub alpha: f64,
    /// Structural-similarity weight.
    pub beta: f64,
    /// Smoothness weight, applied per scale.
    pub gamma: f64,
    /// 3D alignment weight, applied per scale.
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 0.15,
            gamma: 0.15,
            omega: 0.1,
        }
    }
}

/// A loss accumulated over masked pixels. `count == 0` flags that nothing was
/// valid (the sum is then 0 by definition, which callers may want to surface).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskedSum {
    pub sum: f64,
    pub count: usize,
}

impl MaskedSum {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// All loss terms of one frame pair plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstr: f64,
    pub ssim: f64,
    pub smooth_per_scale: [f64; PYRAMID_LEVELS],
    pub loss3d_per_scale: [f64; PYRAMID_LEVELS],
    pub total: f64,
}

/// How the four disparity scales enter the 2D losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleStrategy {
    /// Warp each level at its own resolution against downsampled images.
    NativePerLevel,
    /// Upsample each disparity level to the input resolution and warp there,
    /// so all 2D losses are evaluated at full image detail.
    UpsampleToInput,
}

/// Sum of absolute differences over valid pixels and channels.
pub fn reconstruction_loss(target: &ImageBuffer, warped: &SampleResult) -> MaskedSum {
    assert_eq!(target.width(), warped.width());
    assert_eq!(target.height(), warped.height());
    assert_eq!(target.channels(), warped.channels());
    let c = target.channels();
    let data = target.data();
    let mut out = MaskedSum::default();
    for i in 0..target.len_pixels() {
        if !warped.mask[i] {
            continue;
        }
        out.count += 1;
        for ch in 0..c {
            out.sum += (data[i * c + ch] - warped.values[i * c + ch]).abs();
        }
    }
    out
}

/// d(reconstruction_loss)/d(warped values); zero at masked pixels.
pub fn reconstruction_loss_grad(target: &ImageBuffer, warped: &SampleResult) -> Vec<f64> {
    let c = target.channels();
    let data = target.data();
    let mut grad = vec![0.0; warped.values.len()];
    for i in 0..target.len_pixels() {
        if !warped.mask[i] {
            continue;
        }
        for ch in 0..c {
            let d = warped.values[i * c + ch] - data[i * c + ch];
            grad[i * c + ch] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    grad
}

#[inline]
fn clamp_index(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

/// Uniform-window first and second moments around a center pixel, with
/// replicate padding at the image border.
fn window_stats(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    c: usize,
    ch: usize,
    px: usize,
    py: usize,
    radius: usize,
) -> WindowStats {
    let r = radius as isize;
    let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -r..=r {
        let yy = clamp_index(py as isize + dy, h);
        for dx in -r..=r {
            let xx = clamp_index(px as isize + dx, w);
            let xv = x[(yy * w + xx) * c + ch];
            let yv = y[(yy * w + xx) * c + ch];
            sx += xv;
            sy += yv;
            sxx += xv * xv;
            syy += yv * yv;
            sxy += xv * yv;
        }
    }
    let mu_x = sx / n;
    let mu_y = sy / n;
    WindowStats {
        mu_x,
        mu_y,
        var_x: sxx / n - mu_x * mu_x,
        var_y: syy / n - mu_y * mu_y,
        cov: sxy / n - mu_x * mu_y,
    }
}

fn ssim_from_stats(st: &WindowStats, p: &SsimParams) -> f64 {
    let a1 = 2.0 * st.mu_x * st.mu_y + p.c1;
    let a2 = 2.0 * st.cov + p.c2;
    let b1 = st.mu_x * st.mu_x + st.mu_y * st.mu_y + p.c1;
    let b2 = st.var_x + st.var_y + p.c2;
    (a1 * a2) / (b1 * b2)
}

/// Per-pixel structural similarity between two images of identical shape,
/// averaged over channels. Values never exceed 1.
pub fn ssim_map(x: &ImageBuffer, y: &ImageBuffer, params: &SsimParams) -> Vec<f64> {
    assert_eq!(x.width(), y.width());
    assert_eq!(x.height(), y.height());
    assert_eq!(x.channels(), y.channels());
    let (w, h, c) = (x.width(), x.height(), x.channels());
    let radius = params.radius();
    let mut map = vec![0.0; w * h];
    for py in 0..h {
        for px in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let st = window_stats(x.data(), y.data(), w, h, c, ch, px, py, radius);
                acc += ssim_from_stats(&st, params);
            }
            map[py * w + px] = (acc / c as f64).min(1.0);
        }
    }
    map
}

/// Mask with every center removed whose (border-clamped) window touches an
/// invalid pixel. Keeps partially-occluded windows out of the similarity sum.
fn erode_mask(mask: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for py in 0..h {
        'pixels: for px in 0..w {
            for dy in -r..=r {
                let yy = clamp_index(py as isize + dy, h);
                for dx in -r..=r {
                    let xx = clamp_index(px as isize + dx, w);
                    if !mask[yy * w + xx] {
                        out[py * w + px] = false;
                        continue 'pixels;
                    }
                }
            }
            out[py * w + px] = true;
        }
    }
    out
}

/// Sum of `1 - SSIM` over pixels whose whole window is valid in the warped
/// result.
pub fn ssim_loss(target: &ImageBuffer, warped: &SampleResult, params: &SsimParams) -> MaskedSum {
    assert_eq!(target.width(), warped.width());
    assert_eq!(target.height(), warped.height());
    assert_eq!(target.channels(), warped.channels());
    let (w, h, c) = (target.width(), target.height(), target.channels());
    let radius = params.radius();
    let centers = erode_mask(&warped.mask, w, h, radius);
    let mut out = MaskedSum::default();
    for py in 0..h {
        for px in 0..w {
            if !centers[py * w + px] {
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..c {
                let st =
                    window_stats(target.data(), &warped.values, w, h, c, ch, px, py, radius);
                acc += ssim_from_stats(&st, params).min(1.0);
            }
            out.sum += 1.0 - acc / c as f64;
            out.count += 1;
        }
    }
    out
}

/// d(ssim_loss)/d(warped values).
pub fn ssim_loss_grad(
    target: &ImageBuffer,
    warped: &SampleResult,
    params: &SsimParams,
) -> Vec<f64> {
    let (w, h, c) = (target.width(), target.height(), target.channels());
    let radius = params.radius();
    let r = radius as isize;
    let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let centers = erode_mask(&warped.mask, w, h, radius);
    let mut grad = vec![0.0; warped.values.len()];
    let x = target.data();
    let y = &warped.values;
    for py in 0..h {
        for px in 0..w {
            if !centers[py * w + px] {
                continue;
            }
            // loss contribution = 1 - mean_ch SSIM  =>  outer factor -1/C.
            let outer = -1.0 / c as f64;
            for ch in 0..c {
                // At a bit-identical window SSIM sits at its maximum and the
                // gradient is analytically zero; computing it anyway leaves
                // cancellation dust that a downstream optimizer would chase.
                let mut identical = true;
                'eq: for dy in -r..=r {
                    let yy = clamp_index(py as isize + dy, h);
                    for dx in -r..=r {
                        let xx = clamp_index(px as isize + dx, w);
                        let j = (yy * w + xx) * c + ch;
                        if x[j] != y[j] {
                            identical = false;
                            break 'eq;
                        }
                    }
                }
                if identical {
                    continue;
                }
                let st = window_stats(x, y, w, h, c, ch, px, py, radius);
                let a1 = 2.0 * st.mu_x * st.mu_y + params.c1;
                let a2 = 2.0 * st.cov + params.c2;
                let b1 = st.mu_x * st.mu_x + st.mu_y * st.mu_y + params.c1;
                let b2 = st.var_x + st.var_y + params.c2;
                let d = b1 * b2;
                let s = (a1 * a2) / d;
                // dS through the mean, covariance and variance of the window.
                let k_mu = (2.0 * st.mu_x * a2 - 2.0 * s * st.mu_y * b2) / d;
                let k_cov = 2.0 * a1 / d;
                let k_var = -2.0 * s / b2;
                for dy in -r..=r {
                    let yy = clamp_index(py as isize + dy, h);
                    for dx in -r..=r {
                        let xx = clamp_index(px as isize + dx, w);
                        let j = (yy * w + xx) * c + ch;
                        let term = k_mu + k_cov * (x[j] - st.mu_x) + k_var * (y[j] - st.mu_y);
                        grad[j] += outer * term / n;
                    }
                }
            }
        }
    }
    grad
}

/// Mean absolute channel gradient of the image along +x at (x, y).
#[inline]
fn image_grad_x(img: &ImageBuffer, x: usize, y: usize) -> f64 {
    let c = img.channels();
    let mut acc = 0.0;
    for ch in 0..c {
        acc += (img.at(x + 1, y, ch) - img.at(x, y, ch)).abs();
    }
    acc / c as f64
}

#[inline]
fn image_grad_y(img: &ImageBuffer, x: usize, y: usize) -> f64 {
    let c = img.channels();
    let mut acc = 0.0;
    for ch in 0..c {
        acc += (img.at(x, y + 1, ch) - img.at(x, y, ch)).abs();
    }
    acc / c as f64
}

/// Edge-aware smoothness: absolute forward differences of the disparity,
/// attenuated where the image itself has gradients. The last column (for x)
/// and last row (for y) have no forward neighbor and are excluded.
pub fn smoothness_loss(disp: &DisparityMap, img: &ImageBuffer) -> f64 {
    assert_eq!(disp.width(), img.width());
    assert_eq!(disp.height(), img.height());
    let (w, h) = (disp.width(), disp.height());
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            sum += (disp.value(x + 1, y) - disp.value(x, y)).abs() * (-image_grad_x(img, x, y)).exp();
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            sum += (disp.value(x, y + 1) - disp.value(x, y)).abs() * (-image_grad_y(img, x, y)).exp();
        }
    }
    sum
}

/// d(smoothness_loss)/d(disparity values). The subgradient at exactly equal
/// neighbors is taken as zero.
pub fn smoothness_loss_grad(disp: &DisparityMap, img: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (disp.width(), disp.height());
    let mut grad = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w - 1 {
            let delta = disp.value(x + 1, y) - disp.value(x, y);
            let s = if delta > 0.0 {
                1.0
            } else if delta < 0.0 {
                -1.0
            } else {
                0.0
            };
            let wgt = (-image_grad_x(img, x, y)).exp();
            grad[y * w + x + 1] += s * wgt;
            grad[y * w + x] -= s * wgt;
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let delta = disp.value(x, y + 1) - disp.value(x, y);
            let s = if delta > 0.0 {
                1.0
            } else if delta < 0.0 {
                -1.0
            } else {
                0.0
            };
            let wgt = (-image_grad_y(img, x, y)).exp();
            grad[(y + 1) * w + x] += s * wgt;
            grad[y * w + x] -= s * wgt;
        }
    }
    grad
}

/// One pyramid level of the multi-scale evaluation.
#[derive(Debug, Clone)]
pub struct ScaleEval {
    /// Depth map the warp ran on (full resolution under
    /// [`ScaleStrategy::UpsampleToInput`], native under
    /// [`ScaleStrategy::NativePerLevel`]).
    pub depth: DepthMap,
    pub flow: crate::geometry::FlowField,
    pub warped: SampleResult,
    pub reconstruction: MaskedSum,
    pub ssim: MaskedSum,
    pub smoothness: f64,
}

/// Forward evaluation of the 2D losses across all four scales.
#[derive(Debug, Clone)]
pub struct MultiScaleEval {
    pub strategy: ScaleStrategy,
    pub scales: Vec<ScaleEval>,
    /// Reconstruction summed over scales (one term in the total).
    pub reconstruction: f64,
    /// Structural-similarity loss summed over scales.
    pub ssim: f64,
    pub smooth_per_scale: [f64; PYRAMID_LEVELS],
}

fn check_disparity_levels(
    disparities: &[DisparityMap],
    pyramid: &Pyramid,
) -> Result<()> {
    if disparities.len() != PYRAMID_LEVELS {
        return Err(Error::InvalidInput {
            what: "multiscale disparities",
            reason: format!("expected {PYRAMID_LEVELS} levels, got {}", disparities.len()),
        });
    }
    for (i, d) in disparities.iter().enumerate() {
        let (w, h) = pyramid.level(i);
        if (d.width(), d.height()) != (w, h) {
            return Err(Error::DimensionMismatch {
                what: "disparity level",
                expected_w: w,
                expected_h: h,
                got_w: d.width(),
                got_h: d.height(),
            });
        }
        if d.valid_count() != w * h {
            return Err(Error::InvalidInput {
                what: "multiscale disparities",
                reason: format!("level {i} has invalid pixels; disparities must be dense"),
            });
        }
    }
    Ok(())
}

/// Upsampled level disparity converted to a dense full-resolution depth map.
pub(crate) fn upsampled_depth(
    disp: &DisparityMap,
    full_w: usize,
    full_h: usize,
) -> DepthMap {
    let up = resize_bilinear_slice(disp.values(), disp.width(), disp.height(), full_w, full_h);
    let depth: Vec<f64> = up.iter().map(|&d| 1.0 / d).collect();
    DepthMap::from_values(full_w, full_h, depth).expect("positive disparity inverts cleanly")
}

/// Evaluates warped images and the 2D losses for all four disparity scales.
///
/// Under [`ScaleStrategy::UpsampleToInput`] each level's disparity is
/// upsampled to the input resolution and the warp, reconstruction and
/// similarity all run at full detail; under
/// [`ScaleStrategy::NativePerLevel`] each level warps a downsampled source
/// against a downsampled target. Smoothness always pairs the native-level
/// disparity with the target downsampled to the same size.
pub fn multiscale_losses(
    target: &ImageBuffer,
    source: &ImageBuffer,
    disparities: &[DisparityMap],
    pose: &RigidTransform,
    k: &Intrinsics,
    strategy: ScaleStrategy,
    ssim_params: &SsimParams,
) -> Result<MultiScaleEval> {
    if (target.width(), target.height(), target.channels())
        != (source.width(), source.height(), source.channels())
    {
        return Err(Error::DimensionMismatch {
            what: "frame pair",
            expected_w: target.width(),
            expected_h: target.height(),
            got_w: source.width(),
            got_h: source.height(),
        });
    }
    let pyramid = Pyramid::for_input(target.width(), target.height())?;
    check_disparity_levels(disparities, &pyramid)?;
    let target_pyr = build_pyramid(target)?;
    let source_pyr = if strategy == ScaleStrategy::NativePerLevel {
        build_pyramid(source)?
    } else {
        Vec::new()
    };

    let mut scales = Vec::with_capacity(PYRAMID_LEVELS);
    let mut rec_total = 0.0;
    let mut ssim_total = 0.0;
    let mut smooth = [0.0; PYRAMID_LEVELS];
    for level in 0..PYRAMID_LEVELS {
        let disp = &disparities[level];
        smooth[level] = smoothness_loss(disp, &target_pyr[level]);
        let (depth, flow, warped, rec, ssim) = match strategy {
            ScaleStrategy::UpsampleToInput => {
                let depth = upsampled_depth(disp, target.width(), target.height());
                let flow = warp_coords(&depth, pose, k);
                let warped = bilinear_sample(source, &flow);
                let rec = reconstruction_loss(target, &warped);
                let ssim = ssim_loss(target, &warped, ssim_params);
                (depth, flow, warped, rec, ssim)
            }
            ScaleStrategy::NativePerLevel => {
                let depth = disp.reciprocal();
                let k_level = k.for_level(level);
                let flow = warp_coords(&depth, pose, &k_level);
                let warped = bilinear_sample(&source_pyr[level], &flow);
                let rec = reconstruction_loss(&target_pyr[level], &warped);
                let ssim = ssim_loss(&target_pyr[level], &warped, ssim_params);
                (depth, flow, warped, rec, ssim)
            }
        };
        rec_total += rec.sum;
        ssim_total += ssim.sum;
        scales.push(ScaleEval {
            depth,
            flow,
            warped,
            reconstruction: rec,
            ssim,
            smoothness: smooth[level],
        });
    }
    Ok(MultiScaleEval {
        strategy,
        scales,
        reconstruction: rec_total,
        ssim: ssim_total,
        smooth_per_scale: smooth,
    })
}

/// Combines the individual terms into the weighted total:
/// `alpha * reconstr + beta * ssim + sum_s(gamma * smooth_s + omega * loss3d_s)`.
pub fn total_loss(
    reconstr: f64,
    ssim: f64,
    smooth_per_scale: [f64; PYRAMID_LEVELS],
    loss3d_per_scale: [f64; PYRAMID_LEVELS],
    weights: &LossWeights,
) -> LossBreakdown {
    let mut total = weights.alpha * reconstr + weights.beta * ssim;
    for s in 0..PYRAMID_LEVELS {
        total += weights.gamma * smooth_per_scale[s] + weights.omega * loss3d_per_scale[s];
    }
    LossBreakdown {
        reconstr,
        ssim,
        smooth_per_scale,
        loss3d_per_scale,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FlowField;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_sample(values: Vec<f64>, w: usize, h: usize, c: usize) -> SampleResult {
        let mut flow = FlowField::new(w, h);
        for i in 0..w * h {
            flow.u[i] = (i % w) as f64;
            flow.v[i] = (i / w) as f64;
            flow.valid[i] = true;
        }
        let img = ImageBuffer::new(w, h, c, values).unwrap();
        bilinear_sample(&img, &flow)
    }

    #[test]
    fn reconstruction_of_uniform_offset_counts_every_pixel() {
        let target = ImageBuffer::from_fn(6, 4, 1, |_, _, _| 0.5).unwrap();
        let warped = full_sample(vec![0.25; 24], 6, 4, 1);
        let loss = reconstruction_loss(&target, &warped);
        assert_eq!(loss.count, 24);
        assert!((loss.sum - 0.25 * 24.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_skips_masked_pixels() {
        let target = ImageBuffer::from_fn(4, 2, 1, |_, _, _| 1.0).unwrap();
        let mut warped = full_sample(vec![0.0; 8], 4, 2, 1);
        for i in 0..4 {
            warped.mask[i] = false;
        }
        let loss = reconstruction_loss(&target, &warped);
        assert_eq!(loss.count, 4, "only the unmasked half contributes");
        assert!((loss.sum - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_empty_mask_is_zero_with_flag() {
        let target = ImageBuffer::from_fn(2, 2, 1, |_, _, _| 0.3).unwrap();
        let mut warped = full_sample(vec![0.9; 4], 2, 2, 1);
        warped.mask.iter_mut().for_each(|m| *m = false);
        let loss = reconstruction_loss(&target, &warped);
        assert!(loss.is_empty());
        assert_eq!(loss.sum, 0.0);
    }

    #[test]
    fn ssim_of_identical_images_is_one_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageBuffer::from_fn(9, 6, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        for &v in &ssim_map(&img, &img, &SsimParams::default()) {
            assert_eq!(v, 1.0, "identical windows must score exactly 1");
        }
    }

    #[test]
    fn ssim_of_constant_images_matches_closed_form() {
        // mu_x = 1, mu_y = 0, zero variances:
        // SSIM = c1*c2 / ((1 + c1)*c2) = c1 / (1 + c1).
        let p = SsimParams::default();
        let ones = ImageBuffer::from_fn(5, 5, 1, |_, _, _| 1.0).unwrap();
        let zeros = full_sample(vec![0.0; 25], 5, 5, 1);
        let expected_per_pixel = 1.0 - p.c1 / (1.0 + p.c1);
        let loss = ssim_loss(&ones, &zeros, &p);
        assert_eq!(loss.count, 25);
        assert!((loss.sum - 25.0 * expected_per_pixel).abs() < 1e-12);
    }

    #[test]
    fn ssim_never_exceeds_one_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = ImageBuffer::from_fn(7, 5, 1, |_, _, _| rng.gen::<f64>()).unwrap();
            let b = ImageBuffer::from_fn(7, 5, 1, |_, _, _| rng.gen::<f64>()).unwrap();
            for &v in &ssim_map(&a, &b, &SsimParams::default()) {
                assert!(v <= 1.0, "ssim {v} above 1");
                assert!(v >= -1.0, "ssim {v} below -1");
            }
        }
    }

    #[test]
    fn ssim_loss_scales_linearly_with_valid_area() {
        // Two disjoint interior stripes of equal width must contribute
        // exactly twice one stripe's loss on constant input.
        let p = SsimParams::default();
        let target = ImageBuffer::from_fn(20, 5, 1, |_, _, _| 1.0).unwrap();
        let make = |stripes: &[std::ops::Range<usize>]| {
            let mut warped = full_sample(vec![0.0; 100], 20, 5, 1);
            warped.mask.iter_mut().for_each(|m| *m = false);
            for stripe in stripes {
                for y in 0..5 {
                    for x in stripe.clone() {
                        warped.mask[y * 20 + x] = true;
                    }
                }
            }
            ssim_loss(&target, &warped, &p)
        };
        let one = make(&[5..10]);
        let two = make(&[5..10, 12..17]);
        assert!(one.count > 0);
        assert_eq!(two.count, 2 * one.count);
        assert!((two.sum - 2.0 * one.sum).abs() < 1e-12);
    }

    #[test]
    fn ssim_erosion_drops_windows_touching_invalid_pixels() {
        let p = SsimParams::default();
        let target = ImageBuffer::from_fn(5, 5, 1, |_, _, _| 0.5).unwrap();
        let mut warped = full_sample(vec![0.5; 25], 5, 5, 1);
        warped.mask[2 * 5 + 2] = false; // center pixel invalid
        let loss = ssim_loss(&target, &warped, &p);
        // The 3x3 neighborhood of (2,2) is excluded: 25 - 9 = 16 centers.
        assert_eq!(loss.count, 16);
    }

    #[test]
    fn reconstruction_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = ImageBuffer::from_fn(6, 5, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let vals: Vec<f64> = (0..90).map(|_| rng.gen::<f64>()).collect();
        let warped = full_sample(vals, 6, 5, 3);
        let grad = reconstruction_loss_grad(&target, &warped);
        let h = 1e-6;
        for j in (0..90).step_by(7) {
            let mut up = warped.clone();
            let mut dn = warped.clone();
            up.values[j] += h;
            dn.values[j] -= h;
            let fd = (reconstruction_loss(&target, &up).sum
                - reconstruction_loss(&target, &dn).sum)
                / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() < 1e-6,
                "component {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn ssim_grad_matches_finite_differences() {
        let p = SsimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = ImageBuffer::from_fn(7, 6, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let vals: Vec<f64> = (0..7 * 6 * 3).map(|_| rng.gen::<f64>() * 0.9 + 0.05).collect();
        let warped = full_sample(vals, 7, 6, 3);
        let grad = ssim_loss_grad(&target, &warped, &p);
        let h = 1e-6;
        for j in (0..7 * 6 * 3).step_by(11) {
            let mut up = warped.clone();
            let mut dn = warped.clone();
            up.values[j] += h;
            dn.values[j] -= h;
            let fd =
                (ssim_loss(&target, &up, &p).sum - ssim_loss(&target, &dn, &p).sum) / (2.0 * h);
            let denom = grad[j].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((grad[j] - fd) / denom).abs() < 1e-4,
                "component {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn smoothness_of_constant_disparity_is_zero() {
        let disp = DepthMap::constant(8, 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = ImageBuffer::from_fn(8, 6, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        assert_eq!(smoothness_loss(&disp, &img), 0.0);
    }

    #[test]
    fn smoothness_of_ramp_on_flat_image_is_slope_times_edges() {
        // d(x) = 0.1 + 0.01 x on a constant image: every x-edge contributes
        // 0.01 * exp(0), no y contribution.
        let (w, h) = (9usize, 4usize);
        let disp = DepthMap::from_values(
            w,
            h,
            (0..w * h).map(|i| 0.1 + 0.01 * (i % w) as f64).collect(),
        )
        .unwrap();
        let img = ImageBuffer::from_fn(w, h, 1, |_, _, _| 0.7).unwrap();
        let expected = 0.01 * ((w - 1) * h) as f64;
        assert!((smoothness_loss(&disp, &img) - expected).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_brute_force_oracle() {
        // Independent re-evaluation straight from the definition.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (11usize, 7usize);
        let disp = DepthMap::from_values(
            w,
            h,
            (0..w * h).map(|_| 0.2 + rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let img = ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let mut oracle = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let gi = (0..3)
                        .map(|c| (img.at(x + 1, y, c) - img.at(x, y, c)).abs())
                        .sum::<f64>()
                        / 3.0;
                    oracle += (disp.value(x + 1, y) - disp.value(x, y)).abs() * (-gi).exp();
                }
                if y + 1 < h {
                    let gi = (0..3)
                        .map(|c| (img.at(x, y + 1, c) - img.at(x, y, c)).abs())
                        .sum::<f64>()
                        / 3.0;
                    oracle += (disp.value(x, y + 1) - disp.value(x, y)).abs() * (-gi).exp();
                }
            }
        }
        assert!((smoothness_loss(&disp, &img) - oracle).abs() < 1e-12);
    }

    #[test]
    fn smoothness_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (8usize, 6usize);
        let values: Vec<f64> = (0..w * h).map(|_| 0.3 + rng.gen::<f64>()).collect();
        let img = ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.gen::<f64>()).unwrap();
        let disp = DepthMap::from_values(w, h, values.clone()).unwrap();
        let grad = smoothness_loss_grad(&disp, &img);
        let step = 1e-6;
        for j in (0..w * h).step_by(5) {
            let mut up = values.clone();
            let mut dn = values.clone();
            up[j] += step;
            dn[j] -= step;
            let fd = (smoothness_loss(&DepthMap::from_values(w, h, up).unwrap(), &img)
                - smoothness_loss(&DepthMap::from_values(w, h, dn).unwrap(), &img))
                / (2.0 * step);
            assert!(
                (grad[j] - fd).abs() < 1e-6,
                "pixel {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn total_loss_of_unit_parts_with_default_weights() {
        let b = total_loss(1.0, 1.0, [1.0; 4], [1.0; 4], &LossWeights::default());
        assert!((b.total - 2.0).abs() < 1e-15, "(0.85 + 0.15) + 4 * (0.15 + 0.1)");
    }

    #[test]
    fn total_loss_recomposes_from_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let w = LossWeights {
                alpha: rng.gen(),
                beta: rng.gen(),
                gamma: rng.gen(),
                omega: rng.gen(),
            };
            let smooth = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let l3d = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let rec = rng.gen::<f64>() * 100.0;
            let ss = rng.gen::<f64>() * 10.0;
            let b = total_loss(rec, ss, smooth, l3d, &w);
            let manual = w.alpha * rec
                + w.beta * ss
                + smooth.iter().map(|v| w.gamma * v).sum::<f64>()
                + l3d.iter().map(|v| w.omega * v).sum::<f64>();
            assert!((b.total - manual).abs() <= 1e-12);
        }
    }

    fn disparity_pyramid(base: &DisparityMap) -> Vec<DisparityMap> {
        let mut levels = vec![base.clone()];
        for i in 1..PYRAMID_LEVELS {
            let prev = &levels[i - 1];
            let vals = resize_bilinear_slice(
                prev.values(),
                prev.width(),
                prev.height(),
                prev.width() / 2,
                prev.height() / 2,
            );
            levels.push(
                DepthMap::from_values(prev.width() / 2, prev.height() / 2, vals).unwrap(),
            );
        }
        levels
    }

    #[test]
    fn identity_pose_on_equal_frames_has_zero_reconstruction_at_every_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let disp = DepthMap::constant(16, 16, 0.5).unwrap();
        let k = Intrinsics::new(12.0, 12.0, 7.5, 7.5).unwrap();
        let eval = multiscale_losses(
            &img,
            &img,
            &disparity_pyramid(&disp),
            &RigidTransform::identity(),
            &k,
            ScaleStrategy::UpsampleToInput,
            &SsimParams::default(),
        )
        .unwrap();
        for (i, scale) in eval.scales.iter().enumerate() {
            assert_eq!(scale.reconstruction.sum, 0.0, "level {i}");
            assert_eq!(scale.ssim.sum, 0.0, "level {i}");
        }
    }

    #[test]
    fn strategies_agree_exactly_at_level_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let source = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.gen::<f64>()).unwrap();
        let base = DepthMap::from_values(
            16,
            16,
            (0..256).map(|_| 0.4 + rng.gen::<f64>() * 0.2).collect(),
        )
        .unwrap();
        let disps = disparity_pyramid(&base);
        let k = Intrinsics::new(13.0, 13.0, 7.5, 7.5).unwrap();
        let pose = RigidTransform::new(
            Vector3::new(0.01, -0.005, 0.002),
            Vector3::new(0.02, 0.01, -0.01),
        )
        .unwrap();
        let p = SsimParams::default();
        let a = multiscale_losses(&target, &source, &disps, &pose, &k, ScaleStrategy::NativePerLevel, &p)
            .unwrap();
        let b = multiscale_losses(&target, &source, &disps, &pose, &k, ScaleStrategy::UpsampleToInput, &p)
            .unwrap();
        assert_eq!(a.scales[0].reconstruction.sum, b.scales[0].reconstruction.sum);
        assert_eq!(a.scales[0].ssim.sum, b.scales[0].ssim.sum);
        assert_eq!(a.smooth_per_scale, b.smooth_per_scale);
    }

    #[test]
    fn multiscale_rejects_mismatched_level_sizes() {
        let img = ImageBuffer::from_fn(16, 16, 1, |_, _, _| 0.5).unwrap();
        let bad = vec![
            DepthMap::constant(16, 16, 1.0).unwrap(),
            DepthMap::constant(8, 8, 1.0).unwrap(),
            DepthMap::constant(5, 4, 1.0).unwrap(), // wrong
            DepthMap::constant(2, 2, 1.0).unwrap(),
        ];
        let k = Intrinsics::new(10.0, 10.0, 7.5, 7.5).unwrap();
        let err = multiscale_losses(
            &img,
            &img,
            &bad,
            &RigidTransform::identity(),
            &k,
            ScaleStrategy::UpsampleToInput,
            &SsimParams::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }
}
