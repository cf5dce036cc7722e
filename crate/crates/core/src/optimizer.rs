//! Direct per-pair optimization: gradient descent on a dense disparity map
//! and a 6-DoF pose for one frame pair, minimizing the full warping
//! objective. This is the desk-scale stand-in for network training — it
//! exists to drive and verify the loss/gradient stack end to end, not to
//! generalize across frames.
//!
//! Disparity is reparameterized through a softplus so it stays strictly
//! positive no matter what the optimizer does; the pose is optimized in
//! angle-axis + translation coordinates. All gradients are analytic; the 3D
//! term uses the ICP-as-constant approximation described in the icp module.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, skew, so3_left_jacobian, warp_with_jacobian, Intrinsics, RigidTransform,
};
use crate::icp::{icp_3d_loss, icp_align, IcpResult, PointCloud};
use crate::image::{
    build_pyramid, resize_bilinear_adjoint, resize_bilinear_slice, DepthMap, DisparityMap,
    ImageBuffer, Pyramid, PYRAMID_LEVELS,
};
use crate::losses::{
    multiscale_losses, reconstruction_loss_grad, smoothness_loss_grad, ssim_loss_grad,
    total_loss, LossBreakdown, LossWeights, ScaleStrategy, SsimParams,
};
use crate::sampler::bilinear_sample_jacobian;

/// ICP budget per loss evaluation; the clouds start near-aligned during
/// optimization, so few iterations are needed.
const ICP_MAX_ITERS: usize = 15;
const ICP_TOL: f64 = 1e-10;

/// Absolute slack added to the 10x-initial divergence threshold so runs that
/// start at (numerically) zero loss are not aborted by rounding dust.
const DIVERGENCE_FLOOR: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    let v = if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    };
    // keep the value a positive normal even for absurdly negative inputs
    v.max(1e-300)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn inv_softplus(d: f64) -> f64 {
    if d > 20.0 {
        d
    } else {
        d.exp_m1().ln()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One frame pair plus the decision variables being optimized for it.
#[derive(Debug, Clone)]
pub struct PairProblem {
    target: ImageBuffer,
    source: ImageBuffer,
    intrinsics: Intrinsics,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub strategy: ScaleStrategy,
    /// Reference depth of the source frame for the 3D terms. Only one
    /// disparity map is being optimized, so the second cloud must come from
    /// outside; without it the 3D terms contribute 0 and are flagged skipped.
    pub source_depth: Option<DepthMap>,
    /// Pre-activation disparity: disparity = softplus(rho), elementwise.
    rho: Vec<f64>,
    /// angle-axis xyz, then translation xyz.
    pose: [f64; 6],
}

/// Losses and analytic gradients of a [`PairProblem`] at its current state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Gradient of the total loss w.r.t. the pre-activation disparity map.
    pub grad_rho: Vec<f64>,
    /// Gradient w.r.t. the pose parameters (rx, ry, rz, tx, ty, tz).
    pub grad_pose: [f64; 6],
    /// Per level: true when the 3D term did not run (disabled, no reference
    /// depth, or degenerate clouds) and contributed 0.
    pub loss3d_skipped: [bool; PYRAMID_LEVELS],
}

struct Level3d {
    result: IcpResult,
    /// Target-frame points, aligned with the ICP source-cloud indices.
    points: Vec<Vector3<f64>>,
    /// Flat pixel index (at level resolution) for each point.
    pixels: Vec<usize>,
}

impl PairProblem {
    pub fn new(
        target: ImageBuffer,
        source: ImageBuffer,
        intrinsics: Intrinsics,
        init_disparity: &DisparityMap,
        init_pose: &RigidTransform,
    ) -> Result<Self> {
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
        Pyramid::for_input(target.width(), target.height())?;
        if (init_disparity.width(), init_disparity.height()) != (target.width(), target.height())
        {
            return Err(Error::DimensionMismatch {
                what: "initial disparity",
                expected_w: target.width(),
                expected_h: target.height(),
                got_w: init_disparity.width(),
                got_h: init_disparity.height(),
            });
        }
        if init_disparity.valid_count() != target.width() * target.height() {
            return Err(Error::InvalidInput {
                what: "initial disparity",
                reason: "must be dense (every pixel valid)".into(),
            });
        }
        let rho = init_disparity.values().iter().map(|&d| inv_softplus(d)).collect();
        let r = init_pose.rotation;
        let t = init_pose.translation;
        Ok(Self {
            target,
            source,
            intrinsics,
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            strategy: ScaleStrategy::UpsampleToInput,
            source_depth: None,
            rho,
            pose: [r.x, r.y, r.z, t.x, t.y, t.z],
        })
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_strategy(mut self, strategy: ScaleStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_source_depth(mut self, depth: DepthMap) -> Result<Self> {
        if (depth.width(), depth.height()) != (self.target.width(), self.target.height()) {
            return Err(Error::DimensionMismatch {
                what: "source reference depth",
                expected_w: self.target.width(),
                expected_h: self.target.height(),
                got_w: depth.width(),
                got_h: depth.height(),
            });
        }
        self.source_depth = Some(depth);
        Ok(self)
    }

    pub fn target(&self) -> &ImageBuffer {
        &self.target
    }

    pub fn source(&self) -> &ImageBuffer {
        &self.source
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn set_rho(&mut self, index: usize, value: f64) {
        self.rho[index] = value;
    }

    pub fn pose_params(&self) -> [f64; 6] {
        self.pose
    }

    /// Fails (without changing the stored pose) if the rotation part leaves
    /// the valid angle-axis ball.
    pub fn set_pose_params(&mut self, params: &[f64; 6]) -> Result<()> {
        RigidTransform::new(
            Vector3::new(params[0], params[1], params[2]),
            Vector3::new(params[3], params[4], params[5]),
        )?;
        self.pose = *params;
        Ok(())
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(
            Vector3::new(self.pose[0], self.pose[1], self.pose[2]),
            Vector3::new(self.pose[3], self.pose[4], self.pose[5]),
        )
        .expect("stored pose parameters are always valid")
    }

    /// Current disparity at input resolution.
    pub fn disparity(&self) -> DisparityMap {
        let (w, h) = (self.target.width(), self.target.height());
        let values: Vec<f64> = self.rho.iter().map(|&r| softplus(r)).collect();
        DepthMap::from_values_masked(w, h, values, vec![true; w * h])
            .expect("softplus keeps disparity positive")
    }

    /// The four disparity scales: full resolution, then repeated bilinear
    /// halving.
    pub fn disparity_levels(&self) -> Vec<DisparityMap> {
        let mut levels = vec![self.disparity()];
        for _ in 1..PYRAMID_LEVELS {
            let prev = levels.last().unwrap();
            let (nw, nh) = (prev.width() / 2, prev.height() / 2);
            let vals = resize_bilinear_slice(prev.values(), prev.width(), prev.height(), nw, nh);
            levels.push(
                DepthMap::from_values_masked(nw, nh, vals, vec![true; nw * nh])
                    .expect("bilinear average of positive disparity stays positive"),
            );
        }
        levels
    }

    /// Computes all loss terms and their analytic gradients at the current
    /// parameters.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let pose = self.pose();
        let levels = self.disparity_levels();
        let ms = multiscale_losses(
            &self.target,
            &self.source,
            &levels,
            &pose,
            &self.intrinsics,
            self.strategy,
            &self.ssim,
        )?;
        let target_pyr = build_pyramid(&self.target)?;
        let source_pyr = if self.strategy == ScaleStrategy::NativePerLevel {
            build_pyramid(&self.source)?
        } else {
            Vec::new()
        };

        // 3D terms: forward pass, caching what the backward pass needs.
        let mut loss3d = [0.0; PYRAMID_LEVELS];
        let mut skipped = [true; PYRAMID_LEVELS];
        let mut caches: [Option<Level3d>; PYRAMID_LEVELS] = [None, None, None, None];
        if self.weights.omega != 0.0 {
            if let Some(reference) = &self.source_depth {
                for s in 0..PYRAMID_LEVELS {
                    let (lw, lh) = (levels[s].width(), levels[s].height());
                    let k_s = self.intrinsics.for_level(s);
                    let depth_level = levels[s].reciprocal();
                    let target_pts = backproject(&depth_level, &k_s);
                    let mut moved = Vec::with_capacity(target_pts.len());
                    let mut points = Vec::with_capacity(target_pts.len());
                    let mut pixels = Vec::with_capacity(target_pts.len());
                    for (pix, p) in target_pts {
                        moved.push(pose.apply(&p));
                        points.push(p);
                        pixels.push(pix);
                    }
                    let reference_level = reference.resize_nearest(lw, lh);
                    let dst: Vec<Vector3<f64>> = backproject(&reference_level, &k_s)
                        .into_iter()
                        .map(|(_, p)| p)
                        .collect();
                    if moved.len() < 3 || dst.len() < 3 {
                        continue;
                    }
                    let src_cloud = PointCloud {
                        points: moved,
                        source_pixel: None,
                    };
                    let dst_cloud = PointCloud {
                        points: dst,
                        source_pixel: None,
                    };
                    match icp_align(&src_cloud, &dst_cloud, ICP_MAX_ITERS, ICP_TOL) {
                        Ok(result) => {
                            loss3d[s] = icp_3d_loss(&result);
                            skipped[s] = false;
                            caches[s] = Some(Level3d {
                                result,
                                points,
                                pixels,
                            });
                        }
                        Err(Error::DegenerateCloud { .. }) => {}
                        Err(other) => return Err(other),
                    }
                }
            }
        }

        let breakdown = total_loss(
            ms.reconstruction,
            ms.ssim,
            ms.smooth_per_scale,
            loss3d,
            &self.weights,
        );

        // Backward pass.
        let (w, h) = (self.target.width(), self.target.height());
        let mut grad_pose = [0.0; 6];
        let mut g_levels: Vec<Vec<f64>> = levels
            .iter()
            .map(|d| vec![0.0; d.width() * d.height()])
            .collect();
        let r_pose = pose.rotation_matrix();
        let jl = so3_left_jacobian(&pose.rotation);

        for s in 0..PYRAMID_LEVELS {
            let scale = &ms.scales[s];
            let (tgt_img, src_img, k_used) = match self.strategy {
                ScaleStrategy::UpsampleToInput => {
                    (&self.target, &self.source, self.intrinsics.clone())
                }
                ScaleStrategy::NativePerLevel => {
                    (&target_pyr[s], &source_pyr[s], self.intrinsics.for_level(s))
                }
            };
            let c = tgt_img.channels();
            let rec_g = reconstruction_loss_grad(tgt_img, &scale.warped);
            let ssim_g = ssim_loss_grad(tgt_img, &scale.warped, &self.ssim);
            let sjac = bilinear_sample_jacobian(src_img, &scale.flow);
            let (_, wjac) = warp_with_jacobian(&scale.depth, &pose, &k_used);

            let n_px = scale.depth.width() * scale.depth.height();
            let mut g_disp_warp_res = vec![0.0; n_px];
            for i in 0..n_px {
                if !scale.warped.mask[i] {
                    continue;
                }
                let mut gu = 0.0;
                let mut gv = 0.0;
                for ch in 0..c {
                    let g = self.weights.alpha * rec_g[i * c + ch]
                        + self.weights.beta * ssim_g[i * c + ch];
                    gu += g * sjac.d_u[i * c + ch];
                    gv += g * sjac.d_v[i * c + ch];
                }
                for col in 0..6 {
                    grad_pose[col] +=
                        gu * wjac.d_pose[i][0][col] + gv * wjac.d_pose[i][1][col];
                }
                let g_depth = gu * wjac.d_depth[i][0] + gv * wjac.d_depth[i][1];
                // depth = 1 / disparity at this resolution
                let depth_v = scale.depth.values()[i];
                g_disp_warp_res[i] = -g_depth * depth_v * depth_v;
            }
            match self.strategy {
                ScaleStrategy::UpsampleToInput => {
                    let (lw, lh) = (levels[s].width(), levels[s].height());
                    let back = resize_bilinear_adjoint(&g_disp_warp_res, lw, lh, w, h);
                    for (gl, b) in g_levels[s].iter_mut().zip(&back) {
                        *gl += b;
                    }
                }
                ScaleStrategy::NativePerLevel => {
                    for (gl, b) in g_levels[s].iter_mut().zip(&g_disp_warp_res) {
                        *gl += b;
                    }
                }
            }

            let sg = smoothness_loss_grad(&levels[s], &target_pyr[s]);
            for (gl, v) in g_levels[s].iter_mut().zip(&sg) {
                *gl += self.weights.gamma * v;
            }

            if let Some(cache) = &caches[s] {
                let r_prime = cache.result.transform.rotation_matrix();
                let k_s = self.intrinsics.for_level(s);
                let lw = levels[s].width();
                for (ri, &a) in cache.result.src_indices.iter().enumerate() {
                    let res = cache.result.residuals[ri];
                    let sgn = Vector3::new(sign(res.x), sign(res.y), sign(res.z));
                    // residual = dst - T'(y): constants except y = pose(X)
                    let g_y = -(self.weights.omega) * (r_prime.transpose() * sgn);
                    grad_pose[3] += g_y.x;
                    grad_pose[4] += g_y.y;
                    grad_pose[5] += g_y.z;
                    let x_pt = cache.points[a];
                    let dy_dr = -skew(&(r_pose * x_pt)) * jl;
                    let gr = dy_dr.transpose() * g_y;
                    grad_pose[0] += gr.x;
                    grad_pose[1] += gr.y;
                    grad_pose[2] += gr.z;
                    let pix = cache.pixels[a];
                    let ray = k_s.ray((pix % lw) as f64, (pix / lw) as f64);
                    let g_z = g_y.dot(&(r_pose * ray));
                    // X = Z * ray with ray.z = 1, so Z is the point's z
                    let z = x_pt.z;
                    g_levels[s][pix] += -g_z * z * z;
                }
            }
        }

        // Pull every level's gradient back through the halving chain.
        for s in (1..PYRAMID_LEVELS).rev() {
            let (pw, ph) = (levels[s - 1].width(), levels[s - 1].height());
            let back = resize_bilinear_adjoint(
                &g_levels[s],
                pw,
                ph,
                levels[s].width(),
                levels[s].height(),
            );
            for i in 0..pw * ph {
                g_levels[s - 1][i] += back[i];
            }
        }
        let grad_rho: Vec<f64> = g_levels[0]
            .iter()
            .zip(&self.rho)
            .map(|(&g, &r)| g * sigmoid(r))
            .collect();

        Ok(Evaluation {
            breakdown,
            grad_rho,
            grad_pose,
            loss3d_skipped: skipped,
        })
    }
}

/// Step-size schedule for [`optimize_pair`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply the step size by `factor` every `every` steps.
    StepDecay { every: usize, factor: f64 },
}

impl Schedule {
    fn step_size(&self, base: f64, step: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::StepDecay { every, factor } => base * factor.powi((step / every) as i32),
        }
    }
}

/// One row of the optimization trace; row `k` holds the losses before update
/// `k`, and a final row holds the post-run losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub reconstr: f64,
    pub ssim: f64,
    pub smooth: [f64; PYRAMID_LEVELS],
    pub loss3d: [f64; PYRAMID_LEVELS],
    pub total: f64,
}

impl TraceRow {
    fn from_breakdown(step: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            reconstr: b.reconstr,
            ssim: b.ssim,
            smooth: b.smooth_per_scale,
            loss3d: b.loss3d_per_scale,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The loss exceeded ten times its initial value (or the pose parameters
    /// left their valid domain) at this step.
    Diverged { step: usize },
}

/// Result of an optimization run; the trace is retained even on divergence.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub status: RunStatus,
    pub trace: Vec<TraceRow>,
    pub disparity: DisparityMap,
    pub pose: RigidTransform,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Renders a trace as CSV with one column per loss term.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(
        "step,reconstruction,ssim,smooth0,smooth1,smooth2,smooth3,loss3d0,loss3d1,loss3d2,loss3d3,total\n",
    );
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.step,
            row.reconstr,
            row.ssim,
            row.smooth[0],
            row.smooth[1],
            row.smooth[2],
            row.smooth[3],
            row.loss3d[0],
            row.loss3d[1],
            row.loss3d[2],
            row.loss3d[3],
            row.total,
        ));
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update; returns the per-parameter deltas.
    fn step(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                -lr * m_hat / (v_hat.sqrt() + EPS)
            })
            .collect()
    }
}

/// Runs first-order descent with per-parameter adaptive step scaling on the
/// problem's disparity and pose, recording every step in the trace.
///
/// Aborts with [`RunStatus::Diverged`] — keeping the trace — when the total
/// loss grows past ten times its initial value or the pose leaves its valid
/// domain. Deterministic: identical inputs produce identical traces.
pub fn optimize_pair(
    problem: &mut PairProblem,
    steps: usize,
    step_size: f64,
    schedule: &Schedule,
) -> Result<OptimizeOutcome> {
    assert!(steps >= 1, "optimization needs at least one step");
    let n = problem.rho.len();
    let mut adam_rho = Adam::new(n);
    let mut adam_pose = Adam::new(6);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut status = RunStatus::Completed;
    let mut initial = f64::NAN;

    for step in 0..steps {
        let eval = problem.evaluate()?;
        let total = eval.breakdown.total;
        trace.push(TraceRow::from_breakdown(step, &eval.breakdown));
        if step == 0 {
            initial = total;
        } else if !total.is_finite() || total > 10.0 * initial + DIVERGENCE_FLOOR {
            status = RunStatus::Diverged { step };
            break;
        }

        let lr = schedule.step_size(step_size, step);
        let delta_rho = adam_rho.step(&eval.grad_rho, lr);
        for (r, d) in problem.rho.iter_mut().zip(&delta_rho) {
            *r += d;
        }
        let delta_pose = adam_pose.step(&eval.grad_pose, lr);
        let mut new_pose = problem.pose;
        for (p, d) in new_pose.iter_mut().zip(&delta_pose) {
            *p += d;
        }
        if problem.set_pose_params(&new_pose).is_err() {
            status = RunStatus::Diverged { step };
            break;
        }
    }

    if status == RunStatus::Completed {
        let eval = problem.evaluate()?;
        trace.push(TraceRow::from_breakdown(steps, &eval.breakdown));
        let total = eval.breakdown.total;
        if !total.is_finite() || total > 10.0 * initial + DIVERGENCE_FLOOR {
            status = RunStatus::Diverged { step: steps };
        }
    }

    let final_loss = trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(OptimizeOutcome {
        status,
        trace,
        disparity: problem.disparity(),
        pose: problem.pose(),
        initial_loss: initial,
        final_loss,
    })
}
