//! Synthetic scene generation with exact ground truth. A textured raster is
//! taken as the source frame and the target frame is rendered from it by the
//! same warp-and-sample pipeline the losses use, so at the true depth and
//! pose the reconstruction is bit-exact and the total photometric loss is
//! zero. That makes these scenes usable as oracles for gradients, optimizer
//! convergence and the 3D consistency terms.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{warp_coords, warp_point, FlowField, Intrinsics, RigidTransform};
use crate::image::{resize_bilinear_slice, DepthMap, ImageBuffer};
use crate::sampler::bilinear_sample;

/// Minimum fraction of target pixels that must land inside the source frame.
pub const MIN_IN_BOUNDS_FRACTION: f64 = 0.8;

/// Shape of the ground-truth depth over the target view.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthProfile {
    /// Fronto-parallel plane at constant depth `z`.
    Plane { z: f64 },
    /// True 3D plane `normal . X = d`, viewed at an angle.
    Slant { normal: Vector3<f64>, d: f64 },
    /// Vertical bands of constant depth, left to right.
    Steps { depths: Vec<f64> },
}

/// Full description of a scene to generate; identical specs produce
/// bit-identical scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub profile: DepthProfile,
    pub motion: RigidTransform,
    /// Camera; when absent a default with `fx = fy = 0.75 * width` and the
    /// principal point at the image center is used.
    pub intrinsics: Option<Intrinsics>,
}

impl SceneSpec {
    pub fn new(
        seed: u64,
        width: usize,
        height: usize,
        profile: DepthProfile,
        motion: RigidTransform,
    ) -> Self {
        Self {
            seed,
            width,
            height,
            profile,
            motion,
            intrinsics: None,
        }
    }

    pub fn with_intrinsics(mut self, k: Intrinsics) -> Self {
        self.intrinsics = Some(k);
        self
    }

    pub fn resolve_intrinsics(&self) -> Intrinsics {
        self.intrinsics.clone().unwrap_or_else(|| {
            let f = 0.75 * self.width as f64;
            Intrinsics::new(
                f,
                f,
                (self.width as f64 - 1.0) / 2.0,
                (self.height as f64 - 1.0) / 2.0,
            )
            .expect("default intrinsics are valid for nonzero sizes")
        })
    }
}

/// A generated scene: the raster source frame, the target frame rendered
/// from it, and the exact depth/pose/flow that relate them.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// The raw textured raster (identical to `source`).
    pub texture: ImageBuffer,
    /// Frame whose depth the pipeline estimates; rendered by sampling
    /// `source` along `gt_flow`.
    pub target: ImageBuffer,
    /// Frame that gets sampled during reconstruction.
    pub source: ImageBuffer,
    /// Ground-truth depth of the target view.
    pub gt_depth: DepthMap,
    /// Depth of the same surface seen from the source view (analytic for
    /// planar profiles, z-buffer splat with possible holes for steps).
    pub source_depth: DepthMap,
    /// Maps target-camera coordinates into the source camera.
    pub gt_pose: RigidTransform,
    /// Exact warp used to render the target.
    pub gt_flow: FlowField,
    /// Per-pixel flag: true where the target was rendered from in-bounds
    /// source content; false pixels hold border-extended filler.
    pub valid: Vec<bool>,
    pub in_bounds_fraction: f64,
}

/// Multi-octave smoothed noise in [0.05, 0.95], three channels. Bounded away
/// from 0 and 1 so resampling never saturates against the image value range.
fn noise_texture(seed: u64, width: usize, height: usize) -> ImageBuffer {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; width * height * 3];
    for ch in 0..3 {
        let mut acc = vec![0.0; width * height];
        let mut weight = 1.0;
        for octave in 0..4 {
            let cw = (width >> (3 - octave)).max(2);
            let chh = (height >> (3 - octave)).max(2);
            let coarse: Vec<f64> = (0..cw * chh).map(|_| rng.gen::<f64>()).collect();
            let up = resize_bilinear_slice(&coarse, cw, chh, width, height);
            for (a, u) in acc.iter_mut().zip(&up) {
                *a += weight * u;
            }
            weight *= 0.5;
        }
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (i, a) in acc.iter().enumerate() {
            data[i * 3 + ch] = if span > 0.0 {
                let t = (a - lo) / span;
                (0.05 * (1.0 - t) + 0.95 * t).clamp(0.05, 0.95)
            } else {
                0.5
            };
        }
    }
    ImageBuffer::new(width, height, 3, data).expect("noise values stay in range")
}

fn profile_depth(spec: &SceneSpec, k: &Intrinsics) -> Result<DepthMap> {
    let (w, h) = (spec.width, spec.height);
    match &spec.profile {
        DepthProfile::Plane { z } => {
            if !(*z > 0.0 && z.is_finite()) {
                return Err(Error::InvalidInput {
                    what: "scene profile",
                    reason: format!("plane depth must be positive, got {z}"),
                });
            }
            DepthMap::constant(w, h, *z)
        }
        DepthProfile::Slant { normal, d } => {
            let mut values = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let denom = normal.dot(&k.ray(x as f64, y as f64));
                    let z = d / denom;
                    if !(z > 0.0 && z.is_finite()) {
                        return Err(Error::InvalidInput {
                            what: "scene profile",
                            reason: format!(
                                "slanted plane is not fully in front of the camera at ({x}, {y})"
                            ),
                        });
                    }
                    values[y * w + x] = z;
                }
            }
            DepthMap::from_values_masked(w, h, values, vec![true; w * h])
        }
        DepthProfile::Steps { depths } => {
            if depths.is_empty() || depths.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
                return Err(Error::InvalidInput {
                    what: "scene profile",
                    reason: "step depths must be a nonempty list of positive values".into(),
                });
            }
            let bands = depths.len();
            let mut values = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    values[y * w + x] = depths[(x * bands / w).min(bands - 1)];
                }
            }
            DepthMap::from_values_masked(w, h, values, vec![true; w * h])
        }
    }
}

/// Depth of a plane `n . X = d` (target-view parameters) as seen from the
/// source view: the plane transforms to `(R n) . Y = d + (R n) . t`.
fn planar_source_depth(
    normal: &Vector3<f64>,
    d: f64,
    pose: &RigidTransform,
    k: &Intrinsics,
    w: usize,
    h: usize,
) -> DepthMap {
    let n_src = pose.rotation_matrix() * normal;
    let d_src = d + n_src.dot(&pose.translation);
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = d_src / n_src.dot(&k.ray(x as f64, y as f64));
            if z > 0.0 && z.is_finite() {
                values[y * w + x] = z;
            }
        }
    }
    DepthMap::from_values(w, h, values).expect("splat values are nonnegative and finite")
}

/// Source-view depth by forward-splatting each target pixel's warped point to
/// its nearest source pixel, keeping the closest surface per pixel. Pixels no
/// point lands on stay invalid.
fn splat_source_depth(
    gt_depth: &DepthMap,
    pose: &RigidTransform,
    k: &Intrinsics,
) -> DepthMap {
    let (w, h) = (gt_depth.width(), gt_depth.height());
    let mut zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            if !gt_depth.is_valid(x, y) {
                continue;
            }
            let Some((u, v, z)) = warp_point(x as f64, y as f64, gt_depth.value(x, y), pose, k)
            else {
                continue;
            };
            let (px, py) = (u.round(), v.round());
            if px < 0.0 || py < 0.0 || px > (w - 1) as f64 || py > (h - 1) as f64 {
                continue;
            }
            let i = py as usize * w + px as usize;
            if z < zbuf[i] {
                zbuf[i] = z;
            }
        }
    }
    let values: Vec<f64> = zbuf
        .into_iter()
        .map(|z| if z.is_finite() { z } else { 0.0 })
        .collect();
    DepthMap::from_values(w, h, values).expect("splat values are nonnegative and finite")
}

/// Generates the scene described by `spec`.
///
/// Fails with the achieved in-bounds fraction if the motion pushes more than
/// 20% of the target pixels out of the source frame.
pub fn make_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::InvalidInput {
            what: "scene size",
            reason: format!("{}x{} is too small to render", spec.width, spec.height),
        });
    }
    let k = spec.resolve_intrinsics();
    let (w, h) = (spec.width, spec.height);
    let source = noise_texture(spec.seed, w, h);
    let gt_depth = profile_depth(spec, &k)?;
    let gt_flow = warp_coords(&gt_depth, &spec.motion, &k);
    let warped = bilinear_sample(&source, &gt_flow);

    let in_bounds_fraction = warped.valid_count() as f64 / (w * h) as f64;
    if in_bounds_fraction < MIN_IN_BOUNDS_FRACTION {
        return Err(Error::ExcessiveMotion {
            in_bounds_fraction,
            required: MIN_IN_BOUNDS_FRACTION,
        });
    }

    // Out-of-frame pixels get border-extended content so the target is a
    // total image; `valid` remembers which pixels are genuine.
    let mut data = warped.values.clone();
    let needs_fill = warped.mask.iter().any(|m| !m);
    if needs_fill {
        let mut clamped = FlowField::new(w, h);
        for i in 0..w * h {
            let (u, v) = gt_flow.coords(i);
            clamped.u[i] = u.clamp(0.0, (w - 1) as f64);
            clamped.v[i] = v.clamp(0.0, (h - 1) as f64);
            clamped.valid[i] = true;
        }
        let filler = bilinear_sample(&source, &clamped);
        for i in 0..w * h {
            if !warped.mask[i] {
                for c in 0..3 {
                    data[i * 3 + c] = filler.values[i * 3 + c];
                }
            }
        }
    }
    let target = ImageBuffer::new(w, h, 3, data)?;

    let source_depth = match &spec.profile {
        DepthProfile::Plane { z } => {
            planar_source_depth(&Vector3::new(0.0, 0.0, 1.0), *z, &spec.motion, &k, w, h)
        }
        DepthProfile::Slant { normal, d } => {
            planar_source_depth(normal, *d, &spec.motion, &k, w, h)
        }
        DepthProfile::Steps { .. } => splat_source_depth(&gt_depth, &spec.motion, &k),
    };

    Ok(SyntheticScene {
        texture: source.clone(),
        target,
        source,
        gt_depth,
        source_depth,
        gt_pose: spec.motion.clone(),
        gt_flow,
        valid: warped.mask,
        in_bounds_fraction,
    })
}
