//! Point-to-point ICP and the 3D alignment loss. The residual transform and
//! per-point residuals of an alignment quantify how inconsistent two
//! back-projected depth maps are under a candidate pose; during
//! differentiation both are treated as constants, so the gradient simply
//! pushes warped points toward their ICP-corrected positions.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{backproject, matrix_to_axis_angle, Intrinsics, RigidTransform};
use crate::image::DepthMap;

/// Above this destination-cloud size nearest-neighbor queries go through a
/// voxel grid instead of exhaustive search. Both paths return identical
/// results (same distances, same tie-breaking by lowest index).
const GRID_NN_THRESHOLD: usize = 5000;

const PER_SCALE_MAX_ITERS: usize = 30;
const PER_SCALE_TOL: f64 = 1e-10;

/// A set of 3D points in camera coordinates (meters), optionally remembering
/// which flat pixel index each point came from.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub source_pixel: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::validate(&points)?;
        Ok(Self {
            points,
            source_pixel: None,
        })
    }

    pub fn with_pixels(points: Vec<Vector3<f64>>, pixels: Vec<usize>) -> Result<Self> {
        Self::validate(&points)?;
        if points.len() != pixels.len() {
            return Err(Error::InvalidInput {
                what: "point cloud",
                reason: format!(
                    "{} points but {} pixel indices",
                    points.len(),
                    pixels.len()
                ),
            });
        }
        Ok(Self {
            points,
            source_pixel: Some(pixels),
        })
    }

    /// Back-projects every valid pixel of a depth map.
    pub fn from_depth(depth: &DepthMap, k: &Intrinsics) -> Self {
        let pts = backproject(depth, k);
        let mut points = Vec::with_capacity(pts.len());
        let mut pixels = Vec::with_capacity(pts.len());
        for (idx, p) in pts {
            points.push(p);
            pixels.push(idx);
        }
        Self {
            points,
            source_pixel: Some(pixels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(points: &[Vector3<f64>]) -> Result<()> {
        for p in points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidInput {
                    what: "point cloud",
                    reason: "non-finite coordinate".into(),
                });
            }
        }
        Ok(())
    }
}

/// Outcome of an ICP run: the residual rigid correction, per-correspondence
/// residuals `dst - transform(src)`, and the (pre-fit) mean squared
/// correspondence distance of every iteration.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub residuals: Vec<Vector3<f64>>,
    /// Index into the source cloud for each residual.
    pub src_indices: Vec<usize>,
    /// Index into the destination cloud for each residual.
    pub dst_indices: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub mse_per_iteration: Vec<f64>,
}

fn nearest_brute(query: &Vector3<f64>, points: &[Vector3<f64>]) -> (usize, f64) {
    let mut best_idx = 0;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d2 = (query - p).norm_squared();
        if d2 < best_d2 || (d2 == best_d2 && i < best_idx) {
            best_d2 = d2;
            best_idx = i;
        }
    }
    (best_idx, best_d2)
}

/// Uniform voxel grid over the destination cloud. Queries expand outward in
/// Chebyshev rings of cells; a ring at distance `rr` can only contain points
/// at least `(rr - 1) * cell` away, so once the best distance drops strictly
/// below that bound the search is provably complete — results match brute
/// force exactly, ties included.
struct VoxelGrid {
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    lo: (i64, i64, i64),
    hi: (i64, i64, i64),
}

impl VoxelGrid {
    fn build(points: &[Vector3<f64>]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).amax();
        let cell = if extent > 0.0 {
            extent / (points.len() as f64).cbrt()
        } else {
            1.0
        };
        let mut grid = VoxelGrid {
            cell,
            origin: min,
            cells: HashMap::new(),
            lo: (i64::MAX, i64::MAX, i64::MAX),
            hi: (i64::MIN, i64::MIN, i64::MIN),
        };
        for (i, p) in points.iter().enumerate() {
            let key = grid.key(p);
            grid.lo = (grid.lo.0.min(key.0), grid.lo.1.min(key.1), grid.lo.2.min(key.2));
            grid.hi = (grid.hi.0.max(key.0), grid.hi.1.max(key.1), grid.hi.2.max(key.2));
            grid.cells.entry(key).or_default().push(i);
        }
        grid
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            ((p.x - self.origin.x) / self.cell).floor() as i64,
            ((p.y - self.origin.y) / self.cell).floor() as i64,
            ((p.z - self.origin.z) / self.cell).floor() as i64,
        )
    }

    fn nearest(&self, query: &Vector3<f64>, points: &[Vector3<f64>]) -> (usize, f64) {
        let qc = self.key(query);
        let max_ring = [
            (qc.0 - self.lo.0).abs().max((self.hi.0 - qc.0).abs()),
            (qc.1 - self.lo.1).abs().max((self.hi.1 - qc.1).abs()),
            (qc.2 - self.lo.2).abs().max((self.hi.2 - qc.2).abs()),
        ]
        .into_iter()
        .max()
        .unwrap()
        .max(0);

        let mut best_idx = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        for rr in 0..=max_ring {
            if best_d2.is_finite() {
                let safe = (rr - 1).max(0) as f64 * self.cell;
                if best_d2 < safe * safe {
                    break;
                }
            }
            for dx in -rr..=rr {
                for dy in -rr..=rr {
                    for dz in -rr..=rr {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != rr {
                            continue;
                        }
                        let key = (qc.0 + dx, qc.1 + dy, qc.2 + dz);
                        if key.0 < self.lo.0
                            || key.0 > self.hi.0
                            || key.1 < self.lo.1
                            || key.1 > self.hi.1
                            || key.2 < self.lo.2
                            || key.2 > self.hi.2
                        {
                            continue;
                        }
                        let Some(bucket) = self.cells.get(&key) else {
                            continue;
                        };
                        for &i in bucket {
                            let d2 = (query - &points[i]).norm_squared();
                            if d2 < best_d2 || (d2 == best_d2 && i < best_idx) {
                                best_d2 = d2;
                                best_idx = i;
                            }
                        }
                    }
                }
            }
        }
        (best_idx, best_d2)
    }
}

enum NnIndex<'a> {
    Brute(&'a [Vector3<f64>]),
    Grid(VoxelGrid, &'a [Vector3<f64>]),
}

impl<'a> NnIndex<'a> {
    fn build(points: &'a [Vector3<f64>]) -> Self {
        if points.len() >= GRID_NN_THRESHOLD {
            NnIndex::Grid(VoxelGrid::build(points), points)
        } else {
            NnIndex::Brute(points)
        }
    }

    fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        match self {
            NnIndex::Brute(points) => nearest_brute(query, points),
            NnIndex::Grid(grid, points) => grid.nearest(query, points),
        }
    }
}

/// Lower-middle median of an unsorted slice.
fn median(values: &mut [f64]) -> f64 {
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Best rigid dst = R * src + t over the given correspondence pairs, by the
/// closed-form SVD solution on the cross-covariance. A (near-)rank-deficient
/// cross-covariance means the pairs are collinear or coincident and the
/// rotation is not determined.
fn fit_rigid(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    pairs: &[(usize, usize)],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = pairs.len() as f64;
    let mut c_src = Vector3::zeros();
    let mut c_dst = Vector3::zeros();
    for &(i, j) in pairs {
        c_src += src[i];
        c_dst += dst[j];
    }
    c_src /= n;
    c_dst /= n;
    let mut cross = Matrix3::zeros();
    for &(i, j) in pairs {
        cross += (src[i] - c_src) * (dst[j] - c_dst).transpose();
    }
    let svd = cross.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= sv[0].max(1e-300) * 1e-9 {
        return Err(Error::DegenerateCloud {
            points: pairs.len(),
            needed: 3,
        });
    }
    let u = svd.u.expect("svd requested u");
    let v = svd.v_t.expect("svd requested v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = c_dst - r * c_src;
    Ok((r, t))
}

/// Aligns `src` onto `dst` by alternating nearest-neighbor correspondence
/// and closed-form rigid fitting.
///
/// Per iteration, correspondences farther than `max(3 * median distance,
/// 1e-9)` are rejected before the fit. If the surviving correspondences are
/// already in perfect contact (zero mean squared distance) the current
/// transform is final and is returned untouched, keeping exact alignments
/// exact. Convergence is declared when one fit changes the transform by at
/// most `tol` in both rotation angle and translation.
pub fn icp_align(
    src: &PointCloud,
    dst: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult> {
    for (cloud, name) in [(src, "source"), (dst, "destination")] {
        if cloud.len() < 3 {
            let _ = name;
            return Err(Error::DegenerateCloud {
                points: cloud.len(),
                needed: 3,
            });
        }
    }
    assert!(max_iters >= 1, "icp needs at least one iteration");

    let index = NnIndex::build(&dst.points);
    let mut rot = Matrix3::identity();
    let mut tr = Vector3::zeros();
    let mut mse_per_iteration = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut kept: Vec<(usize, usize)> = Vec::new();

    for _ in 0..max_iters {
        iterations += 1;
        let mut corr = Vec::with_capacity(src.len());
        for (i, p) in src.points.iter().enumerate() {
            let moved = rot * p + tr;
            let (j, d2) = index.nearest(&moved);
            corr.push((i, j, d2.sqrt()));
        }
        let mut dists: Vec<f64> = corr.iter().map(|c| c.2).collect();
        let threshold = (3.0 * median(&mut dists)).max(1e-9);
        kept.clear();
        let mut sq_sum = 0.0;
        for &(i, j, d) in &corr {
            if d <= threshold {
                kept.push((i, j));
                sq_sum += d * d;
            }
        }
        if kept.len() < 3 {
            return Err(Error::DegenerateCloud {
                points: kept.len(),
                needed: 3,
            });
        }
        let mse = sq_sum / kept.len() as f64;
        mse_per_iteration.push(mse);
        if mse == 0.0 {
            converged = true;
            break;
        }
        let (rot_new, tr_new) = fit_rigid(&src.points, &dst.points, &kept)?;
        let delta_angle = matrix_to_axis_angle(&(rot_new * rot.transpose())).norm();
        let delta_t = (tr_new - tr).norm();
        rot = rot_new;
        tr = tr_new;
        if delta_angle <= tol && delta_t <= tol {
            converged = true;
            break;
        }
    }

    let mut residuals = Vec::with_capacity(kept.len());
    let mut src_indices = Vec::with_capacity(kept.len());
    let mut dst_indices = Vec::with_capacity(kept.len());
    for &(i, j) in &kept {
        residuals.push(dst.points[j] - (rot * src.points[i] + tr));
        src_indices.push(i);
        dst_indices.push(j);
    }
    Ok(IcpResult {
        transform: RigidTransform::from_rotation_matrix(&rot, tr),
        residuals,
        src_indices,
        dst_indices,
        converged,
        iterations,
        mse_per_iteration,
    })
}

/// The 3D alignment loss: elementwise L1 deviation of the residual transform
/// from identity over the full 4x4 homogeneous matrix, plus the L1 norms of
/// all point residuals.
pub fn icp_3d_loss(result: &IcpResult) -> f64 {
    let h = result.transform.to_homogeneous();
    let id = Matrix4::<f64>::identity();
    let mut loss = 0.0;
    for row in 0..4 {
        for col in 0..4 {
            loss += (h[(row, col)] - id[(row, col)]).abs();
        }
    }
    for r in &result.residuals {
        loss += r.x.abs() + r.y.abs() + r.z.abs();
    }
    loss
}

/// 3D loss of one pyramid level; a degenerate alignment contributes 0 and is
/// flagged instead of failing the whole evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale3dLoss {
    pub loss: f64,
    pub skipped: bool,
}

/// Back-projects both depth maps at the level's resolution, moves the target
/// cloud by the pose and scores its ICP alignment against the source-frame
/// cloud.
pub fn per_scale_3d_loss(
    depth_target: &DepthMap,
    depth_source: &DepthMap,
    pose: &RigidTransform,
    k: &Intrinsics,
) -> Scale3dLoss {
    let target = backproject(depth_target, k);
    let source = backproject(depth_source, k);
    let moved: Vec<Vector3<f64>> = target.iter().map(|(_, p)| pose.apply(p)).collect();
    let dst: Vec<Vector3<f64>> = source.iter().map(|(_, p)| *p).collect();
    if moved.len() < 3 || dst.len() < 3 {
        return Scale3dLoss {
            loss: 0.0,
            skipped: true,
        };
    }
    let src_cloud = PointCloud {
        points: moved,
        source_pixel: None,
    };
    let dst_cloud = PointCloud {
        points: dst,
        source_pixel: None,
    };
    match icp_align(&src_cloud, &dst_cloud, PER_SCALE_MAX_ITERS, PER_SCALE_TOL) {
        Ok(result) => Scale3dLoss {
            loss: icp_3d_loss(&result),
            skipped: false,
        },
        Err(Error::DegenerateCloud { .. }) => Scale3dLoss {
            loss: 0.0,
            skipped: true,
        },
        Err(other) => panic!("unexpected icp failure: {other}"),
    }
}
