//! Post-prediction cleanup for depth/disparity maps: flip-ensemble
//! averaging, edge-band blending of a prediction with its flipped-input
//! counterpart, and median/max filtering against "black hole" artifacts.
//!
//! Everything here is elementwise and deterministic; the maps may hold depth
//! or disparity — the operations don't care, callers pick the value space.

use crate::error::{Error, Result};
use crate::image::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Median,
    Max,
}

/// A sliding-window filter choice: kind plus odd window side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub size: usize,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, size: usize) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::InvalidInput {
                what: "filter size",
                reason: format!("window side must be odd and at least 3, got {size}"),
            });
        }
        Ok(Self { kind, size })
    }

    pub fn median(size: usize) -> Result<Self> {
        Self::new(FilterKind::Median, size)
    }

    pub fn max(size: usize) -> Result<Self> {
        Self::new(FilterKind::Max, size)
    }

    fn radius(&self) -> usize {
        self.size / 2
    }
}

impl std::fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            FilterKind::Median => "median",
            FilterKind::Max => "max",
        };
        write!(f, "{kind}-{}", self.size)
    }
}

fn require_same_dims(a: &DepthMap, b: &DepthMap, what: &'static str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch {
            what,
            expected_w: a.width(),
            expected_h: a.height(),
            got_w: b.width(),
            got_h: b.height(),
        });
    }
    Ok(())
}

fn average_maps(a: &DepthMap, b: &DepthMap) -> DepthMap {
    let (w, h) = (a.width(), a.height());
    let mut values = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for i in 0..w * h {
        if a.mask()[i] && b.mask()[i] {
            values[i] = (a.values()[i] + b.values()[i]) / 2.0;
            mask[i] = true;
        }
    }
    DepthMap::from_values_masked(w, h, values, mask)
        .expect("mean of positive values is positive")
}

/// Flip-ensemble combination: averages a map with the horizontally
/// re-aligned output of a second model that saw flipped inputs. The second
/// argument lives in the flipped frame and is un-flipped here; a pixel stays
/// valid only when both estimates cover it.
pub fn elwf_combine(disp_a: &DepthMap, disp_b_flipped_domain: &DepthMap) -> Result<DepthMap> {
    require_same_dims(disp_a, disp_b_flipped_domain, "flip-ensemble pair")?;
    Ok(average_maps(disp_a, &disp_b_flipped_domain.flip_horizontal()))
}

/// Result of [`godard_postprocess`]; `narrow_fallback` flags maps too narrow
/// for edge bands, for which plain averaging was used instead.
#[derive(Debug, Clone)]
pub struct GodardBlend {
    pub map: DepthMap,
    pub narrow_fallback: bool,
}

/// Edge-band blend of a prediction and its flipped-input prediction (already
/// re-aligned to the original orientation): the leftmost 5% of columns come
/// from the first map, the rightmost 5% from the second, and the middle is
/// averaged. Suppresses the disparity ramps flip ensembles produce at the
/// image borders. Maps narrower than 20 columns cannot spare a whole 5% band
/// and fall back to plain averaging, flagged.
pub fn godard_postprocess(
    disp: &DepthMap,
    disp_from_flipped: &DepthMap,
) -> Result<GodardBlend> {
    require_same_dims(disp, disp_from_flipped, "edge-blend pair")?;
    let (w, h) = (disp.width(), disp.height());
    if w < 20 {
        return Ok(GodardBlend {
            map: average_maps(disp, disp_from_flipped),
            narrow_fallback: true,
        });
    }
    let band = (0.05 * w as f64).ceil() as usize;
    let mut values = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x < band {
                values[i] = disp.values()[i];
                mask[i] = disp.mask()[i];
            } else if x >= w - band {
                values[i] = disp_from_flipped.values()[i];
                mask[i] = disp_from_flipped.mask()[i];
            } else if disp.mask()[i] && disp_from_flipped.mask()[i] {
                values[i] = (disp.values()[i] + disp_from_flipped.values()[i]) / 2.0;
                mask[i] = true;
            }
        }
    }
    Ok(GodardBlend {
        map: DepthMap::from_values_masked(w, h, values, mask)
            .expect("copies and means of positive values are positive"),
        narrow_fallback: false,
    })
}

/// Sliding-window median or max with replicate border padding: out-of-range
/// window slots clamp to the nearest edge pixel, so border values enter the
/// population multiple times. Invalid pixels are excluded from the
/// population; a pixel's output is invalid only when its entire window is.
/// The median of an even-sized population takes the lower middle element —
/// no averaging, so filtered values always exist in the input.
pub fn apply_filter(depth: &DepthMap, spec: &FilterSpec) -> DepthMap {
    let (w, h) = (depth.width(), depth.height());
    let r = spec.radius() as isize;
    let mut values = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    let mut window = Vec::with_capacity(spec.size * spec.size);
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    if depth.is_valid(xx, yy) {
                        window.push(depth.value(xx, yy));
                    }
                }
            }
            if window.is_empty() {
                continue;
            }
            let i = y as usize * w + x as usize;
            values[i] = match spec.kind {
                FilterKind::Median => {
                    let mid = (window.len() - 1) / 2;
                    *window
                        .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
                        .1
                }
                FilterKind::Max => window.iter().copied().fold(f64::MIN, f64::max),
            };
            mask[i] = true;
        }
    }
    DepthMap::from_values_masked(w, h, values, mask)
        .expect("filter outputs are drawn from valid input values")
}

/// The filter configurations the filter-study workflow ranks by default:
/// no filtering, a small max filter, and two median sizes.
pub fn default_filter_grid() -> Vec<Option<FilterSpec>> {
    vec![
        None,
        Some(FilterSpec::max(15).unwrap()),
        Some(FilterSpec::median(35).unwrap()),
        Some(FilterSpec::median(55).unwrap()),
    ]
}
