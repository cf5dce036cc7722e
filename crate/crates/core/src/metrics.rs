//! Depth-error metrics: RMSE, relative errors, and threshold accuracies,
//! with optional median scaling to resolve the scale ambiguity of monocular
//! predictions. Evaluation is restricted to pixels valid in both maps whose
//! ground truth lies in a configurable depth range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;

/// Threshold accuracies use the conventional ratios 1.25, 1.25², 1.25³.
const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.5625, 1.953125];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// Rescale predictions by median(gt)/median(pred) before scoring.
    pub median_scale: bool,
    /// Ground-truth pixels outside [min_depth, max_depth] are excluded;
    /// predictions are clamped into the same range after scaling.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            median_scale: true,
            min_depth: 0.1,
            max_depth: 10.0,
        }
    }
}

/// One evaluation record. `scale_factor` is the median-scaling ratio that
/// was applied (1 when scaling is off), surfaced so reports are auditable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    pub scale_factor: f64,
}

fn median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mid = (values.len() - 1) / 2;
    *values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Scores a prediction against ground truth of the same dimensions.
///
/// Errors when no pixel is valid in both maps within the ground-truth depth
/// range, or (defensively — the map type should make it impossible) when a
/// valid ground-truth pixel holds a non-positive value.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch {
            what: "prediction vs ground truth",
            expected_w: gt.width(),
            expected_h: gt.height(),
            got_w: pred.width(),
            got_h: pred.height(),
        });
    }
    let zero_gt = gt
        .values()
        .iter()
        .zip(gt.mask())
        .filter(|(&v, &m)| m && v <= 0.0)
        .count();
    if zero_gt > 0 {
        return Err(Error::ZeroGroundTruth { count: zero_gt });
    }

    let n = pred.values().len();
    let mut joint = Vec::new();
    for i in 0..n {
        let g = gt.values()[i];
        if pred.mask()[i] && gt.mask()[i] && g >= opts.min_depth && g <= opts.max_depth {
            joint.push(i);
        }
    }
    if joint.is_empty() {
        return Err(Error::NoValidOverlap);
    }

    let scale_factor = if opts.median_scale {
        let mut gv: Vec<f64> = joint.iter().map(|&i| gt.values()[i]).collect();
        let mut pv: Vec<f64> = joint.iter().map(|&i| pred.values()[i]).collect();
        median(&mut gv) / median(&mut pv)
    } else {
        1.0
    };

    let mut sq_sum = 0.0;
    let mut abs_rel_sum = 0.0;
    let mut sq_rel_sum = 0.0;
    let mut delta_counts = [0usize; 3];
    for &i in &joint {
        let g = gt.values()[i];
        let p = (pred.values()[i] * scale_factor).clamp(opts.min_depth, opts.max_depth);
        let d = p - g;
        sq_sum += d * d;
        abs_rel_sum += d.abs() / g;
        sq_rel_sum += d * d / g;
        let ratio = (p / g).max(g / p);
        for (k, &t) in DELTA_THRESHOLDS.iter().enumerate() {
            if ratio < t {
                delta_counts[k] += 1;
            }
        }
    }
    let m = joint.len() as f64;
    Ok(MetricReport {
        rmse: (sq_sum / m).sqrt(),
        abs_rel: abs_rel_sum / m,
        sq_rel: sq_rel_sum / m,
        delta1: delta_counts[0] as f64 / m,
        delta2: delta_counts[1] as f64 / m,
        delta3: delta_counts[2] as f64 / m,
        n_pixels: joint.len(),
        scale_factor,
    })
}

/// Unweighted mean of per-frame metrics; pixel counts are summed and the
/// scale factor reported as its mean.
pub fn aggregate_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let m = reports.len() as f64;
    let mut agg = MetricReport {
        rmse: 0.0,
        abs_rel: 0.0,
        sq_rel: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        n_pixels: 0,
        scale_factor: 0.0,
    };
    for r in reports {
        agg.rmse += r.rmse;
        agg.abs_rel += r.abs_rel;
        agg.sq_rel += r.sq_rel;
        agg.delta1 += r.delta1;
        agg.delta2 += r.delta2;
        agg.delta3 += r.delta3;
        agg.n_pixels += r.n_pixels;
        agg.scale_factor += r.scale_factor;
    }
    agg.rmse /= m;
    agg.abs_rel /= m;
    agg.sq_rel /= m;
    agg.delta1 /= m;
    agg.delta2 /= m;
    agg.delta3 /= m;
    agg.scale_factor /= m;
    Some(agg)
}

/// One machine-readable record per row: `{"label": ..., metrics...}`.
pub fn reports_json(rows: &[(String, MetricReport)]) -> String {
    let records: Vec<serde_json::Value> = rows
        .iter()
        .map(|(label, r)| {
            let mut v = serde_json::to_value(r).expect("plain struct serializes");
            v.as_object_mut()
                .unwrap()
                .insert("label".into(), serde_json::Value::String(label.clone()));
            v
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("json array serializes")
}

/// Aligned plain-text table in the conventional column order:
/// RMSE, Abs Rel, Sq Rel, then the three threshold accuracies.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut label_w = "sequence".len();
    for (label, _) in rows {
        label_w = label_w.max(label.len());
    }
    let mut out = format!(
        "{:label_w$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>9}  {:>9}\n",
        "sequence", "RMSE", "AbsRel", "SqRel", "d<1.25", "d<1.25^2", "d<1.25^3",
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{:label_w$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>8.3}  {:>9.3}  {:>9.3}\n",
            label, r.rmse, r.abs_rel, r.sq_rel, r.delta1, r.delta2, r.delta3,
        ));
    }
    out
}
