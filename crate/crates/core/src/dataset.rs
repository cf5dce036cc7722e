//! TUM-RGB-D-style sequence handling: timestamped listing files, greedy
//! timestamp association between the RGB and depth streams, and
//! deterministic subsampling into train/test splits.

use crate::error::{Error, Result};
use std::path::Path;

/// One line of a `rgb.txt` / `depth.txt` listing: a fractional-second
/// timestamp and a path relative to the listing's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ListingEntry {
    pub timestamp: f64,
    pub path: String,
}

/// An associated RGB/depth pair. Records exist only for successful pairings;
/// entries that found no partner within tolerance are dropped by
/// [`associate_frames`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub rgb_timestamp: f64,
    pub depth_timestamp: f64,
    pub rgb_path: String,
    pub depth_path: String,
}

impl FrameRecord {
    /// The pair's reference time (the RGB timestamp).
    pub fn timestamp(&self) -> f64 {
        self.rgb_timestamp
    }

    pub fn dt(&self) -> f64 {
        (self.rgb_timestamp - self.depth_timestamp).abs()
    }
}

/// Sequence ingestion parameters. Defaults: every 5th frame, 320x192 RGB,
/// 20 ms association tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    pub stride: usize,
    pub target_width: usize,
    pub target_height: usize,
    pub max_dt: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            target_width: 320,
            target_height: 192,
            max_dt: 0.02,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::InvalidInput {
                what: "sequence config",
                reason: "stride must be at least 1".into(),
            });
        }
        if !(self.max_dt > 0.0) {
            return Err(Error::InvalidInput {
                what: "sequence config",
                reason: format!("association tolerance must be positive, got {}", self.max_dt),
            });
        }
        Ok(())
    }
}

/// Parses a TUM listing: `timestamp path` per line, `#` starts a comment,
/// blank lines ignored. Timestamps must be strictly increasing.
pub fn parse_listing(text: &str, origin: &Path) -> Result<Vec<ListingEntry>> {
    let mut entries: Vec<ListingEntry> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (ts, path) = match (parts.next(), parts.next(), parts.next()) {
            (Some(ts), Some(path), None) => (ts, path),
            _ => {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 'timestamp path'", lineno + 1),
                ))
            }
        };
        let timestamp: f64 = ts.parse().map_err(|_| {
            Error::format(origin, format!("line {}: bad timestamp {ts:?}", lineno + 1))
        })?;
        if !timestamp.is_finite() {
            return Err(Error::format(
                origin,
                format!("line {}: non-finite timestamp", lineno + 1),
            ));
        }
        if let Some(prev) = entries.last() {
            if timestamp <= prev.timestamp {
                return Err(Error::format(
                    origin,
                    format!(
                        "line {}: timestamps must be strictly increasing ({} after {})",
                        lineno + 1,
                        timestamp,
                        prev.timestamp
                    ),
                ));
            }
        }
        entries.push(ListingEntry {
            timestamp,
            path: path.to_string(),
        });
    }
    Ok(entries)
}

/// Greedy nearest-timestamp association: among all candidate pairs within
/// `max_dt`, repeatedly commit the globally closest pair whose frames are
/// both still free (ties broken by listing order, so the result is
/// deterministic). Each frame of either stream is used at most once.
pub fn associate_frames(
    rgb: &[ListingEntry],
    depth: &[ListingEntry],
    max_dt: f64,
) -> Result<Vec<FrameRecord>> {
    if rgb.is_empty() || depth.is_empty() {
        return Err(Error::InsufficientData {
            what: "timestamp association",
            needed: 1,
            available: 0,
        });
    }
    if !(max_dt >= 0.0) {
        return Err(Error::InvalidInput {
            what: "association tolerance",
            reason: format!("must be non-negative, got {max_dt}"),
        });
    }
    // Candidate pairs, found by windowing the sorted depth timestamps.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in rgb.iter().enumerate() {
        let lo = depth.partition_point(|d| d.timestamp < r.timestamp - max_dt);
        for (j, d) in depth.iter().enumerate().skip(lo) {
            if d.timestamp > r.timestamp + max_dt {
                break;
            }
            candidates.push(((r.timestamp - d.timestamp).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut rgb_used = vec![false; rgb.len()];
    let mut depth_used = vec![false; depth.len()];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for &(_, i, j) in &candidates {
        if !rgb_used[i] && !depth_used[j] {
            rgb_used[i] = true;
            depth_used[j] = true;
            chosen.push((i, j));
        }
    }
    chosen.sort_by_key(|&(i, _)| i);
    Ok(chosen
        .into_iter()
        .map(|(i, j)| FrameRecord {
            rgb_timestamp: rgb[i].timestamp,
            depth_timestamp: depth[j].timestamp,
            rgb_path: rgb[i].path.clone(),
            depth_path: depth[j].path.clone(),
        })
        .collect())
}

/// Renders associations in the conventional four-column form:
/// `rgb_ts rgb_path depth_ts depth_path`.
pub fn format_association(records: &[FrameRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{} {} {} {}\n",
            r.rgb_timestamp, r.rgb_path, r.depth_timestamp, r.depth_path
        ));
    }
    out
}

/// Takes every `cfg.stride`-th record (starting at index 0) into the
/// training set, up to `train_count`; everything else — including skipped
/// stride positions — forms the test set in original order. An empty test
/// set is legal (the caller may want to warn); an undersized training pool
/// is an error that reports the available count.
pub fn subsample_and_split(
    records: &[FrameRecord],
    cfg: &SequenceConfig,
    train_count: usize,
) -> Result<(Vec<FrameRecord>, Vec<FrameRecord>)> {
    cfg.validate()?;
    let pool: Vec<usize> = (0..records.len()).step_by(cfg.stride).collect();
    if pool.len() < train_count {
        return Err(Error::InsufficientData {
            what: "training split",
            needed: train_count,
            available: pool.len(),
        });
    }
    let train_idx: Vec<usize> = pool.into_iter().take(train_count).collect();
    let mut in_train = vec![false; records.len()];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let train = train_idx.iter().map(|&i| records[i].clone()).collect();
    let test = records
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_train[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn listing(stamps: &[f64]) -> Vec<ListingEntry> {
        stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| ListingEntry {
                timestamp: t,
                path: format!("frame{i}.png"),
            })
            .collect()
    }

    fn records(n: usize) -> Vec<FrameRecord> {
        (0..n)
            .map(|i| FrameRecord {
                rgb_timestamp: i as f64,
                depth_timestamp: i as f64,
                rgb_path: format!("rgb/{i}.png"),
                depth_path: format!("depth/{i}.png"),
            })
            .collect()
    }

    #[test]
    fn listings_skip_comments_and_blank_lines() {
        let text = "# header\n# more\n\n1.0 rgb/1.png\n2.5 rgb/2.png\n";
        let entries = parse_listing(text, &PathBuf::from("rgb.txt")).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].timestamp, 1.0);
        assert_eq!(entries[1].path, "rgb/2.png");
    }

    #[test]
    fn listings_reject_malformed_lines() {
        let origin = PathBuf::from("rgb.txt");
        assert!(parse_listing("notanumber rgb/1.png\n", &origin).is_err());
        assert!(parse_listing("1.0\n", &origin).is_err());
        assert!(parse_listing("1.0 a.png extra\n", &origin).is_err());
    }

    #[test]
    fn listings_must_be_strictly_increasing() {
        let origin = PathBuf::from("rgb.txt");
        assert!(parse_listing("1.0 a.png\n1.0 b.png\n", &origin).is_err());
        assert!(parse_listing("2.0 a.png\n1.0 b.png\n", &origin).is_err());
    }

    #[test]
    fn identical_timestamps_all_match_with_zero_dt() {
        let rgb = listing(&[1.0, 2.0, 3.0]);
        let depth = listing(&[1.0, 2.0, 3.0]);
        let pairs = associate_frames(&rgb, &depth, 0.02).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.dt() == 0.0));
    }

    #[test]
    fn offsets_within_tolerance_match() {
        let rgb = listing(&[10.0]);
        let depth = listing(&[10.01]);
        let pairs = associate_frames(&rgb, &depth, 0.02).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].dt() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn offsets_beyond_tolerance_are_dropped() {
        let rgb = listing(&[10.0]);
        let depth = listing(&[10.05]);
        let pairs = associate_frames(&rgb, &depth, 0.02).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn zero_tolerance_keeps_only_exact_matches() {
        let rgb = listing(&[1.0, 2.0]);
        let depth = listing(&[1.0, 2.000001]);
        let pairs = associate_frames(&rgb, &depth, 0.0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].rgb_timestamp, 1.0);
    }

    #[test]
    fn each_frame_is_used_at_most_once_and_nearest_wins() {
        // Both RGB frames are within tolerance of the single depth frame;
        // the globally nearer one (0.011, dt 0.001) must take it.
        let rgb = listing(&[0.0, 0.011]);
        let depth = listing(&[0.01]);
        let pairs = associate_frames(&rgb, &depth, 0.02).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].rgb_timestamp, 0.011);
    }

    #[test]
    fn match_count_survives_swapping_the_streams() {
        let a = listing(&[0.0, 0.1, 0.2005, 0.31, 0.45]);
        let b = listing(&[0.002, 0.099, 0.2, 0.3, 0.42]);
        let forward = associate_frames(&a, &b, 0.02).unwrap();
        let swapped = associate_frames(&b, &a, 0.02).unwrap();
        assert_eq!(forward.len(), swapped.len());
    }

    #[test]
    fn association_rejects_empty_inputs() {
        let some = listing(&[1.0]);
        assert!(matches!(
            associate_frames(&[], &some, 0.02),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            associate_frames(&some, &[], 0.02),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn association_output_renders_four_columns() {
        let rgb = listing(&[1.0]);
        let depth = listing(&[1.01]);
        let pairs = associate_frames(&rgb, &depth, 0.02).unwrap();
        let text = format_association(&pairs);
        assert_eq!(text, "1 frame0.png 1.01 frame0.png\n");
    }

    #[test]
    fn split_takes_every_stride_th_record() {
        let recs = records(25);
        let cfg = SequenceConfig::default();
        let (train, test) = subsample_and_split(&recs, &cfg, 5).unwrap();
        let train_ts: Vec<f64> = train.iter().map(|r| r.rgb_timestamp).collect();
        assert_eq!(train_ts, vec![0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(test.len(), 20);
        // disjoint and order-preserving
        for pair in test.windows(2) {
            assert!(pair[0].rgb_timestamp < pair[1].rgb_timestamp);
        }
        for t in &train {
            assert!(!test.contains(t));
        }
    }

    #[test]
    fn split_covers_every_record_exactly_once() {
        let recs = records(23);
        let cfg = SequenceConfig {
            stride: 4,
            ..SequenceConfig::default()
        };
        let (train, test) = subsample_and_split(&recs, &cfg, 3).unwrap();
        assert_eq!(train.len() + test.len(), recs.len());
    }

    #[test]
    fn paper_scale_split_counts() {
        let recs = records(2500);
        let (train, test) =
            subsample_and_split(&recs, &SequenceConfig::default(), 500).unwrap();
        assert_eq!(train.len(), 500);
        assert_eq!(test.len(), 2000);
    }

    #[test]
    fn undersized_pool_reports_counts() {
        let recs = records(25);
        let err = subsample_and_split(&recs, &SequenceConfig::default(), 6).unwrap_err();
        match err {
            Error::InsufficientData {
                needed, available, ..
            } => {
                assert_eq!(needed, 6);
                assert_eq!(available, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn taking_everything_for_training_leaves_an_empty_test_set() {
        let recs = records(4);
        let cfg = SequenceConfig {
            stride: 1,
            ..SequenceConfig::default()
        };
        let (train, test) = subsample_and_split(&recs, &cfg, 4).unwrap();
        assert_eq!(train.len(), 4);
        assert!(test.is_empty());
    }

    #[test]
    fn splits_are_reproducible() {
        let recs = records(40);
        let cfg = SequenceConfig::default();
        let a = subsample_and_split(&recs, &cfg, 8).unwrap();
        let b = subsample_and_split(&recs, &cfg, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = SequenceConfig::default();
        cfg.stride = 0;
        assert!(cfg.validate().is_err());
        cfg = SequenceConfig::default();
        cfg.max_dt = 0.0;
        assert!(cfg.validate().is_err());
        assert!(SequenceConfig::default().validate().is_ok());
    }
}
