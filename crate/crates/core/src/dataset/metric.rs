//! Pixel-threshold keypoint accuracy.
//!
//! `AP^k` is the percentage of visible keypoints whose prediction lies within
//! `k` pixels of the ground truth, averaged per frame. Frames without visible
//! keypoints are skipped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{clip_dir, load_annotations, DatasetManifest, ANNOTATION_FILE};

pub const DEFAULT_AP_THRESHOLDS: [f64; 3] = [5.0, 10.0, 15.0];

/// `AP^k` for each threshold, in percent.
pub fn compute_ap(
    preds: &[Vec<[f64; 2]>],
    gts: &[Vec<[f64; 3]>],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidArgument(
            "thresholds must be finite and non-negative".into(),
        ));
    }
    let mut sums = vec![0.0; thresholds.len()];
    let mut frames = 0usize;
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Dimension(format!(
                "frame {i}: {} predicted keypoints for {}",
                p.len(),
                g.len()
            )));
        }
        let dists: Vec<f64> = p
            .iter()
            .zip(g)
            .filter(|(_, g)| g[2] > 0.0)
            .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
            .collect();
        if dists.is_empty() {
            continue;
        }
        frames += 1;
        for (s, t) in sums.iter_mut().zip(thresholds) {
            *s += dists.iter().filter(|d| **d <= *t).count() as f64 / dists.len() as f64;
        }
    }
    if frames == 0 {
        return Err(Error::InvalidArgument(
            "no frame has a visible keypoint".into(),
        ));
    }
    Ok(sums
        .into_iter()
        .map(|s| 100.0 * s / frames as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub frame_index: usize,
    /// `(u, v)` per joint; any further entries per joint are ignored.
    pub kp2d: Vec<Vec<f64>>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::schema(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut buf, p).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

type FrameKey = (String, usize);

fn groundtruth(root: &Path, split: Option<&str>) -> Result<BTreeMap<FrameKey, Vec<[f64; 3]>>> {
    let manifest = DatasetManifest::load(root)?;
    let mut out = BTreeMap::new();
    for (name, entry) in manifest.splits.iter() {
        if split.is_some_and(|s| s != name) {
            continue;
        }
        for clip in &entry.clips {
            let records =
                load_annotations(&clip_dir(root, name, &clip.clip_id).join(ANNOTATION_FILE))?;
            for r in records {
                out.insert((r.clip_id.clone(), r.frame_index), r.kp2d);
            }
        }
    }
    if let Some(s) = split {
        if manifest.splits.get(s).is_none() {
            return Err(Error::InvalidArgument(format!("unknown split {s:?}")));
        }
    }
    Ok(out)
}

/// Ground-truth 2D keypoints of a dataset written as predictions.
pub fn groundtruth_predictions(root: &Path, split: Option<&str>) -> Result<Vec<PredictionRecord>> {
    Ok(groundtruth(root, split)?
        .into_iter()
        .map(|((clip_id, frame_index), kp)| PredictionRecord {
            clip_id,
            frame_index,
            kp2d: kp.iter().map(|k| k.to_vec()).collect(),
        })
        .collect())
}

/// Scores predictions against every frame of `split` (all splits if `None`).
/// Every ground-truth frame needs exactly one prediction.
pub fn evaluate_predictions(
    root: &Path,
    split: Option<&str>,
    preds: &[PredictionRecord],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let gt = groundtruth(root, split)?;
    let mut by_key: BTreeMap<FrameKey, &PredictionRecord> = BTreeMap::new();
    for p in preds {
        if by_key
            .insert((p.clip_id.clone(), p.frame_index), p)
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "two predictions for {} frame {}",
                p.clip_id, p.frame_index
            )));
        }
    }
    if let Some(key) = by_key.keys().find(|k| !gt.contains_key(*k)) {
        return Err(Error::Dimension(format!(
            "prediction for unknown frame {} {}",
            key.0, key.1
        )));
    }
    let mut p_all = Vec::with_capacity(gt.len());
    let mut g_all = Vec::with_capacity(gt.len());
    for (key, g) in gt {
        let p = by_key.get(&key).ok_or_else(|| {
            Error::Dimension(format!("no prediction for {} frame {}", key.0, key.1))
        })?;
        let kp = p
            .kp2d
            .iter()
            .map(|k| match k.as_slice() {
                [u, v, ..] => Ok([*u, *v]),
                _ => Err(Error::InvalidArgument(format!(
                    "{} frame {}: keypoint needs u and v",
                    key.0, key.1
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        p_all.push(kp);
        g_all.push(g);
    }
    compute_ap(&p_all, &g_all, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(points: &[(f64, f64, f64)]) -> Vec<[f64; 3]> {
        points.iter().map(|&(u, v, s)| [u, v, s]).collect()
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![
            gt(&[(10.0, 10.0, 1.0), (20.0, 5.0, 1.0)]),
            gt(&[(3.0, 4.0, 1.0)]),
        ];
        let p: Vec<Vec<[f64; 2]>> = g
            .iter()
            .map(|f| f.iter().map(|k| [k[0], k[1]]).collect())
            .collect();
        assert_eq!(
            compute_ap(&p, &g, &DEFAULT_AP_THRESHOLDS).unwrap(),
            vec![100.0; 3]
        );
    }

    #[test]
    fn seven_pixel_offset() {
        let g = vec![gt(&[(10.0, 10.0, 1.0), (40.0, 30.0, 1.0)])];
        let p = vec![vec![[17.0, 10.0], [40.0, 23.0]]];
        assert_eq!(
            compute_ap(&p, &g, &DEFAULT_AP_THRESHOLDS).unwrap(),
            vec![0.0, 100.0, 100.0]
        );
    }

    #[test]
    fn hand_counted_frame() {
        let g = vec![gt(&[
            (0.0, 0.0, 1.0),
            (50.0, 0.0, 1.0),
            (0.0, 50.0, 1.0),
            (50.0, 50.0, 1.0),
        ])];
        let p = vec![vec![[3.0, 4.0], [50.0, 2.0], [12.0, 50.0], [50.0, 62.0]]];
        assert_eq!(
            compute_ap(&p, &g, &DEFAULT_AP_THRESHOLDS).unwrap(),
            vec![50.0, 50.0, 100.0]
        );
    }

    #[test]
    fn invisible_keypoints_are_ignored() {
        let g = vec![gt(&[(0.0, 0.0, 1.0), (9.0, 9.0, 0.0)])];
        let p = vec![vec![[0.0, 0.0], [900.0, 900.0]]];
        assert_eq!(compute_ap(&p, &g, &[5.0]).unwrap(), vec![100.0]);
    }

    #[test]
    fn errors() {
        let g = vec![gt(&[(0.0, 0.0, 0.0)])];
        assert!(compute_ap(&[vec![[0.0, 0.0]]], &g, &[5.0]).is_err());
        assert!(compute_ap(&[], &g, &[5.0]).is_err());
        let g = vec![gt(&[(0.0, 0.0, 1.0)])];
        assert!(compute_ap(&[vec![]], &g, &[5.0]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_threshold(
            frames in prop::collection::vec(prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..30.0, 0.0f64..30.0, any::<bool>()), 1..8), 1..6),
            mut ts in prop::collection::vec(0.0f64..40.0, 2..6),
        ) {
            let g: Vec<Vec<[f64; 3]>> = frames.iter().map(|f| f.iter().map(|k| [k.0, k.1, if k.4 { 1.0 } else { 0.0 }]).collect()).collect();
            let p: Vec<Vec<[f64; 2]>> = frames.iter().map(|f| f.iter().map(|k| [k.0 + k.2, k.1 - k.3]).collect()).collect();
            ts.sort_by(f64::total_cmp);
            if let Ok(ap) = compute_ap(&p, &g, &ts) {
                for w in ap.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
                prop_assert!(ap.iter().all(|a| (0.0..=100.0).contains(a)));
            }
        }
    }
}
