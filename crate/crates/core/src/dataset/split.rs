use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result, FORMAT_VERSION};

use super::{ClipMetadata, DatasetManifest, SplitEntry, Splits};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    /// Fraction of subjects held out for the test split.
    pub test_subjects: f64,
    /// Fraction of each remaining subject's clips assigned to validation.
    pub valid_clips: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            test_subjects: 0.25,
            valid_clips: 0.2,
        }
    }
}

fn entry(mut clips: Vec<ClipMetadata>) -> SplitEntry {
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let subjects: BTreeSet<String> = clips.iter().map(|c| c.subject_id.clone()).collect();
    SplitEntry {
        subject_ids: subjects.into_iter().collect(),
        clip_count: clips.len(),
        frame_count: clips.iter().map(|c| c.frame_count).sum(),
        clips,
    }
}

/// Holds out whole subjects for test, then divides each remaining subject's
/// clips between train and valid, keeping at least one train clip per subject.
pub fn split_subjects(
    sport: &str,
    clips: &[ClipMetadata],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&ratios.test_subjects) || !(0.0..=1.0).contains(&ratios.valid_clips) {
        return Err(Error::InvalidArgument(
            "split ratios must lie in [0, 1]".into(),
        ));
    }
    let k = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clips to split".into()))?
        .keypoint_count;
    let mut ids = BTreeSet::new();
    let mut by_subject: BTreeMap<&str, Vec<&ClipMetadata>> = BTreeMap::new();
    for c in clips {
        if c.keypoint_count != k {
            return Err(Error::schema(
                super::MANIFEST_FILE,
                format!(
                    "clip {} has {} keypoints, expected {k}",
                    c.clip_id, c.keypoint_count
                ),
            ));
        }
        if !ids.insert(c.clip_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "clip id {} repeated",
                c.clip_id
            )));
        }
        by_subject.entry(&c.subject_id).or_default().push(c);
    }
    let n = by_subject.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} subject(s) cannot form a disjoint test split; need at least 2"
        )));
    }
    let n_test = ((n as f64 * ratios.test_subjects).round() as usize).clamp(1, n - 1);
    let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
    subjects.shuffle(&mut rng::stream(seed, "split-subjects", 0));
    let test_subjects: BTreeSet<&str> = subjects[..n_test].iter().copied().collect();

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (subject, list) in &by_subject {
        let mut list: Vec<ClipMetadata> = list.iter().map(|c| (*c).clone()).collect();
        if test_subjects.contains(subject) {
            test.extend(list);
            continue;
        }
        list.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        list.shuffle(&mut rng::stream(seed, &format!("split-clips/{subject}"), 0));
        let m = list.len();
        let mut n_valid = (m as f64 * ratios.valid_clips).round() as usize;
        if m >= 2 && ratios.valid_clips > 0.0 {
            n_valid = n_valid.clamp(1, m - 1);
        } else if m < 2 {
            n_valid = 0;
        }
        let rest = list.split_off(n_valid);
        valid.extend(list);
        train.extend(rest);
    }
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        sport: sport.to_string(),
        keypoint_count: k,
        splits: Splits {
            train: entry(train),
            valid: entry(valid),
            test: entry(test),
        },
    })
}
