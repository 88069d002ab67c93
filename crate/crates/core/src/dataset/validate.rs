use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::read_png_u8;
use crate::{Result, FORMAT_VERSION};

use super::{
    in_image, keypoint_2d, load_annotations, AnnotationRecord, ClipMetadata, DatasetManifest,
    ANNOTATION_FILE, MANIFEST_FILE, REPROJECTION_TOLERANCE_PX,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// File, clip or frame the problem was found in.
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub clips_checked: usize,
    pub frames_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Sink<'a> {
    out: &'a mut Vec<Violation>,
}

impl Sink<'_> {
    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.out.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

fn check_manifest(m: &DatasetManifest, v: &mut Sink<'_>) {
    if m.format_version != FORMAT_VERSION {
        v.push(
            MANIFEST_FILE,
            format!(
                "format_version {} (expected {FORMAT_VERSION})",
                m.format_version
            ),
        );
    }
    if m.keypoint_count == 0 {
        v.push(MANIFEST_FILE, "keypoint_count is zero");
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (name, split) in m.splits.iter() {
        let loc = format!("{MANIFEST_FILE} [{name}]");
        if split.clip_count != split.clips.len() {
            v.push(
                &loc,
                format!(
                    "clip_count {} but {} clips listed",
                    split.clip_count,
                    split.clips.len()
                ),
            );
        }
        let frames: usize = split.clips.iter().map(|c| c.frame_count).sum();
        if split.frame_count != frames {
            v.push(
                &loc,
                format!(
                    "frame_count {} but listed clips hold {frames}",
                    split.frame_count
                ),
            );
        }
        let subjects: BTreeSet<&str> = split.clips.iter().map(|c| c.subject_id.as_str()).collect();
        let listed: BTreeSet<&str> = split.subject_ids.iter().map(String::as_str).collect();
        if subjects != listed {
            v.push(
                &loc,
                "subject_ids do not match the subjects of the listed clips",
            );
        }
        for c in &split.clips {
            if let Some(prev) = owner.insert(&c.clip_id, name) {
                v.push(&loc, format!("clip {} also listed in {prev}", c.clip_id));
            }
            if c.keypoint_count != m.keypoint_count {
                v.push(
                    &loc,
                    format!(
                        "clip {} has {} keypoints, manifest says {}",
                        c.clip_id, c.keypoint_count, m.keypoint_count
                    ),
                );
            }
        }
    }
    let seen: BTreeSet<&String> = m
        .splits
        .train
        .subject_ids
        .iter()
        .chain(&m.splits.valid.subject_ids)
        .collect();
    for s in &m.splits.test.subject_ids {
        if seen.contains(s) {
            v.push(
                MANIFEST_FILE,
                format!("test subject {s} also appears in train/valid"),
            );
        }
    }
}

fn check_record(
    r: &AnnotationRecord,
    clip: &ClipMetadata,
    k: usize,
    clip_dir: &Path,
    v: &mut Sink<'_>,
) {
    let loc = format!("{}/{}", clip.clip_id, r.frame_path);
    if r.clip_id != clip.clip_id || r.subject_id != clip.subject_id {
        v.push(
            &loc,
            format!("record belongs to {}/{}", r.subject_id, r.clip_id),
        );
    }
    if r.action_label != clip.action_label {
        v.push(
            &loc,
            format!(
                "action {} but clip is {}",
                r.action_label, clip.action_label
            ),
        );
    }
    let cam = &r.camera;
    if let Err(e) = cam.validate() {
        v.push(&loc, format!("camera: {e}"));
        return;
    }
    if !r.pose_params.is_finite() {
        v.push(&loc, "non-finite pose parameters");
    }
    match read_png_u8(&clip_dir.join(&r.frame_path)) {
        Ok((w, h, _, _)) if (w, h) != (cam.width, cam.height) => {
            v.push(
                &loc,
                format!("frame is {w}x{h}, camera is {}x{}", cam.width, cam.height),
            );
        }
        Ok(_) => {}
        Err(_) => v.push(&loc, "missing or unreadable frame file"),
    }
    let [x, y, w, h] = r.bbox;
    if r.bbox.iter().any(|c| !c.is_finite() || *c < 0.0) {
        v.push(&loc, "bbox has negative or non-finite entries");
    } else if x + w > cam.width as f64 || y + h > cam.height as f64 {
        v.push(&loc, "bbox extends past the image");
    } else if r.foreground_pixels > 0 && w * h <= 0.0 {
        v.push(&loc, "foreground present but bbox has zero area");
    } else if r.foreground_pixels == 0 && w * h > 0.0 {
        v.push(&loc, "bbox given for a frame without foreground");
    }
    if r.kp2d.len() != k || r.kp3d.len() != k {
        v.push(
            &loc,
            format!(
                "{} 2D and {} 3D keypoints, manifest expects {k}",
                r.kp2d.len(),
                r.kp3d.len()
            ),
        );
        return;
    }
    for j in 0..k {
        let [u, vv, flag] = r.kp2d[j];
        let joint = format!("joint {j}");
        if flag != 0.0 && flag != 1.0 {
            v.push(
                &loc,
                format!("{joint}: visibility flag {flag} is not 0 or 1"),
            );
            continue;
        }
        if !(u.is_finite() && vv.is_finite() && r.kp3d[j].iter().all(|c| c.is_finite())) {
            v.push(&loc, format!("{joint}: non-finite keypoint"));
            continue;
        }
        if flag == 1.0 && !in_image(cam, u, vv) {
            v.push(
                &loc,
                format!("{joint}: visible keypoint ({u:.2}, {vv:.2}) lies outside the image"),
            );
            continue;
        }
        let expected = keypoint_2d(cam, &r.kp3d_camera(j));
        let in_front = r.kp3d_camera(j).z > cam.near;
        if in_front {
            let err = (expected[0] - u).hypot(expected[1] - vv);
            if err > REPROJECTION_TOLERANCE_PX {
                v.push(&loc, format!("{joint}: reprojection error {err:.3} px"));
                continue;
            }
        }
        if expected[2] != flag {
            v.push(
                &loc,
                format!(
                    "{joint}: visibility flag {flag} but keypoint projects to {}",
                    expected[2]
                ),
            );
        }
    }
}

fn check_clip(root: &Path, split: &str, clip: &ClipMetadata, k: usize) -> (Vec<Violation>, usize) {
    let mut out = Vec::new();
    let mut v = Sink { out: &mut out };
    let dir = super::clip_dir(root, split, &clip.clip_id);
    let loc = format!("{split}/{}", clip.clip_id);
    let records = match load_annotations(&dir.join(ANNOTATION_FILE)) {
        Ok(r) => r,
        Err(e) => {
            v.push(&loc, format!("annotations: {e}"));
            return (out, 0);
        }
    };
    if records.len() != clip.frame_count {
        v.push(
            &loc,
            format!(
                "manifest lists {} frames, annotations hold {}",
                clip.frame_count,
                records.len()
            ),
        );
    }
    let mut indices = BTreeSet::new();
    for r in &records {
        if !indices.insert(r.frame_index) {
            v.push(&loc, format!("frame index {} repeated", r.frame_index));
        }
    }
    let per_frame: Vec<Vec<Violation>> = records
        .par_iter()
        .map(|r| {
            let mut o = Vec::new();
            check_record(r, clip, k, &dir, &mut Sink { out: &mut o });
            o
        })
        .collect();
    let n = records.len();
    out.extend(per_frame.into_iter().flatten());
    (out, n)
}

/// Checks the manifest, every listed clip and every frame under `root`.
/// Fails only when the manifest itself cannot be read.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let manifest = DatasetManifest::load(root)?;
    let mut violations = Vec::new();
    check_manifest(
        &manifest,
        &mut Sink {
            out: &mut violations,
        },
    );
    let jobs: Vec<(&str, &ClipMetadata)> = manifest
        .splits
        .iter()
        .flat_map(|(name, s)| s.clips.iter().map(move |c| (name, c)))
        .collect();
    let results: Vec<(Vec<Violation>, usize)> = jobs
        .par_iter()
        .map(|(split, clip)| check_clip(root, split, clip, manifest.keypoint_count))
        .collect();
    let mut frames_checked = 0;
    for (v, n) in results {
        violations.extend(v);
        frames_checked += n;
    }
    Ok(ValidationReport {
        clips_checked: jobs.len(),
        frames_checked,
        violations,
    })
}
