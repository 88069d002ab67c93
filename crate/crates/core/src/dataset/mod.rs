//! Annotated pose datasets: per-frame records, clip export, subject-disjoint
//! splits, validation and keypoint accuracy.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   manifest.json
//!   <split>/<clip_id>/frames/NNNNNN.png
//!   <split>/<clip_id>/annotations.jsonl
//! ```
//!
//! Field names are frozen in `assets/dataset.schema.json`.

mod metric;
mod split;
mod validate;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body_model::{pose_mesh, regress_joints, BodyModel, PoseParams};
use crate::image::{write_png, Image};
use crate::math::Vec3;
use crate::render::{mask_and_bbox, Camera};
use crate::{Error, Result};

pub use metric::{
    compute_ap, evaluate_predictions, groundtruth_predictions, read_predictions, write_predictions,
    PredictionRecord, DEFAULT_AP_THRESHOLDS,
};
pub use split::{split_subjects, SplitRatios};
pub use validate::{validate_dataset, ValidationReport, Violation};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

/// Alpha above which a pixel counts as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Largest allowed distance between a stored 2D keypoint and the projection
/// of its 3D counterpart, in pixels.
pub const REPROJECTION_TOLERANCE_PX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kp3dFrame {
    World,
    Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Relative to the clip directory.
    pub frame_path: String,
    /// `(x, y, w, h)` in pixels; all zero when nothing is in the foreground.
    pub bbox: [f64; 4],
    pub foreground_pixels: usize,
    /// `(u, v, visible)` per joint.
    pub kp2d: Vec<[f64; 3]>,
    /// Meters, in the frame named by `kp3d_frame`.
    pub kp3d: Vec<[f64; 3]>,
    pub kp3d_frame: Kp3dFrame,
    pub pose_params: PoseParams,
    pub action_label: String,
    pub camera: Camera,
    pub subject_id: String,
    pub clip_id: String,
    pub frame_index: usize,
}

impl AnnotationRecord {
    pub fn keypoint_count(&self) -> usize {
        self.kp2d.len()
    }

    /// 3D keypoint `j` in camera coordinates.
    pub fn kp3d_camera(&self, j: usize) -> Vec3 {
        let p = Vec3::from(self.kp3d[j]);
        match self.kp3d_frame {
            Kp3dFrame::World => self.camera.to_camera(&p),
            Kp3dFrame::Camera => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMetadata {
    pub clip_id: String,
    pub subject_id: String,
    pub action_label: String,
    pub frame_count: usize,
    pub keypoint_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub subject_ids: Vec<String>,
    pub clip_count: usize,
    pub frame_count: usize,
    pub clips: Vec<ClipMetadata>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitEntry,
    pub valid: SplitEntry,
    pub test: SplitEntry,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&SplitEntry> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &SplitEntry)> {
        SPLIT_NAMES
            .into_iter()
            .zip([&self.train, &self.valid, &self.test])
    }

    /// The split holding `clip_id`.
    pub fn split_of(&self, clip_id: &str) -> Option<&'static str> {
        self.iter()
            .find(|(_, s)| s.clips.iter().any(|c| c.clip_id == clip_id))
            .map(|(name, _)| name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sport: String,
    pub keypoint_count: usize,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn total_frames(&self) -> usize {
        self.splits.iter().map(|(_, s)| s.frame_count).sum()
    }

    pub fn load(root: &Path) -> Result<Self> {
        crate::error::read_json(&root.join(MANIFEST_FILE))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        crate::error::write_json(&root.join(MANIFEST_FILE), self)
    }
}

/// Frame file name for `frame_index`, relative to the clip directory.
pub fn frame_file(frame_index: usize) -> String {
    format!("frames/{frame_index:06}.png")
}

/// Directory of a clip inside a dataset root.
pub fn clip_dir(root: &Path, split: &str, clip_id: &str) -> PathBuf {
    root.join(split).join(clip_id)
}

/// Whether `(u, v)` falls on a pixel of `cam`'s image (pixel centers at integers).
pub fn in_image(cam: &Camera, u: f64, v: f64) -> bool {
    u >= -0.5 && v >= -0.5 && u < cam.width as f64 - 0.5 && v < cam.height as f64 - 0.5
}

/// Projection and visibility of a camera-frame point. Points at or behind the
/// near plane get `(0, 0, 0)`.
pub fn keypoint_2d(cam: &Camera, p_cam: &Vec3) -> [f64; 3] {
    if p_cam.z <= cam.near {
        return [0.0, 0.0, 0.0];
    }
    let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
    let visible = if in_image(cam, u, v) { 1.0 } else { 0.0 };
    [u, v, visible]
}

/// World-frame 3D joints and their 2D projections for one posed frame.
pub fn keypoints(
    model: &BodyModel,
    params: &PoseParams,
    cam: &Camera,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let mesh = pose_mesh(model, params)?;
    let joints = regress_joints(model, &mesh.vertices)?;
    let kp3d = joints.iter().map(|j| [j.x, j.y, j.z]).collect();
    let kp2d = joints
        .iter()
        .map(|j| keypoint_2d(cam, &cam.to_camera(j)))
        .collect();
    Ok((kp2d, kp3d))
}

/// Foreground box and pixel count from a rendered alpha channel.
pub fn foreground_box(alpha: &Image) -> Result<([f64; 4], usize)> {
    let mask = mask_and_bbox(alpha, MASK_THRESHOLD)?;
    let bbox = mask
        .bbox
        .map_or([0.0; 4], |b| b.as_array().map(|v| v as f64));
    Ok((bbox, mask.count()))
}

/// Writes one clip: a PNG per frame and one JSON line per record. Each
/// record's `frame_path` is set from its frame index.
pub fn export_clip(
    frames: &[Image],
    records: &[AnnotationRecord],
    out_dir: &Path,
    clip_id: &str,
    keypoint_count: usize,
) -> Result<ClipMetadata> {
    if frames.len() != records.len() {
        return Err(Error::Dimension(format!(
            "{} frames but {} annotation records",
            frames.len(),
            records.len()
        )));
    }
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("clip {clip_id} has no frames")))?;
    let annotations = out_dir.join(ANNOTATION_FILE);
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if r.kp2d.len() != keypoint_count || r.kp3d.len() != keypoint_count {
            return Err(Error::schema(
                &annotations,
                format!(
                    "frame {} has {} keypoints, dataset expects {keypoint_count}",
                    r.frame_index,
                    r.kp2d.len()
                ),
            ));
        }
        if r.clip_id != clip_id
            || r.subject_id != first.subject_id
            || r.action_label != first.action_label
        {
            return Err(Error::schema(
                &annotations,
                format!("frame {} does not belong to clip {clip_id}", r.frame_index),
            ));
        }
        if !seen.insert(r.frame_index) {
            return Err(Error::schema(
                &annotations,
                format!("frame index {} repeated", r.frame_index),
            ));
        }
    }
    for (img, r) in frames.iter().zip(records) {
        if (img.width, img.height) != (r.camera.width, r.camera.height) {
            return Err(Error::Dimension(format!(
                "frame {} is {}x{}, camera is {}x{}",
                r.frame_index, img.width, img.height, r.camera.width, r.camera.height
            )));
        }
    }
    std::fs::create_dir_all(out_dir.join("frames")).map_err(|e| Error::io(out_dir, e))?;
    let mut lines = Vec::new();
    for (img, r) in frames.iter().zip(records) {
        let mut r = r.clone();
        r.frame_path = frame_file(r.frame_index);
        write_png(&out_dir.join(&r.frame_path), img)?;
        serde_json::to_writer(&mut lines, &r).map_err(|e| Error::json(&annotations, e))?;
        lines.push(b'\n');
    }
    let mut file = std::fs::File::create(&annotations).map_err(|e| Error::io(&annotations, e))?;
    file.write_all(&lines)
        .map_err(|e| Error::io(&annotations, e))?;
    Ok(ClipMetadata {
        clip_id: clip_id.to_string(),
        subject_id: first.subject_id.clone(),
        action_label: first.action_label.clone(),
        frame_count: records.len(),
        keypoint_count,
    })
}

/// Parses a clip's annotation file.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::schema(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Checks that `manifest` and the records agree on the keypoint count.
pub fn check_keypoint_count(
    manifest: &DatasetManifest,
    records: &[AnnotationRecord],
) -> Result<()> {
    for r in records {
        if r.keypoint_count() != manifest.keypoint_count {
            return Err(Error::schema(
                MANIFEST_FILE,
                format!(
                    "{} frame {} has {} keypoints, manifest expects {}",
                    r.clip_id,
                    r.frame_index,
                    r.keypoint_count(),
                    manifest.keypoint_count
                ),
            ));
        }
    }
    Ok(())
}
