use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json};
use crate::math::Vec3;
use crate::{Error, Result, FORMAT_VERSION};

use super::PoseParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub frames: Vec<PoseParams>,
    pub action_label: String,
    pub subject_id: String,
    pub source_id: String,
}

impl MotionSequence {
    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.body_pose.len())
    }

    pub fn num_betas(&self) -> usize {
        self.frames.first().map_or(0, |f| f.betas.len())
    }
}

/// On-disk motion document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionFile {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub action_label: String,
    pub subject_id: String,
    #[serde(default)]
    pub source_id: String,
    pub frames: Vec<MotionFrame>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionFrame {
    pub body_pose: Vec<[f64; 3]>,
    pub global_orient: [f64; 3],
    pub translation: [f64; 3],
    pub betas: Vec<f64>,
}

/// Replaces every frame's betas with the per-coefficient mean over the sequence.
pub fn normalize_shape(seq: &MotionSequence) -> Result<MotionSequence> {
    let n = seq.frames.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "motion sequence has no frames".into(),
        ));
    }
    let b = seq.num_betas();
    if seq.frames.iter().any(|f| f.betas.len() != b) {
        return Err(Error::Dimension(
            "frames disagree on the number of betas".into(),
        ));
    }
    let mut mean = vec![0.0; b];
    for f in &seq.frames {
        for (m, x) in mean.iter_mut().zip(&f.betas) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut out = seq.clone();
    for f in &mut out.frames {
        f.betas.clone_from(&mean);
    }
    Ok(out)
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let file: MotionFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::schema(
            path,
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    if file.frames.is_empty() {
        return Err(Error::schema(path, "motion has no frames"));
    }
    let mut frames = Vec::with_capacity(file.frames.len());
    for (i, f) in file.frames.into_iter().enumerate() {
        if f.body_pose.len() != file.k {
            return Err(Error::schema(
                path,
                format!(
                    "frame {i} has {} joints, header says K={}",
                    f.body_pose.len(),
                    file.k
                ),
            ));
        }
        if f.betas.len() != file.b {
            return Err(Error::schema(
                path,
                format!(
                    "frame {i} has {} betas, header says B={}",
                    f.betas.len(),
                    file.b
                ),
            ));
        }
        let params = PoseParams {
            body_pose: f.body_pose.into_iter().map(Vec3::from).collect(),
            global_orient: Vec3::from(f.global_orient),
            translation: Vec3::from(f.translation),
            betas: f.betas,
        };
        if !params.is_finite() {
            return Err(Error::schema(
                path,
                format!("frame {i} has non-finite values"),
            ));
        }
        frames.push(params);
    }
    Ok(MotionSequence {
        frames,
        action_label: file.action_label,
        subject_id: file.subject_id,
        source_id: file.source_id,
    })
}

pub fn save_motion(path: &Path, seq: &MotionSequence) -> Result<()> {
    let to3 = |v: &Vec3| [v.x, v.y, v.z];
    let file = MotionFile {
        format_version: FORMAT_VERSION,
        k: seq.num_joints(),
        b: seq.num_betas(),
        action_label: seq.action_label.clone(),
        subject_id: seq.subject_id.clone(),
        source_id: seq.source_id.clone(),
        frames: seq
            .frames
            .iter()
            .map(|f| MotionFrame {
                body_pose: f.body_pose.iter().map(to3).collect(),
                global_orient: to3(&f.global_orient),
                translation: to3(&f.translation),
                betas: f.betas.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}
