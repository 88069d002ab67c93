//! Articulated body model: template mesh, skinning weights, kinematic tree
//! and joint regressor, plus motion sequences that drive it.

mod lbs;
mod motion;
pub mod toy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json};
use crate::math::{Mat3, Vec3};
use crate::{Error, Result, FORMAT_VERSION};

pub use lbs::{face_frame, pose_mesh, regress_joints, Skinning};
pub use motion::{
    load_motion, normalize_shape, save_motion, MotionFile, MotionFrame, MotionSequence,
};

/// Tolerance on row sums of the skinning and regressor matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Parent index used in files for the kinematic root.
pub const ROOT_SENTINEL: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub id: String,
    pub joint_names: Vec<String>,
    /// `M` canonical vertex positions in meters.
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// `K` rest joint positions in meters.
    pub rest_joints: Vec<Vec3>,
    /// `M × K`, rows sum to one.
    pub skinning_weights: Vec<Vec<f64>>,
    /// `K × M`, rows sum to one.
    pub joint_regressor: Vec<Vec<f64>>,
    /// `K` parent indices, [`ROOT_SENTINEL`] for the root.
    pub kinematic_parents: Vec<i64>,
    /// `M × B` per-vertex displacement per unit shape coefficient.
    pub shape_basis: Vec<Vec<Vec3>>,
}

#[derive(Serialize, Deserialize)]
struct BodyModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: BodyModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// `K` axis-angle rotations in radians, one per joint (root included).
    pub body_pose: Vec<Vec3>,
    pub global_orient: Vec3,
    pub translation: Vec3,
    pub betas: Vec<f64>,
}

impl PoseParams {
    /// Rest pose with zero shape coefficients.
    pub fn identity(k: usize, b: usize) -> Self {
        PoseParams {
            body_pose: vec![Vec3::zeros(); k],
            global_orient: Vec3::zeros(),
            translation: Vec3::zeros(),
            betas: vec![0.0; b],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.body_pose
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.global_orient.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
            && self.betas.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    /// Rotation taking each face's canonical tangent frame to its posed frame.
    pub face_frames: Vec<Mat3>,
    /// Unit posed face normals.
    pub face_normals: Vec<Vec3>,
}

impl BodyModel {
    pub fn num_joints(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_betas(&self) -> usize {
        self.shape_basis.first().map_or(0, Vec::len)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.kinematic_parents[joint];
        (p >= 0).then_some(p as usize)
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let m = self.num_vertices();
        let k = self.num_joints();
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if m == 0 || k == 0 {
            return bad("model needs at least one vertex and one joint".into());
        }
        if self.joint_names.len() != k {
            return bad(format!(
                "{} joint names for {k} joints",
                self.joint_names.len()
            ));
        }
        if self.skinning_weights.len() != m {
            return bad(format!(
                "skinning_weights has {} rows, expected {m}",
                self.skinning_weights.len()
            ));
        }
        for (i, row) in self.skinning_weights.iter().enumerate() {
            if row.len() != k {
                return bad(format!(
                    "skinning_weights row {i} has {} entries, expected {k}",
                    row.len()
                ));
            }
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return bad(format!(
                    "skinning_weights row {i} has a negative or non-finite entry"
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return bad(format!("skinning_weights row {i} sums to {s}"));
            }
        }
        if self.joint_regressor.len() != k {
            return bad(format!(
                "joint_regressor has {} rows, expected {k}",
                self.joint_regressor.len()
            ));
        }
        for (j, row) in self.joint_regressor.iter().enumerate() {
            if row.len() != m {
                return bad(format!(
                    "joint_regressor row {j} has {} entries, expected {m}",
                    row.len()
                ));
            }
            let s: f64 = row.iter().sum();
            if !s.is_finite() || (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return bad(format!("joint_regressor row {j} sums to {s}"));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&v| v >= m) {
                return bad(format!("face {f} references a vertex outside [0, {m})"));
            }
        }
        if self.shape_basis.len() != m {
            return bad(format!(
                "shape_basis has {} rows, expected {m}",
                self.shape_basis.len()
            ));
        }
        let b = self.num_betas();
        if self.shape_basis.iter().any(|row| row.len() != b) {
            return bad("shape_basis rows disagree on the number of coefficients".into());
        }
        self.topological_order().map(|_| ())
    }

    /// Joints ordered so that every parent precedes its children. Fails unless
    /// the parent array encodes a single rooted tree.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let k = self.num_joints();
        if self.kinematic_parents.len() != k {
            return Err(Error::InvalidModel(format!(
                "{} parents for {k} joints",
                self.kinematic_parents.len()
            )));
        }
        let mut children = vec![Vec::new(); k];
        let mut roots = Vec::new();
        for (j, &p) in self.kinematic_parents.iter().enumerate() {
            if p == ROOT_SENTINEL {
                roots.push(j);
            } else if p < 0 || p as usize >= k {
                return Err(Error::InvalidModel(format!(
                    "joint {j} has parent {p} outside [0, {k})"
                )));
            } else {
                children[p as usize].push(j);
            }
        }
        if roots.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "kinematic tree must have exactly one root, found {}",
                roots.len()
            )));
        }
        let mut order = Vec::with_capacity(k);
        let mut stack = roots;
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != k {
            return Err(Error::InvalidModel(
                "kinematic parents contain a cycle".into(),
            ));
        }
        Ok(order)
    }

    /// Axis-aligned bounding-box diagonal of the template.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.template_vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.template_vertices[i]);
                (b - a).norm() + (c - b).norm() + (a - c).norm()
            })
            .sum();
        total / (3 * self.faces.len()) as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BodyModelFile = read_json(path)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                path,
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        file.model
            .validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &BodyModelFile {
                format_version: FORMAT_VERSION,
                model: self.clone(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_models_validate() {
        toy::chain(4, 8).validate().unwrap();
        toy::chain(2, 8).validate().unwrap();
        toy::humanoid().validate().unwrap();
        assert_eq!(toy::chain(4, 8).num_vertices(), 32);
    }

    #[test]
    fn rejects_cycles_and_forests() {
        let mut m = toy::chain(3, 4);
        m.kinematic_parents = vec![2, 0, 1];
        assert!(m.validate().is_err());
        m.kinematic_parents = vec![-1, -1, 1];
        assert!(m.validate().is_err());
        m.kinematic_parents = vec![-1, 0, 7];
        assert!(m.validate().is_err());
    }

    #[test]
    fn rejects_bad_weight_rows() {
        let mut m = toy::chain(3, 4);
        m.skinning_weights[0][0] += 0.01;
        assert!(m.validate().is_err());
        let mut m = toy::chain(3, 4);
        m.joint_regressor[1][0] += 0.5;
        assert!(m.validate().is_err());
        let mut m = toy::chain(3, 4);
        m.faces[0][1] = 999;
        assert!(m.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = toy::humanoid();
        m.save(&path).unwrap();
        assert_eq!(BodyModel::load(&path).unwrap(), m);
    }
}
