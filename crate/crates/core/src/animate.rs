//! Per-frame deformation of a canonical avatar and deviation culling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{binding_position, CanonicalAvatar, Gaussian};
use crate::body_model::{pose_mesh, BodyModel, MotionSequence, PoseParams, Skinning};
use crate::math::{matrix_to_quat, quat_mul, quat_normalize, Vec3};
use crate::{Error, Result};

/// World-space Gaussians for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformedCloud {
    pub gaussians: Vec<Gaussian>,
    /// Posed unit normal of each Gaussian's bound face.
    pub normals: Vec<Vec3>,
    /// Canonical indices of the surviving Gaussians, strictly increasing.
    pub kept_indices: Vec<usize>,
    pub frame_index: usize,
}

impl DeformedCloud {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnimateConfig {
    pub cull: bool,
    /// Deviation threshold in meters; `None` means three mean template edge lengths.
    pub cull_tau: Option<f64>,
}

impl Default for AnimateConfig {
    fn default() -> Self {
        AnimateConfig {
            cull: true,
            cull_tau: None,
        }
    }
}

impl AnimateConfig {
    pub fn tau(&self, model: &BodyModel) -> f64 {
        self.cull_tau
            .unwrap_or_else(|| 3.0 * model.mean_edge_length())
    }
}

fn check_bindings(avatar: &CanonicalAvatar, model: &BodyModel) -> Result<()> {
    if avatar.bindings.len() != avatar.gaussians.len() {
        return Err(Error::Dimension(format!(
            "{} bindings for {} gaussians",
            avatar.bindings.len(),
            avatar.gaussians.len()
        )));
    }
    if let Some(b) = avatar.bindings.iter().find(|b| b.face >= model.num_faces()) {
        return Err(Error::InvalidArgument(format!(
            "binding refers to face {} but the model has {}",
            b.face,
            model.num_faces()
        )));
    }
    Ok(())
}

/// Moves every Gaussian with its bound face: position from the posed
/// barycentric point plus the normal offset, rotation composed with the face's
/// canonical-to-posed frame rotation.
pub fn deform(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    params: &PoseParams,
    frame_index: usize,
) -> Result<DeformedCloud> {
    check_bindings(avatar, model)?;
    let posed = pose_mesh(model, params)?;
    let mut gaussians = Vec::with_capacity(avatar.len());
    let mut normals = Vec::with_capacity(avatar.len());
    for (g, b) in avatar.gaussians.iter().zip(&avatar.bindings) {
        let frame_q = matrix_to_quat(&posed.face_frames[b.face]);
        gaussians.push(Gaussian {
            position: binding_position(&model.faces, &posed.vertices, b),
            rotation: quat_normalize(&quat_mul(&frame_q, &g.rotation)),
            ..g.clone()
        });
        normals.push(posed.face_normals[b.face]);
    }
    Ok(DeformedCloud {
        gaussians,
        normals,
        kept_indices: (0..avatar.len()).collect(),
        frame_index,
    })
}

/// Canonical positions carried by skinning, using each bound face's
/// barycentrically blended vertex weights and shape offsets.
pub fn expected_positions(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    params: &PoseParams,
) -> Result<Vec<Vec3>> {
    check_bindings(avatar, model)?;
    let skin = Skinning::new(model, params)?;
    let k = model.num_joints();
    let mut weights = vec![0.0; k];
    Ok(avatar
        .gaussians
        .iter()
        .zip(&avatar.bindings)
        .map(|(g, b)| {
            weights.iter_mut().for_each(|w| *w = 0.0);
            let mut shape = Vec3::zeros();
            for (&vi, &bc) in model.faces[b.face].iter().zip(&b.barycentric) {
                for (w, &vw) in weights.iter_mut().zip(&model.skinning_weights[vi]) {
                    *w += bc * vw;
                }
                shape += skin.shape_offsets[vi] * bc;
            }
            skin.transform(&(g.position + shape), &weights)
        })
        .collect())
}

/// Drops Gaussians whose position strays more than `tau` from `expected`.
pub fn cull_deviants(cloud: &DeformedCloud, expected: &[Vec3], tau: f64) -> Result<DeformedCloud> {
    if expected.len() != cloud.len() {
        return Err(Error::Dimension(format!(
            "{} expected positions for {} gaussians",
            expected.len(),
            cloud.len()
        )));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cull threshold {tau} must be non-negative"
        )));
    }
    let mut out = DeformedCloud {
        gaussians: Vec::with_capacity(cloud.len()),
        normals: Vec::with_capacity(cloud.len()),
        kept_indices: Vec::with_capacity(cloud.len()),
        frame_index: cloud.frame_index,
    };
    for i in 0..cloud.len() {
        if (cloud.gaussians[i].position - expected[i]).norm() <= tau {
            out.gaussians.push(cloud.gaussians[i].clone());
            out.normals.push(cloud.normals[i]);
            out.kept_indices.push(cloud.kept_indices[i]);
        }
    }
    Ok(out)
}

/// Deforms and, if configured, culls one frame.
pub fn animate_frame(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    params: &PoseParams,
    frame_index: usize,
    cfg: &AnimateConfig,
) -> Result<DeformedCloud> {
    let cloud = deform(avatar, model, params, frame_index)?;
    if !cfg.cull {
        return Ok(cloud);
    }
    let expected = expected_positions(avatar, model, params)?;
    cull_deviants(&cloud, &expected, cfg.tau(model))
}

/// Every frame of a motion sequence, one worker per frame.
pub fn animate_sequence(
    avatar: &CanonicalAvatar,
    model: &BodyModel,
    motion: &MotionSequence,
    cfg: &AnimateConfig,
) -> Result<Vec<DeformedCloud>> {
    motion
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, p)| animate_frame(avatar, model, p, i, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::init_avatar;
    use crate::body_model::toy;
    use crate::math::{axis_angle_to_matrix, quat_to_matrix};
    use proptest::prelude::*;

    fn setup() -> (BodyModel, CanonicalAvatar) {
        let model = toy::chain(4, 8);
        let av = init_avatar(&model, 60, 8).unwrap();
        (model, av)
    }

    #[test]
    fn identity_pose_keeps_positions() {
        let (model, av) = setup();
        let p = PoseParams::identity(4, model.num_betas());
        let cloud = deform(&av, &model, &p, 0).unwrap();
        for (d, g) in cloud.gaussians.iter().zip(&av.gaussians) {
            assert!((d.position - g.position).amax() < 1e-6);
            assert!((quat_to_matrix(&d.rotation) - quat_to_matrix(&g.rotation)).amax() < 1e-9);
            assert_eq!(d.log_scale, g.log_scale);
            assert_eq!(d.opacity_logit, g.opacity_logit);
        }
    }

    #[test]
    fn global_rigid_motion_is_equivariant() {
        let (model, av) = setup();
        let mut p = PoseParams::identity(4, model.num_betas());
        p.global_orient = Vec3::new(0.3, -1.1, 0.7);
        p.translation = Vec3::new(1.0, 2.0, -0.5);
        let r = axis_angle_to_matrix(&p.global_orient);
        let cloud = deform(&av, &model, &p, 3).unwrap();
        assert_eq!(cloud.frame_index, 3);
        for (d, g) in cloud.gaussians.iter().zip(&av.gaussians) {
            assert!((d.position - (r * g.position + p.translation)).amax() < 1e-5);
            let expect = r * quat_to_matrix(&g.rotation);
            assert!((quat_to_matrix(&d.rotation) - expect).amax() < 1e-9);
        }
    }

    #[test]
    fn bent_pose_matches_reconstruction_oracle() {
        let (model, av) = setup();
        let mut p = PoseParams::identity(4, model.num_betas());
        p.body_pose[1] = Vec3::new(0.0, 0.0, 1.2);
        p.body_pose[2] = Vec3::new(0.5, 0.0, 0.0);
        let posed = pose_mesh(&model, &p).unwrap();
        let cloud = deform(&av, &model, &p, 0).unwrap();
        for (d, b) in cloud.gaussians.iter().zip(&av.bindings) {
            let [i, j, k] = model.faces[b.face];
            let (a, bb, c) = (posed.vertices[i], posed.vertices[j], posed.vertices[k]);
            let n = (bb - a).cross(&(c - a)).normalize();
            let expect = a * b.barycentric[0]
                + bb * b.barycentric[1]
                + c * b.barycentric[2]
                + n * b.normal_offset;
            assert!((d.position - expect).amax() < 1e-6);
        }
    }

    #[test]
    fn infinite_tau_is_identity() {
        let (model, av) = setup();
        let mut p = PoseParams::identity(4, model.num_betas());
        p.body_pose[2] = Vec3::new(0.9, 0.2, 0.0);
        let cloud = deform(&av, &model, &p, 0).unwrap();
        let expected = expected_positions(&av, &model, &p).unwrap();
        assert_eq!(
            cull_deviants(&cloud, &expected, f64::INFINITY).unwrap(),
            cloud
        );
    }

    #[test]
    fn identity_pose_culls_nothing() {
        let (model, av) = setup();
        let p = PoseParams::identity(4, model.num_betas());
        let cloud = deform(&av, &model, &p, 0).unwrap();
        let expected = expected_positions(&av, &model, &p).unwrap();
        let out = cull_deviants(&cloud, &expected, 1e-9).unwrap();
        assert_eq!(out.len(), av.len());
    }

    #[test]
    fn displaced_binding_is_the_only_one_culled() {
        let (model, mut av) = setup();
        let tau = 3.0 * model.mean_edge_length();
        av.bindings[17].normal_offset += 2.0 * tau;
        let p = PoseParams::identity(4, model.num_betas());
        let cfg = AnimateConfig {
            cull: true,
            cull_tau: Some(tau),
        };
        let out = animate_frame(&av, &model, &p, 0, &cfg).unwrap();
        assert_eq!(out.len(), av.len() - 1);
        assert!(!out.kept_indices.contains(&17));
    }

    #[test]
    fn shaped_identity_pose_culls_nothing() {
        let (model, av) = setup();
        let mut p = PoseParams::identity(4, model.num_betas());
        p.betas = vec![0.8, -1.2];
        let out = animate_frame(&av, &model, &p, 0, &AnimateConfig::default()).unwrap();
        assert_eq!(out.len(), av.len());
    }

    #[test]
    fn bad_face_index_errors() {
        let (model, mut av) = setup();
        av.bindings[0].face = model.num_faces();
        let p = PoseParams::identity(4, model.num_betas());
        assert!(deform(&av, &model, &p, 0).is_err());
    }

    #[test]
    fn sequence_frames_are_independent() {
        let model = toy::humanoid();
        let av = init_avatar(&model, 50, 1).unwrap();
        let motion = toy::humanoid_motion("kicking", "s1", 6, 2);
        let all = animate_sequence(&av, &model, &motion, &AnimateConfig::default()).unwrap();
        let single =
            animate_frame(&av, &model, &motion.frames[4], 4, &AnimateConfig::default()).unwrap();
        assert_eq!(all[4], single);
    }

    proptest! {
        #[test]
        fn culling_is_monotone_in_tau(
            pose in prop::collection::vec(-1.5f64..1.5, 12),
            t1 in 0.0f64..0.2,
            t2 in 0.0f64..0.2,
        ) {
            let (model, av) = setup();
            let mut p = PoseParams::identity(4, model.num_betas());
            for j in 0..4 {
                p.body_pose[j] = Vec3::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]);
            }
            let cloud = deform(&av, &model, &p, 0).unwrap();
            let expected = expected_positions(&av, &model, &p).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = cull_deviants(&cloud, &expected, lo).unwrap();
            let b = cull_deviants(&cloud, &expected, hi).unwrap();
            prop_assert!(a.kept_indices.iter().all(|i| b.kept_indices.contains(i)));
            prop_assert!(a.kept_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
