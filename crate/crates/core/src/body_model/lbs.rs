use crate::math::{axis_angle_to_matrix, Mat3, Vec3};
use crate::{Error, Result};

use super::{BodyModel, PoseParams, PosedMesh};

/// Per-joint transforms of one pose, reusable for points that are not mesh
/// vertices.
#[derive(Clone, Debug)]
pub struct Skinning {
    /// Shape displacement of every template vertex.
    pub shape_offsets: Vec<Vec3>,
    /// Shaped rest joints.
    pub joints: Vec<Vec3>,
    rot_delta: Vec<Mat3>,
    disp: Vec<Vec3>,
    global: Mat3,
    translation: Vec3,
}

impl Skinning {
    pub fn new(model: &BodyModel, params: &PoseParams) -> Result<Self> {
        let k = model.num_joints();
        let b = model.num_betas();
        if params.body_pose.len() != k {
            return Err(Error::Dimension(format!(
                "body_pose has {} joints, model has {k}",
                params.body_pose.len()
            )));
        }
        if params.betas.len() != b {
            return Err(Error::Dimension(format!(
                "betas has {} coefficients, model has {b}",
                params.betas.len()
            )));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("pose parameters".into()));
        }

        let shape_offsets: Vec<Vec3> = model
            .shape_basis
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&params.betas)
                    .fold(Vec3::zeros(), |acc, (d, beta)| acc + d * *beta)
            })
            .collect();
        let joint_shift = regress_unchecked(model, &shape_offsets);
        let joints: Vec<Vec3> = model
            .rest_joints
            .iter()
            .zip(&joint_shift)
            .map(|(j, d)| j + d)
            .collect();

        // Global rotation minus identity, and joint displacement J'_k − J_k.
        let mut rot = vec![Mat3::identity(); k];
        let mut rot_delta = vec![Mat3::zeros(); k];
        let mut disp = vec![Vec3::zeros(); k];
        for j in model.topological_order()? {
            let local = axis_angle_to_matrix(&params.body_pose[j]);
            match model.parent(j) {
                None => rot[j] = local,
                Some(p) => {
                    rot[j] = rot[p] * local;
                    disp[j] = disp[p] + rot_delta[p] * (joints[j] - joints[p]);
                }
            }
            rot_delta[j] = rot[j] - Mat3::identity();
        }
        Ok(Skinning {
            shape_offsets,
            joints,
            rot_delta,
            disp,
            global: axis_angle_to_matrix(&params.global_orient),
            translation: params.translation,
        })
    }

    /// Skins an already shaped point with the given per-joint weights.
    pub fn transform(&self, v: &Vec3, weights: &[f64]) -> Vec3 {
        let mut delta = Vec3::zeros();
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                delta += (self.rot_delta[j] * (v - self.joints[j]) + self.disp[j]) * w;
            }
        }
        self.global * (v + delta) + self.translation
    }
}

/// Linear blend skinning followed by the global rigid transform.
///
/// Written in displacement form, `v' = v + Σ_k w_k [(R_k − I)(v − J_k) + (J'_k − J_k)]`,
/// which is algebraically the usual skinning sum and reproduces the shaped
/// template bit-for-bit when every rotation is the identity.
pub fn pose_mesh(model: &BodyModel, params: &PoseParams) -> Result<PosedMesh> {
    let skin = Skinning::new(model, params)?;
    let vertices: Vec<Vec3> = model
        .template_vertices
        .iter()
        .zip(&skin.shape_offsets)
        .zip(&model.skinning_weights)
        .map(|((v, d), weights)| skin.transform(&(v + d), weights))
        .collect();

    let mut face_frames = Vec::with_capacity(model.num_faces());
    let mut face_normals = Vec::with_capacity(model.num_faces());
    for face in &model.faces {
        let canon = face_frame(face.map(|i| model.template_vertices[i]));
        let posed = face_frame(face.map(|i| vertices[i]));
        face_frames.push(posed * canon.transpose());
        face_normals.push(posed.column(2).into_owned());
    }

    Ok(PosedMesh {
        vertices,
        face_frames,
        face_normals,
    })
}

/// Orthonormal tangent frame of a triangle: columns are the first edge
/// direction, `normal × edge`, and the unit normal. Degenerate triangles get
/// the identity frame.
pub fn face_frame(tri: [Vec3; 3]) -> Mat3 {
    let e = tri[1] - tri[0];
    let n = e.cross(&(tri[2] - tri[0]));
    let (en, nn) = (e.norm(), n.norm());
    if en < 1e-300 || nn < 1e-300 {
        return Mat3::identity();
    }
    let e1 = e / en;
    let n = n / nn;
    let e2 = n.cross(&e1);
    Mat3::from_columns(&[e1, e2, n])
}

/// `G · vertices`: one regressed position per joint.
pub fn regress_joints(model: &BodyModel, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    if vertices.len() != model.num_vertices() {
        return Err(Error::Dimension(format!(
            "got {} vertices, model has {}",
            vertices.len(),
            model.num_vertices()
        )));
    }
    Ok(regress_unchecked(model, vertices))
}

fn regress_unchecked(model: &BodyModel, vertices: &[Vec3]) -> Vec<Vec3> {
    model
        .joint_regressor
        .iter()
        .map(|row| {
            row.iter()
                .zip(vertices)
                .filter(|(w, _)| **w != 0.0)
                .fold(Vec3::zeros(), |acc, (w, v)| acc + v * *w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::toy;
    use super::*;
    use crate::math::orthonormality_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Independent skinning oracle: explicit 4x4 world transforms per joint,
    /// scalar loops, no displacement trick.
    fn lbs_oracle(model: &BodyModel, params: &PoseParams) -> Vec<[f64; 3]> {
        let k = model.num_joints();
        let m = model.num_vertices();
        let b = model.num_betas();
        let mut shaped = vec![[0.0; 3]; m];
        let mut offsets = vec![[0.0; 3]; m];
        for i in 0..m {
            for c in 0..3 {
                let mut d = 0.0;
                for beta in 0..b {
                    d += model.shape_basis[i][beta][c] * params.betas[beta];
                }
                offsets[i][c] = d;
                shaped[i][c] = model.template_vertices[i][c] + d;
            }
        }
        let mut joints = vec![[0.0; 3]; k];
        for j in 0..k {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..m {
                    s += model.joint_regressor[j][i] * offsets[i][c];
                }
                joints[j][c] = model.rest_joints[j][c] + s;
            }
        }
        let mut world = vec![[[0.0; 4]; 4]; k];
        let mut done = vec![false; k];
        while done.iter().any(|d| !d) {
            for j in 0..k {
                if done[j] {
                    continue;
                }
                let r = axis_angle_to_matrix(&params.body_pose[j]);
                let mut local = [[0.0; 4]; 4];
                for a in 0..3 {
                    for c in 0..3 {
                        local[a][c] = r[(a, c)];
                    }
                }
                local[3][3] = 1.0;
                match model.parent(j) {
                    None => {
                        for a in 0..3 {
                            local[a][3] = joints[j][a];
                        }
                        world[j] = local;
                        done[j] = true;
                    }
                    Some(p) if done[p] => {
                        for a in 0..3 {
                            local[a][3] = joints[j][a] - joints[p][a];
                        }
                        let mut out = [[0.0; 4]; 4];
                        for a in 0..4 {
                            for c in 0..4 {
                                for t in 0..4 {
                                    out[a][c] += world[p][a][t] * local[t][c];
                                }
                            }
                        }
                        world[j] = out;
                        done[j] = true;
                    }
                    Some(_) => {}
                }
            }
        }
        let g = axis_angle_to_matrix(&params.global_orient);
        (0..m)
            .map(|i| {
                let mut acc = [0.0; 3];
                for j in 0..k {
                    let w = model.skinning_weights[i][j];
                    // world[j] * (v - J_j)
                    let rel = [
                        shaped[i][0] - joints[j][0],
                        shaped[i][1] - joints[j][1],
                        shaped[i][2] - joints[j][2],
                    ];
                    for a in 0..3 {
                        let mut s = world[j][a][3];
                        for c in 0..3 {
                            s += world[j][a][c] * rel[c];
                        }
                        acc[a] += w * s;
                    }
                }
                let mut out = [0.0; 3];
                for a in 0..3 {
                    out[a] = params.translation[a];
                    for c in 0..3 {
                        out[a] += g[(a, c)] * acc[c];
                    }
                }
                out
            })
            .collect()
    }

    fn random_pose(model: &BodyModel, seed: u64, scale: f64) -> PoseParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.random_range(-scale..scale);
        PoseParams {
            body_pose: (0..model.num_joints())
                .map(|_| Vec3::new(r(), r(), r()))
                .collect(),
            global_orient: Vec3::new(r(), r(), r()),
            translation: Vec3::new(r(), r(), r()),
            betas: (0..model.num_betas()).map(|_| r()).collect(),
        }
    }

    #[test]
    fn identity_pose_reproduces_template_exactly() {
        for model in [toy::chain(4, 8), toy::humanoid()] {
            let p = PoseParams::identity(model.num_joints(), model.num_betas());
            let posed = pose_mesh(&model, &p).unwrap();
            assert_eq!(posed.vertices, model.template_vertices);
        }
    }

    #[test]
    fn identity_pose_with_translation_is_rigid_shift() {
        let model = toy::chain(4, 8);
        let mut p = PoseParams::identity(4, model.num_betas());
        p.translation = Vec3::new(0.25, -1.5, 3.0);
        let posed = pose_mesh(&model, &p).unwrap();
        for (v, t) in posed.vertices.iter().zip(&model.template_vertices) {
            assert_eq!(*v, t + p.translation);
        }
    }

    #[test]
    fn ninety_degree_bend_matches_scalar_oracle() {
        let model = toy::chain(2, 8);
        let mut p = PoseParams::identity(2, model.num_betas());
        p.body_pose[1] = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let posed = pose_mesh(&model, &p).unwrap();
        let oracle = lbs_oracle(&model, &p);
        for (v, o) in posed.vertices.iter().zip(&oracle) {
            for c in 0..3 {
                assert!((v[c] - o[c]).abs() < 1e-6);
            }
        }
        // hand computation: v + 0.7 (R - I)(v - J1) with v = (0.1, 0.3, 0)
        let tip = posed.vertices[8];
        assert!((tip - Vec3::new(0.03, 0.37, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn random_poses_match_scalar_oracle() {
        for (i, model) in [toy::chain(4, 8), toy::humanoid()].iter().enumerate() {
            for seed in 0..5 {
                let p = random_pose(model, seed + 10 * i as u64, 1.2);
                let posed = pose_mesh(model, &p).unwrap();
                let oracle = lbs_oracle(model, &p);
                for (v, o) in posed.vertices.iter().zip(&oracle) {
                    for c in 0..3 {
                        assert!((v[c] - o[c]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let model = toy::chain(4, 8);
        let mut p = PoseParams::identity(3, model.num_betas());
        assert!(matches!(pose_mesh(&model, &p), Err(Error::Dimension(_))));
        p = PoseParams::identity(4, model.num_betas() + 1);
        assert!(matches!(pose_mesh(&model, &p), Err(Error::Dimension(_))));
        p = PoseParams::identity(4, model.num_betas());
        p.global_orient.x = f64::NAN;
        assert!(matches!(pose_mesh(&model, &p), Err(Error::NonFinite(_))));
        assert!(regress_joints(&model, &model.template_vertices[1..]).is_err());
    }

    #[test]
    fn selector_and_averaging_rows() {
        let mut model = toy::chain(3, 4);
        let m = model.num_vertices();
        model.joint_regressor[0] = (0..m).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect();
        model.joint_regressor[1] = vec![1.0 / m as f64; m];
        let verts: Vec<Vec3> = (0..m)
            .map(|i| Vec3::new(i as f64 * 0.37, (i as f64).sin(), -(i as f64)))
            .collect();
        let joints = regress_joints(&model, &verts).unwrap();
        assert_eq!(joints[0], verts[5]);
        let centroid = verts.iter().fold(Vec3::zeros(), |a, v| a + v) / m as f64;
        assert!((joints[1] - centroid).amax() < 1e-12);
    }

    #[test]
    fn regression_matches_naive_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut model = toy::chain(4, 8);
        // random 4 x 6 regressor embedded in the first six vertices
        let m = model.num_vertices();
        for row in &mut model.joint_regressor {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            *row = (0..m)
                .map(|i| if i < 6 { raw[i] / s } else { 0.0 })
                .collect();
        }
        let verts: Vec<Vec3> = (0..m)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let fast = regress_joints(&model, &verts).unwrap();
        for j in 0..4 {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..6 {
                    s += model.joint_regressor[j][i] * verts[i][c];
                }
                assert!((fast[j][c] - s).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn rigid_equivariance_of_regressed_joints(seed in any::<u64>(), ox in -3.0..3.0f64, oy in -3.0..3.0f64, oz in -3.0..3.0f64,
                                                  tx in -2.0..2.0f64, ty in -2.0..2.0f64, tz in -2.0..2.0f64) {
            let model = toy::humanoid();
            let mut p = random_pose(&model, seed, 0.8);
            p.global_orient = Vec3::zeros();
            p.translation = Vec3::zeros();
            let base = regress_joints(&model, &pose_mesh(&model, &p).unwrap().vertices).unwrap();
            p.global_orient = Vec3::new(ox, oy, oz);
            p.translation = Vec3::new(tx, ty, tz);
            let moved = regress_joints(&model, &pose_mesh(&model, &p).unwrap().vertices).unwrap();
            let r = axis_angle_to_matrix(&p.global_orient);
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!(((r * a + p.translation) - b).amax() < 1e-5);
            }
        }

        #[test]
        fn face_frames_stay_orthonormal(seed in any::<u64>()) {
            let model = toy::humanoid();
            let p = random_pose(&model, seed, 2.0);
            let posed = pose_mesh(&model, &p).unwrap();
            for f in &posed.face_frames {
                prop_assert!(orthonormality_error(f) < 1e-5);
            }
        }
    }
}
