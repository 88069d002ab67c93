//! Canonical Gaussian avatars bound to the body surface.

mod densify;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::BodyModel;
use crate::error::{read_json, write_json};
use crate::math::{quat_norm, sigmoid, Quat, Vec3, IDENTITY_QUAT};
use crate::prompts::PromptTemplate;
use crate::{rng, Error, Result, FORMAT_VERSION};

pub use densify::{densify_and_prune, DensifyConfig};

/// Logit whose sigmoid rounds to exactly 1.0 in double precision.
pub const INIT_OPACITY_LOGIT: f64 = 40.0;

pub const INIT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vec3,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// Degree-0 SH coefficients, linear RGB.
    pub color: Vec3,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceBinding {
    pub face: usize,
    pub barycentric: [f64; 3],
    /// Meters along the face normal.
    pub normal_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalAvatar {
    pub gaussians: Vec<Gaussian>,
    pub bindings: Vec<SurfaceBinding>,
    pub prompt: Option<PromptTemplate>,
    pub body_model_id: String,
}

#[derive(Serialize, Deserialize)]
struct AvatarFile {
    format_version: u32,
    count: usize,
    #[serde(flatten)]
    avatar: CanonicalAvatar,
}

/// Unit normal of a face given vertex positions; zero for degenerate faces.
pub fn face_normal(vertices: &[Vec3], face: [usize; 3]) -> Vec3 {
    let [a, b, c] = face.map(|i| vertices[i]);
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len > 0.0 {
        n / len
    } else {
        Vec3::zeros()
    }
}

/// Position encoded by a binding on a mesh with the given vertex positions.
pub fn binding_position(faces: &[[usize; 3]], vertices: &[Vec3], b: &SurfaceBinding) -> Vec3 {
    let face = faces[b.face];
    let [v0, v1, v2] = face.map(|i| vertices[i]);
    v0 * b.barycentric[0]
        + v1 * b.barycentric[1]
        + v2 * b.barycentric[2]
        + face_normal(vertices, face) * b.normal_offset
}

/// Binds a point to a face: closest point on the triangle plus the signed
/// distance along the face normal.
pub fn rebind(faces: &[[usize; 3]], vertices: &[Vec3], face: usize, p: &Vec3) -> SurfaceBinding {
    let [a, b, c] = faces[face].map(|i| vertices[i]);
    let n = face_normal(vertices, faces[face]);
    let offset = (p - a).dot(&n);
    let in_plane = p - n * offset;
    let bary = closest_barycentric(&in_plane, &a, &b, &c);
    SurfaceBinding {
        face,
        barycentric: bary,
        normal_offset: offset,
    }
}

/// Barycentric coordinates of the point of triangle `abc` closest to `p`.
fn closest_barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

pub fn face_area(vertices: &[Vec3], face: [usize; 3]) -> f64 {
    let [a, b, c] = face.map(|i| vertices[i]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn face_mean_edge(vertices: &[Vec3], face: [usize; 3]) -> f64 {
    let [a, b, c] = face.map(|i| vertices[i]);
    ((b - a).norm() + (c - b).norm() + (a - c).norm()) / 3.0
}

/// Samples `n` Gaussians area-uniformly over the template surface.
pub fn init_avatar(model: &BodyModel, n: usize, seed: u64) -> Result<CanonicalAvatar> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "avatar needs at least one Gaussian".into(),
        ));
    }
    model.validate()?;
    let verts = &model.template_vertices;
    let mut cdf = Vec::with_capacity(model.num_faces());
    let mut total = 0.0;
    for f in &model.faces {
        total += face_area(verts, *f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh("mesh has zero total area".into()));
    }
    let mut r = rng::stream(seed, "avatar/init", 0);
    let mut gaussians = Vec::with_capacity(n);
    let mut bindings = Vec::with_capacity(n);
    for _ in 0..n {
        let u = r.random_range(0.0..total);
        let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let r1: f64 = r.random();
        let r2: f64 = r.random();
        let s = r1.sqrt();
        let binding = SurfaceBinding {
            face,
            barycentric: [1.0 - s, s * (1.0 - r2), s * r2],
            normal_offset: 0.0,
        };
        let scale = 0.5 * face_mean_edge(verts, model.faces[face]);
        gaussians.push(Gaussian {
            position: binding_position(&model.faces, verts, &binding),
            rotation: IDENTITY_QUAT,
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: INIT_OPACITY_LOGIT,
            color: Vec3::from(INIT_COLOR),
        });
        bindings.push(binding);
    }
    Ok(CanonicalAvatar {
        gaussians,
        bindings,
        prompt: None,
        body_model_id: model.id.clone(),
    })
}

impl CanonicalAvatar {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Largest distance between a stored position and its binding reconstruction.
    pub fn binding_error(&self, model: &BodyModel) -> f64 {
        self.gaussians
            .iter()
            .zip(&self.bindings)
            .map(|(g, b)| {
                (binding_position(&model.faces, &model.template_vertices, b) - g.position).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Checks structural invariants against a body model.
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.gaussians.len() != self.bindings.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gaussians but {} bindings",
                self.gaussians.len(),
                self.bindings.len()
            )));
        }
        for (i, (g, b)) in self.gaussians.iter().zip(&self.bindings).enumerate() {
            if b.face >= model.num_faces() {
                return Err(Error::InvalidArgument(format!(
                    "binding {i} refers to face {}",
                    b.face
                )));
            }
            let s: f64 = b.barycentric.iter().sum();
            if (s - 1.0).abs() > 1e-6 || b.barycentric.iter().any(|w| *w < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "binding {i} has invalid barycentrics"
                )));
            }
            if (quat_norm(&g.rotation) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "gaussian {i} rotation is not unit"
                )));
            }
        }
        let err = self.binding_error(model);
        if err > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "binding reconstruction off by {err} m"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &AvatarFile {
                format_version: FORMAT_VERSION,
                count: self.len(),
                avatar: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AvatarFile = read_json(path)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                path,
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        if file.count != file.avatar.gaussians.len() || file.count != file.avatar.bindings.len() {
            return Err(Error::schema(
                path,
                "count disagrees with stored gaussians/bindings",
            ));
        }
        Ok(file.avatar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::toy;

    fn single_triangle() -> BodyModel {
        let mut m = toy::chain(1, 3);
        m.faces = vec![[0, 1, 2]];
        m
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let model = single_triangle();
        let av = init_avatar(&model, 10, 1).unwrap();
        assert_eq!(av.len(), 10);
        for (g, b) in av.gaussians.iter().zip(&av.bindings) {
            assert_eq!(b.face, 0);
            assert!(b.barycentric.iter().all(|w| *w >= 0.0));
            assert!((b.barycentric.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(g.opacity(), 1.0);
        }
    }

    #[test]
    fn count_boundaries() {
        let model = toy::chain(4, 8);
        assert!(matches!(
            init_avatar(&model, 0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(init_avatar(&model, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn zero_area_mesh_is_rejected() {
        let mut model = single_triangle();
        model.template_vertices[2] = model.template_vertices[1];
        assert!(matches!(
            init_avatar(&model, 3, 0),
            Err(Error::DegenerateMesh(_))
        ));
    }

    #[test]
    fn area_weighted_face_choice_passes_chi_square() {
        // two faces with areas 3:1
        let mut model = toy::chain(1, 4);
        model.template_vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(0.0, 3.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ];
        model.faces = vec![[0, 1, 2], [0, 3, 1]];
        let ratio = face_area(&model.template_vertices, model.faces[0])
            / face_area(&model.template_vertices, model.faces[1]);
        assert!((ratio - 3.0).abs() < 1e-12);
        let av = init_avatar(&model, 4000, 11).unwrap();
        let n0 = av.bindings.iter().filter(|b| b.face == 0).count() as f64;
        let n1 = 4000.0 - n0;
        let chi2 = (n0 - 3000.0).powi(2) / 3000.0 + (n1 - 1000.0).powi(2) / 1000.0;
        // chi-square, 1 dof, p = 0.001
        assert!(chi2 < 10.827566, "chi2 = {chi2}");
    }

    #[test]
    fn init_is_deterministic_and_bound() {
        let model = toy::humanoid();
        let a = init_avatar(&model, 500, 9).unwrap();
        let b = init_avatar(&model, 500, 9).unwrap();
        assert_eq!(a, b);
        a.validate(&model).unwrap();
        assert!(a.binding_error(&model) < 1e-12);
    }

    #[test]
    fn rebind_recovers_interior_points() {
        let model = toy::humanoid();
        let b = SurfaceBinding {
            face: 17,
            barycentric: [0.2, 0.3, 0.5],
            normal_offset: 0.01,
        };
        let p = binding_position(&model.faces, &model.template_vertices, &b);
        let back = rebind(&model.faces, &model.template_vertices, 17, &p);
        for i in 0..3 {
            assert!((back.barycentric[i] - b.barycentric[i]).abs() < 1e-12);
        }
        assert!((back.normal_offset - 0.01).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("avatar.json");
        let model = toy::chain(4, 8);
        let mut av = init_avatar(&model, 64, 2).unwrap();
        av.gaussians[3].color = Vec3::new(0.1 + 1e-17, 1.0 / 3.0, std::f64::consts::PI);
        av.save(&path).unwrap();
        assert_eq!(CanonicalAvatar::load(&path).unwrap(), av);
    }
}
