//! Pinhole cameras and orbit sampling.
//!
//! Conventions: world is right-handed with +y up. Camera space looks down +z
//! with +x right and +y down, so pixel `v` grows downward. Pixel `(i, j)`
//! samples the image plane at exactly `(u, v) = (i, j)`. Orbit positions are
//! `target + r (cos e sin a, sin e, cos e cos a)`: azimuth 0 sits on +z and
//! positive azimuth swings toward +x about the world up axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{orthonormality_error, Mat3, Vec3};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn from_fov(fov_y_deg: f64, width: usize, height: usize, near: f64, far: f64) -> Self {
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
        }
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0) {
            return Err(Error::InvalidArgument("intrinsics must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "clip planes must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

impl Default for Intrinsics {
    /// 60° vertical field of view at 1024².
    fn default() -> Self {
        Intrinsics::from_fov(60.0, 1024, 1024, 0.05, 100.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World→camera rotation, row-major.
    #[serde(with = "row_major")]
    pub rotation: Mat3,
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

mod row_major {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::math::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|r, c| rows[r][c]))
    }
}

impl Camera {
    pub fn new(intr: Intrinsics, rotation: Mat3, translation: Vec3) -> Self {
        Camera {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
            near: intr.near,
            far: intr.far,
        }
    }

    /// Camera at `eye` looking at `target`, rolled so world +y projects upward.
    pub fn look_at(intr: Intrinsics, eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            // looking straight up or down: roll reference falls back to +z
            right = forward.cross(&Vec3::z());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera::new(intr, rotation, -(rotation * eye))
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction in world space.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World-space unit direction of the ray through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics().validate()?;
        if orthonormality_error(&self.rotation) > 1e-6 || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidArgument(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }
}

/// Pixel coordinates and depth of a world point.
pub fn project(cam: &Camera, p: &Vec3) -> Result<(f64, f64, f64)> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("projected point".into()));
    }
    let q = cam.to_camera(p);
    if q.z <= cam.near {
        return Err(Error::BehindCamera { z: q.z });
    }
    Ok((
        cam.fx * q.x / q.z + cam.cx,
        cam.fy * q.y / q.z + cam.cy,
        q.z,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSamplerConfig {
    /// Degrees, half-open `[lo, hi)` unless `lo == hi`.
    pub azimuth_range: [f64; 2],
    pub elevation_range: [f64; 2],
    /// Meters.
    pub radius_range: [f64; 2],
    /// Look-at point; `None` means "the subject's pelvis", resolved by the caller.
    pub target: Option<Vec3>,
    pub fixed_intrinsics: Intrinsics,
}

impl Default for CameraSamplerConfig {
    fn default() -> Self {
        CameraSamplerConfig {
            azimuth_range: [0.0, 360.0],
            elevation_range: [-5.0, 25.0],
            radius_range: [3.0, 4.5],
            target: None,
            fixed_intrinsics: Intrinsics::default(),
        }
    }
}

impl CameraSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("azimuth_range", self.azimuth_range),
            ("elevation_range", self.elevation_range),
            ("radius_range", self.radius_range),
        ] {
            if !(r[0] <= r[1]) || !r.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} {r:?} is empty")));
            }
        }
        if !(self.radius_range[0] > 0.0) {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        if self.elevation_range[0] <= -90.0 || self.elevation_range[1] >= 90.0 {
            return Err(Error::InvalidArgument(
                "elevation must stay inside (-90, 90)".into(),
            ));
        }
        self.fixed_intrinsics.validate()
    }
}

/// One orbit draw: the sampled spherical coordinates and the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraSample {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub camera: Camera,
}

fn uniform(r: &mut rng::Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        r.random_range(range[0]..range[1])
    }
}

pub fn orbit_offset(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Vec3 {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    Vec3::new(ce * sa, se, ce * ca) * radius
}

/// Draws azimuth, elevation and radius uniformly and aims the camera at the target.
pub fn sample_camera(
    seed: u64,
    cfg: &CameraSamplerConfig,
    default_target: Vec3,
) -> Result<CameraSample> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "camera", 0);
    let azimuth_deg = uniform(&mut r, cfg.azimuth_range);
    let elevation_deg = uniform(&mut r, cfg.elevation_range);
    let radius = uniform(&mut r, cfg.radius_range);
    let target = cfg.target.unwrap_or(default_target);
    let eye = target + orbit_offset(azimuth_deg, elevation_deg, radius);
    Ok(CameraSample {
        azimuth_deg,
        elevation_deg,
        radius,
        camera: Camera::look_at(cfg.fixed_intrinsics, eye, target),
    })
}
