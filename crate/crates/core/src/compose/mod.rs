//! Lighting, shadows and compositing of rendered avatars over scenes.

mod background;
mod relight;
mod shadow;

use serde::{Deserialize, Serialize};

use crate::animate::DeformedCloud;
use crate::image::{tonemap, Image};
use crate::math::Vec3;
use crate::render::RenderOutput;
use crate::{Error, Result};

pub use background::{load_library, load_scene, procedural_scene, BackgroundStyle, SceneSidecar};
pub use relight::{
    relight_consistency_loss, MockRelight, RelightBatch, RelightLossTerms, RelightModel,
    RelightWeights,
};
pub use shadow::{cast_shadow, ShadowConfig, ShadowLayer};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    /// Unit normal; points satisfy `normal · x = offset`.
    pub normal: Vec3,
    pub offset: f64,
}

impl GroundPlane {
    pub fn horizontal(height: f64) -> Self {
        GroundPlane {
            normal: Vec3::y(),
            offset: height,
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Directional light; `direction` is the direction light travels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub direction: Vec3,
    pub intensity: f64,
    pub ambient: f64,
}

impl Light {
    pub fn validate(&self) -> Result<()> {
        if (self.direction.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(
                "light direction must be unit length".into(),
            ));
        }
        if !(self.intensity >= 0.0
            && self.ambient >= 0.0
            && self.intensity.is_finite()
            && self.ambient.is_finite())
        {
            return Err(Error::InvalidArgument(
                "light intensity and ambient must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Radiance factor for a surface with unit normal `n`.
    pub fn factor(&self, n: &Vec3) -> f64 {
        self.ambient + self.intensity * n.dot(&(-self.direction)).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAsset {
    /// Linear HDR, H×W×3.
    pub background: Image,
    pub ground_plane: GroundPlane,
    pub light: Light,
    pub scene_prompt: String,
}

impl SceneAsset {
    pub fn validate(&self) -> Result<()> {
        if self.background.channels != 3 {
            return Err(Error::Dimension("background must have 3 channels".into()));
        }
        if (self.ground_plane.normal.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(
                "ground normal must be unit length".into(),
            ));
        }
        self.light.validate()
    }
}

/// Copy of the cloud with colors scaled by the summed response to `lights`.
/// Shading a cloud under several lights at once equals the sum of shading
/// under each, so mixed lighting stays linear.
pub fn shade_directional(cloud: &DeformedCloud, lights: &[Light]) -> Result<DeformedCloud> {
    for l in lights {
        l.validate()?;
    }
    let mut out = cloud.clone();
    for (g, n) in out.gaussians.iter_mut().zip(&cloud.normals) {
        let f: f64 = lights.iter().map(|l| l.factor(n)).sum();
        g.color *= f;
    }
    Ok(out)
}

/// `rgb + (1 − α)·background·shadow` in linear HDR. `fg.rgb` is premultiplied,
/// which is the straight-color blend `α·c + (1 − α)·b`.
pub fn composite_hdr(fg: &RenderOutput, shadow: &Image, background: &Image) -> Result<Image> {
    let (w, h) = (fg.rgb.width, fg.rgb.height);
    for (img, c, what) in [
        (shadow, 1, "shadow"),
        (background, 3, "background"),
        (&fg.alpha, 1, "alpha"),
    ] {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(Error::Dimension(format!(
                "{what} is {}x{}x{}, expected {w}x{h}x{c}",
                img.width, img.height, img.channels
            )));
        }
    }
    let mut out = Image::new(w, h, 3);
    for i in 0..w * h {
        let a = fg.alpha.data[i];
        let s = shadow.data[i];
        for c in 0..3 {
            out.data[3 * i + c] =
                fg.rgb.data[3 * i + c] + (1.0 - a) * background.data[3 * i + c] * s;
        }
    }
    Ok(out)
}

/// [`composite_hdr`] followed by the display transform.
pub fn composite(fg: &RenderOutput, shadow: &Image, background: &Image) -> Result<Image> {
    Ok(composite_hdr(fg, shadow, background)?.map(tonemap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::Gaussian;
    use crate::render::ScreenStats;

    fn cloud_with_normals(normals: Vec<Vec3>) -> DeformedCloud {
        let n = normals.len();
        DeformedCloud {
            gaussians: (0..n)
                .map(|i| Gaussian {
                    position: Vec3::new(i as f64, 0.0, 0.0),
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    log_scale: Vec3::repeat(-3.0),
                    opacity_logit: 2.0,
                    color: Vec3::new(0.2, 0.5, 0.9),
                })
                .collect(),
            normals,
            kept_indices: (0..n).collect(),
            frame_index: 0,
        }
    }

    #[test]
    fn ambient_only_keeps_colors() {
        let cloud = cloud_with_normals(vec![Vec3::x(), Vec3::y()]);
        let l = Light {
            direction: -Vec3::y(),
            intensity: 0.0,
            ambient: 1.0,
        };
        let out = shade_directional(&cloud, &[l]).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn cosine_law_endpoints() {
        let cloud = cloud_with_normals(vec![Vec3::y(), -Vec3::y()]);
        let l = Light {
            direction: -Vec3::y(),
            intensity: 1.0,
            ambient: 0.0,
        };
        let out = shade_directional(&cloud, &[l]).unwrap();
        assert_eq!(out.gaussians[0].color, cloud.gaussians[0].color);
        assert_eq!(out.gaussians[1].color, Vec3::zeros());
    }

    #[test]
    fn invalid_light_is_rejected() {
        let cloud = cloud_with_normals(vec![Vec3::y()]);
        let l = Light {
            direction: Vec3::new(0.0, -2.0, 0.0),
            intensity: 1.0,
            ambient: 0.0,
        };
        assert!(shade_directional(&cloud, &[l]).is_err());
    }

    fn fg(alpha: f64, color: f64) -> RenderOutput {
        RenderOutput {
            rgb: Image::filled(4, 3, 3, alpha * color),
            alpha: Image::filled(4, 3, 1, alpha),
            depth: Image::new(4, 3, 1),
            screen_stats: ScreenStats::default(),
        }
    }

    #[test]
    fn composite_endpoints_and_average() {
        let bg = Image::filled(4, 3, 3, 0.2);
        let ones = Image::filled(4, 3, 1, 1.0);
        let full = composite(&fg(1.0, 0.8), &ones, &bg).unwrap();
        assert!(full.data.iter().all(|&v| v == tonemap(0.8)));
        let none = composite(&fg(0.0, 0.8), &ones, &bg).unwrap();
        assert!(none.data.iter().all(|&v| v == tonemap(0.2)));
        let half = composite_hdr(&fg(0.5, 0.8), &ones, &bg).unwrap();
        assert!(half.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn composite_rejects_mismatched_background() {
        let bg = Image::filled(5, 3, 3, 0.2);
        assert!(composite(&fg(1.0, 0.5), &Image::filled(4, 3, 1, 1.0), &bg).is_err());
    }
}
