use serde::{Deserialize, Serialize};

use crate::animate::DeformedCloud;
use crate::image::Image;
use crate::render::{project, Camera};
use crate::{Error, Result};

use super::SceneAsset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowConfig {
    /// Darkening at full coverage, in `[0, 1]`.
    pub strength: f64,
    /// Disk radius per unit of Gaussian scale, before the height term.
    pub radius_scale: f64,
    /// Smallest disk radius in pixels.
    pub min_radius_px: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            strength: 0.6,
            radius_scale: 1.0,
            min_radius_px: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowLayer {
    /// H×W×1, `1` where unshadowed.
    pub attenuation: Image,
    /// Set when the light grazes the ground plane and no shadow is cast.
    pub parallel_light: bool,
}

/// Opacity of a soft disk at normalized radius `r`: flat core, smooth rim.
fn disk_profile(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else if r <= 0.5 {
        1.0
    } else {
        let t = (r - 0.5) / 0.5;
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

/// Projects every Gaussian center along the light onto the ground plane and
/// splats a soft disk there, as seen from `cam`.
pub fn cast_shadow(
    cloud: &DeformedCloud,
    scene: &SceneAsset,
    cam: &Camera,
    cfg: &ShadowConfig,
) -> Result<ShadowLayer> {
    if !(0.0..=1.0).contains(&cfg.strength) {
        return Err(Error::InvalidArgument(format!(
            "shadow strength {} outside [0, 1]",
            cfg.strength
        )));
    }
    scene.light.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut unlit = Image::filled(w, h, 1, 1.0);
    let plane = scene.ground_plane;
    let d = scene.light.direction;
    let denom = plane.normal.dot(&d);
    if denom.abs() < 1e-9 {
        return Ok(ShadowLayer {
            attenuation: unlit,
            parallel_light: true,
        });
    }
    for g in &cloud.gaussians {
        let height = plane.signed_distance(&g.position);
        let s = -height / denom;
        if s < 0.0 {
            // light would have to travel backwards to reach the plane
            continue;
        }
        let hit = g.position + d * s;
        let Ok((u, v, z)) = project(cam, &hit) else {
            continue;
        };
        let radius_world = cfg.radius_scale * g.scale().max() * (1.0 + height.abs());
        let r = (cam.fx * radius_world / z).max(cfg.min_radius_px);
        let opacity = g.opacity();
        let x0 = (u - r).floor().max(0.0);
        let y0 = (v - r).floor().max(0.0);
        let x1 = (u + r).ceil().min(w as f64 - 1.0);
        let y1 = (v + r).ceil().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let rho = (x as f64 - u).hypot(y as f64 - v) / r;
                let c = opacity * disk_profile(rho);
                if c > 0.0 {
                    let i = y * w + x;
                    unlit.data[i] *= 1.0 - c;
                }
            }
        }
    }
    let attenuation = unlit.map(|t| 1.0 - cfg.strength * (1.0 - t));
    Ok(ShadowLayer {
        attenuation,
        parallel_light: false,
    })
}
