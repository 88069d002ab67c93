//! Scene assets: ingested background images with JSON sidecars, plus a
//! procedural generator for runs without an asset library.
//!
//! A library is a directory of `name.png` (sRGB, decoded to linear) or
//! `name.npy` (linear HDR) images, each with a `name.json` sidecar holding
//! `ground_plane`, `light` and `scene_prompt`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::read_json;
use crate::image::{read_npy, read_png, srgb_decode, Image};
use crate::math::Vec3;
use crate::render::Camera;
use crate::{rng, Error, Result};

use super::{GroundPlane, Light, SceneAsset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub ground_plane: GroundPlane,
    pub light: Light,
    pub scene_prompt: String,
}

fn load_background(path: &Path) -> Result<Image> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path)?.map(srgb_decode),
        Some("npy") => read_npy(path)?,
        _ => {
            return Err(Error::Image(format!(
                "{}: expected a .png or .npy background",
                path.display()
            )))
        }
    };
    match img.channels {
        3 => Ok(img),
        4 => {
            let data = img
                .data
                .chunks_exact(4)
                .flat_map(|px| px[..3].to_vec())
                .collect();
            Image::from_data(img.width, img.height, 3, data)
        }
        1 => {
            let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
            Image::from_data(img.width, img.height, 3, data)
        }
        c => Err(Error::Image(format!(
            "{}: {c}-channel background",
            path.display()
        ))),
    }
}

/// Loads one background and its sidecar (`<stem>.json` next to the image).
pub fn load_scene(image_path: &Path) -> Result<SceneAsset> {
    let sidecar: SceneSidecar = read_json(&image_path.with_extension("json"))?;
    let scene = SceneAsset {
        background: load_background(image_path)?,
        ground_plane: sidecar.ground_plane,
        light: sidecar.light,
        scene_prompt: sidecar.scene_prompt,
    };
    scene.validate()?;
    Ok(scene)
}

/// Every image with a sidecar in `dir`, sorted by file name.
pub fn load_library(dir: &Path) -> Result<Vec<(String, SceneAsset)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("png") | Some("npy")) && path.with_extension("json").exists() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            Ok((name, load_scene(&p)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    BaseballField,
    IceRink,
    SoccerPitch,
    Studio,
}

impl BackgroundStyle {
    /// Venue matching an action label.
    pub fn for_action(action: &str) -> Self {
        match action {
            "batting" => BackgroundStyle::BaseballField,
            "skating" => BackgroundStyle::IceRink,
            "kicking" => BackgroundStyle::SoccerPitch,
            _ => BackgroundStyle::Studio,
        }
    }

    fn palette(self) -> (Vec3, Vec3, Vec3, &'static str) {
        // (ground A, ground B, sky, prompt)
        match self {
            BackgroundStyle::BaseballField => (
                Vec3::new(0.10, 0.30, 0.06),
                Vec3::new(0.45, 0.28, 0.15),
                Vec3::new(0.45, 0.62, 0.95),
                "a sunny baseball field",
            ),
            BackgroundStyle::IceRink => (
                Vec3::new(0.80, 0.85, 0.90),
                Vec3::new(0.70, 0.78, 0.88),
                Vec3::new(0.20, 0.22, 0.28),
                "an indoor ice rink",
            ),
            BackgroundStyle::SoccerPitch => (
                Vec3::new(0.08, 0.35, 0.08),
                Vec3::new(0.12, 0.42, 0.10),
                Vec3::new(0.50, 0.66, 0.92),
                "a soccer pitch in daylight",
            ),
            BackgroundStyle::Studio => (
                Vec3::new(0.35, 0.35, 0.35),
                Vec3::new(0.30, 0.30, 0.30),
                Vec3::new(0.60, 0.60, 0.62),
                "a neutral photo studio",
            ),
        }
    }
}

/// Renders a ground plane with field stripes under a sky gradient from `cam`,
/// lit by a seeded sun. The ground lies at height 0.
pub fn procedural_scene(style: BackgroundStyle, cam: &Camera, seed: u64) -> SceneAsset {
    let (ground_a, ground_b, sky, prompt) = style.palette();
    let mut r = rng::stream(seed, "sun", 0);
    let azimuth = r.random_range(0.0..std::f64::consts::TAU);
    let elevation = r.random_range(35f64..75.0).to_radians();
    let direction = -Vec3::new(
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    );
    let light = Light {
        direction,
        intensity: 1.0,
        ambient: 0.35,
    };
    let plane = GroundPlane::horizontal(0.0);
    let origin = cam.position();
    let sun_on_ground = light.factor(&plane.normal);
    let mut bg = Image::new(cam.width, cam.height, 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.pixel_ray(x as f64, y as f64);
            let denom = plane.normal.dot(&ray);
            let s = if denom.abs() > 1e-12 {
                -plane.signed_distance(&origin) / denom
            } else {
                -1.0
            };
            let color = if s > 0.0 {
                let hit = origin + ray * s;
                let stripe = ((hit.x / 2.0).floor() as i64).rem_euclid(2) == 0;
                let base = if stripe { ground_a } else { ground_b };
                // fade toward the horizon
                let fog = (s / 60.0).min(1.0);
                base * sun_on_ground * (1.0 - fog) + sky * fog
            } else {
                sky * (0.8 + 0.4 * ray.y.max(0.0))
            };
            for c in 0..3 {
                bg.set(x, y, c, color[c]);
            }
        }
    }
    SceneAsset {
        background: bg,
        ground_plane: plane,
        light,
        scene_prompt: prompt.to_string(),
    }
}
