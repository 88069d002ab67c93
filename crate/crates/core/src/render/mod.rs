//! Cameras, the differentiable Gaussian splat rasterizer and mask extraction.

mod backward;
pub mod camera;
mod mask;
mod raster;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::math::Vec3;

pub use backward::rasterize_backward;
pub use camera::{
    orbit_offset, project, sample_camera, Camera, CameraSample, CameraSamplerConfig, Intrinsics,
};
pub use mask::{mask_and_bbox, BBox, Mask};
pub use raster::rasterize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Splats are evaluated only where the Mahalanobis distance is below this
    /// many standard deviations; `None` evaluates every pixel.
    pub truncation_sigma: Option<f64>,
    /// Per-pixel compositing stops once transmittance drops below this value.
    pub early_exit_transmittance: Option<f64>,
    /// Added to the diagonal of every screen covariance, in px².
    pub covariance_floor: f64,
    pub min_eigenvalue: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            truncation_sigma: Some(3.0),
            early_exit_transmittance: Some(1e-4),
            covariance_floor: 0.3,
            min_eigenvalue: 1e-8,
        }
    }
}

impl RasterConfig {
    /// No truncation and no early exit: every splat touches every pixel.
    pub fn exact() -> Self {
        RasterConfig {
            truncation_sigma: None,
            early_exit_transmittance: None,
            ..Default::default()
        }
    }
}

/// Per-Gaussian statistics gathered while rendering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScreenStats {
    /// Whether the center landed inside the clip range.
    pub visible: Vec<bool>,
    /// Accumulated norm of the NDC-space center gradient of the pixel-mean
    /// loss, so thresholds do not depend on resolution.
    pub grad_norm_sum: Vec<f64>,
    /// Number of backward passes in which the Gaussian was visible.
    pub grad_count: Vec<u32>,
}

impl ScreenStats {
    pub fn new(n: usize) -> Self {
        ScreenStats {
            visible: vec![false; n],
            grad_norm_sum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    /// `grads` come from a pixel-summed loss on a `width`×`height` render.
    pub fn accumulate(
        &mut self,
        visible: &[bool],
        grads: &CloudGradients,
        width: usize,
        height: usize,
    ) {
        let pixels = (width * height) as f64;
        let (sx, sy) = (0.5 * width as f64 / pixels, 0.5 * height as f64 / pixels);
        for (i, v) in visible.iter().enumerate() {
            if *v {
                let [gx, gy] = grads.mean2d[i];
                self.grad_norm_sum[i] += (gx * sx).hypot(gy * sy);
                self.grad_count[i] += 1;
            }
        }
    }

    /// Mean positional gradient magnitude per Gaussian, zero where never visible.
    pub fn mean_grad(&self) -> Vec<f64> {
        self.grad_norm_sum
            .iter()
            .zip(&self.grad_count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Linear HDR color, premultiplied against black.
    pub rgb: Image,
    pub alpha: Image,
    /// Alpha-weighted camera-space depth; divide by alpha for the surface depth.
    pub depth: Image,
    pub screen_stats: ScreenStats,
}

/// Per-Gaussian parameter gradients, indexed like the input cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGradients {
    pub position: Vec<Vec3>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    /// Gradient with respect to the projected center in pixels.
    pub mean2d: Vec<[f64; 2]>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        CloudGradients {
            position: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            mean2d: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().flatten().all(|x| x.is_finite())
            && self
                .log_scale
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute entry over all parameter groups.
    pub fn max_abs(&self) -> f64 {
        let vecs = self
            .position
            .iter()
            .chain(&self.log_scale)
            .chain(&self.color)
            .flat_map(|v| v.iter().copied());
        vecs.chain(self.rotation.iter().flatten().copied())
            .chain(self.opacity_logit.iter().copied())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}
