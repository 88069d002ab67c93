//! Naive single-threaded renderer: every pixel visits every splat.
//!
//! Serves as the oracle for the tiled path. It honors the truncation and
//! early-exit settings of the config it is given, so comparisons can be made
//! both with the production settings and with [`RasterConfig::exact`].

use nalgebra::Vector2;

use crate::avatar::Gaussian;
use crate::image::Image;
use crate::math::Vec3;
use crate::Result;

use super::raster::prepare;
use super::{Camera, RasterConfig, RenderOutput, ScreenStats};

pub fn rasterize_reference(
    gaussians: &[Gaussian],
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    let prep = prepare(gaussians, cam, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let mut rgb = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut depth = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let mut t = 1.0;
            let mut c = Vec3::zeros();
            let mut a = 0.0;
            let mut d = 0.0;
            for s in &prep.splats {
                let delta = p - s.mean;
                let maha = delta.dot(&(s.conic * delta));
                if cfg.truncation_sigma.is_some_and(|k| maha > k * k) {
                    continue;
                }
                let al = s.opacity * (-0.5 * maha).exp();
                c += s.color * (t * al);
                a += t * al;
                d += s.depth * (t * al);
                t *= 1.0 - al;
                if cfg.early_exit_transmittance.is_some_and(|e| t < e) {
                    break;
                }
            }
            for ch in 0..3 {
                rgb.set(x, y, ch, c[ch]);
            }
            alpha.set(x, y, 0, a);
            depth.set(x, y, 0, d);
        }
    }
    let mut screen_stats = ScreenStats::new(gaussians.len());
    screen_stats.visible = prep.visible;
    Ok(RenderOutput {
        rgb,
        alpha,
        depth,
        screen_stats,
    })
}
