//! Adjoint of the tiled compositor.
//!
//! Per pixel the contributions are replayed front to back, then walked back to
//! front while the blended color, depth and alpha of everything behind the
//! current splat are rebuilt incrementally. This avoids dividing by `1 − α`.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::avatar::Gaussian;
use crate::image::Image;
use crate::math::{quat_to_matrix_jacobian, Mat3, Vec3};
use crate::{Error, Result};

use super::raster::{composite_pixel, prepare, Contribution, Splat, TileGrid};
use super::{Camera, CloudGradients, RasterConfig};

/// Gradients with respect to the screen-space quantities of one splat.
#[derive(Clone, Copy, Debug)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// ∂L/∂A for the inverse covariance, entries treated independently.
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vec3,
    depth: f64,
}

impl SplatGrad {
    fn zero() -> Self {
        SplatGrad {
            mean: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: 0.0,
            color: Vec3::zeros(),
            depth: 0.0,
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

fn check_grad_image(img: &Image, w: usize, h: usize, channels: usize, what: &str) -> Result<()> {
    if img.width != w || img.height != h || img.channels != channels {
        return Err(Error::Dimension(format!(
            "{what} gradient is {}x{}x{}, render is {w}x{h}x{channels}",
            img.width, img.height, img.channels
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn backprop_pixel(
    splats: &[Splat],
    list: &[usize],
    trace: &[Contribution],
    g_rgb: Vec3,
    g_depth: f64,
    g_alpha: f64,
    local: &mut [SplatGrad],
) {
    let mut behind_rgb = Vec3::zeros();
    let mut behind_depth = 0.0;
    let mut behind_alpha = 0.0;
    for c in trace.iter().rev() {
        let s = &splats[list[c.slot]];
        let ta = c.transmittance * c.alpha;
        let d_alpha = c.transmittance
            * (g_rgb.dot(&(s.color - behind_rgb))
                + g_depth * (s.depth - behind_depth)
                + g_alpha * (1.0 - behind_alpha));
        let gr = &mut local[c.slot];
        gr.color += g_rgb * ta;
        gr.depth += g_depth * ta;
        gr.opacity += d_alpha * c.falloff;
        // α = o·exp(−½ dᵀAd)
        let d_maha = -0.5 * d_alpha * s.opacity * c.falloff;
        let d = c.delta;
        gr.conic += d * d.transpose() * d_maha;
        gr.mean -= (s.conic + s.conic.transpose()) * d * d_maha;

        behind_rgb = s.color * c.alpha + behind_rgb * (1.0 - c.alpha);
        behind_depth = s.depth * c.alpha + behind_depth * (1.0 - c.alpha);
        behind_alpha = c.alpha + behind_alpha * (1.0 - c.alpha);
    }
}

/// Exact adjoint of [`super::rasterize`] for the same cloud, camera and config.
///
/// `grad_rgb` is H×W×3; `grad_depth` and `grad_alpha` are H×W×1.
pub fn rasterize_backward(
    gaussians: &[Gaussian],
    cam: &Camera,
    cfg: &RasterConfig,
    grad_rgb: &Image,
    grad_depth: &Image,
    grad_alpha: &Image,
) -> Result<CloudGradients> {
    let (w, h) = (cam.width, cam.height);
    check_grad_image(grad_rgb, w, h, 3, "rgb")?;
    check_grad_image(grad_depth, w, h, 1, "depth")?;
    check_grad_image(grad_alpha, w, h, 1, "alpha")?;
    let prep = prepare(gaussians, cam, cfg)?;
    let grid = TileGrid::build(&prep.splats, w, h, cfg.tile_size);

    let partials: Vec<Vec<SplatGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            let mut local = vec![SplatGrad::zero(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, x1, y0, y1) = grid.bounds(t, w, h);
            let mut trace = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let g_rgb = Vec3::new(
                        grad_rgb.get(x, y, 0),
                        grad_rgb.get(x, y, 1),
                        grad_rgb.get(x, y, 2),
                    );
                    let g_depth = grad_depth.get(x, y, 0);
                    let g_alpha = grad_alpha.get(x, y, 0);
                    if g_rgb == Vec3::zeros() && g_depth == 0.0 && g_alpha == 0.0 {
                        continue;
                    }
                    trace.clear();
                    let p = Vector2::new(x as f64, y as f64);
                    composite_pixel(&prep.splats, list, p, cfg, Some(&mut trace));
                    backprop_pixel(
                        &prep.splats,
                        list,
                        &trace,
                        g_rgb,
                        g_depth,
                        g_alpha,
                        &mut local,
                    );
                }
            }
            local
        })
        .collect();

    // fixed tile order keeps the sums independent of the worker count
    let mut acc = vec![SplatGrad::zero(); prep.splats.len()];
    for (t, local) in partials.iter().enumerate() {
        for (slot, g) in local.iter().enumerate() {
            acc[grid.lists[t][slot]].add(g);
        }
    }

    let mut out = CloudGradients::zeros(gaussians.len());
    let per_splat: Vec<_> = prep
        .splats
        .par_iter()
        .zip(acc.par_iter())
        .map(|(s, g)| (s.index, chain_to_parameters(s, g, cam)))
        .collect();
    for (i, p) in per_splat {
        out.position[i] = p.position;
        out.rotation[i] = p.rotation;
        out.log_scale[i] = p.log_scale;
        out.opacity_logit[i] = p.opacity_logit;
        out.color[i] = p.color;
        out.mean2d[i] = p.mean2d;
    }
    Ok(out)
}

struct ParamGrad {
    position: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    opacity_logit: f64,
    color: Vec3,
    mean2d: [f64; 2],
}

fn chain_to_parameters(s: &Splat, g: &SplatGrad, cam: &Camera) -> ParamGrad {
    // A = Σ₂⁻¹  ⇒  ∂L/∂Σ₂ = −Aᵀ G A ᵀ
    let conic_t = s.conic.transpose();
    let d_cov2 = -(conic_t * g.conic * conic_t);
    // Σ₂ = P Σ₃ Pᵀ + floor, P = J W
    let d_cov3: Mat3 = s.proj.transpose() * d_cov2 * s.proj;
    let d_proj: Matrix2x3<f64> = (d_cov2 + d_cov2.transpose()) * s.proj * s.cov3;
    let d_jac: Matrix2x3<f64> = d_proj * cam.rotation.transpose();

    let (x, y, z) = (s.cam_point.x, s.cam_point.y, s.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_q = Vec3::zeros();
    // projected mean
    d_q.x += g.mean.x * fx / z;
    d_q.y += g.mean.y * fy / z;
    d_q.z += -g.mean.x * fx * x / z2 - g.mean.y * fy * y / z2;
    // blended depth
    d_q.z += g.depth;
    // projective Jacobian entries
    d_q.x += d_jac[(0, 2)] * (-fx / z2);
    d_q.y += d_jac[(1, 2)] * (-fy / z2);
    d_q.z += d_jac[(0, 0)] * (-fx / z2)
        + d_jac[(1, 1)] * (-fy / z2)
        + d_jac[(0, 2)] * (2.0 * fx * x / z3)
        + d_jac[(1, 2)] * (2.0 * fy * y / z3);
    let position = cam.rotation.transpose() * d_q;

    // Σ₃ = M Mᵀ, M = R S
    let d_m = (d_cov3 + d_cov3.transpose()) * s.m;
    let mut log_scale = Vec3::zeros();
    let mut d_rot = Mat3::zeros();
    for j in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += s.rot[(i, j)] * d_m[(i, j)];
            d_rot[(i, j)] = d_m[(i, j)] * s.scale[j];
        }
        log_scale[j] = ds * s.scale[j];
    }
    let jacs = quat_to_matrix_jacobian(&s.quat_unit);
    let d_unit: [f64; 4] = std::array::from_fn(|k| jacs[k].component_mul(&d_rot).sum());
    let u = s.quat_unit;
    let proj_dot: f64 = (0..4).map(|k| u[k] * d_unit[k]).sum();
    let rotation: [f64; 4] = std::array::from_fn(|k| (d_unit[k] - u[k] * proj_dot) / s.quat_norm);

    ParamGrad {
        position,
        rotation,
        log_scale,
        opacity_logit: g.opacity * s.opacity * (1.0 - s.opacity),
        color: g.color,
        mean2d: [g.mean.x, g.mean.y],
    }
}
