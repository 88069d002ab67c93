//! Tiled front-to-back splat compositing.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::avatar::Gaussian;
use crate::image::Image;
use crate::math::{quat_norm, quat_normalize, quat_to_matrix, Mat3, Quat, Vec3};
use crate::{Error, Result};

use super::{Camera, RasterConfig, RenderOutput, ScreenStats};

/// A Gaussian after projection, with everything backward needs cached.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Inverse screen covariance.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    /// Inclusive pixel rectangle `[x0, y0, x1, y1]` that can receive coverage.
    pub rect: Option<[usize; 4]>,
    pub cam_point: Vec3,
    pub proj: Matrix2x3<f64>,
    pub cov3: Mat3,
    pub m: Mat3,
    pub rot: Mat3,
    pub scale: Vec3,
    pub quat_unit: Quat,
    pub quat_norm: f64,
}

pub(crate) struct Prepared {
    /// Visible splats, sorted front to back.
    pub splats: Vec<Splat>,
    pub visible: Vec<bool>,
}

fn check_inputs(gaussians: &[Gaussian], cam: &Camera) -> Result<()> {
    cam.validate()?;
    for (i, g) in gaussians.iter().enumerate() {
        let finite = g
            .position
            .iter()
            .chain(&g.log_scale)
            .chain(&g.color)
            .all(|v| v.is_finite())
            && g.rotation.iter().all(|v| v.is_finite())
            && g.opacity_logit.is_finite();
        if !finite {
            return Err(Error::NonFinite(format!("gaussian {i}")));
        }
        if quat_norm(&g.rotation) == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian {i} has a zero quaternion"
            )));
        }
    }
    Ok(())
}

/// Symmetric 2×2 with eigenvalues raised to at least `floor`.
fn clamp_eigen(s: Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let (a, b, c) = (s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    if l2 >= floor {
        return Matrix2::new(a, b, b, c);
    }
    let e1 = if b.abs() > 1e-300 {
        Vector2::new(l1 - c, b).normalize()
    } else if a >= c {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let e2 = Vector2::new(-e1.y, e1.x);
    e1 * e1.transpose() * l1.max(floor) + e2 * e2.transpose() * l2.max(floor)
}

fn content_order(a: &Gaussian, b: &Gaussian) -> Ordering {
    let ka = a
        .position
        .iter()
        .chain(&a.log_scale)
        .chain(&a.rotation)
        .chain(std::iter::once(&a.opacity_logit))
        .chain(&a.color);
    let kb = b
        .position
        .iter()
        .chain(&b.log_scale)
        .chain(&b.rotation)
        .chain(std::iter::once(&b.opacity_logit))
        .chain(&b.color);
    for (x, y) in ka.zip(kb) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

pub(crate) fn prepare(
    gaussians: &[Gaussian],
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<Prepared> {
    check_inputs(gaussians, cam)?;
    let mut visible = vec![false; gaussians.len()];
    let mut splats = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let q = cam.to_camera(&g.position);
        if q.z <= cam.near || q.z > cam.far {
            continue;
        }
        let (x, y, z) = (q.x, q.y, q.z);
        let jac = Matrix2x3::new(
            cam.fx / z,
            0.0,
            -cam.fx * x / (z * z),
            0.0,
            cam.fy / z,
            -cam.fy * y / (z * z),
        );
        let quat_unit = quat_normalize(&g.rotation);
        let rot = quat_to_matrix(&quat_unit);
        let scale = g.scale();
        let m = rot * Mat3::from_diagonal(&scale);
        let cov3 = m * m.transpose();
        let proj = jac * cam.rotation;
        let cov2 = proj * cov3 * proj.transpose() + Matrix2::identity() * cfg.covariance_floor;
        let cov2 = clamp_eigen(cov2, cfg.min_eigenvalue);
        let conic = cov2
            .try_inverse()
            .unwrap_or_else(|| Matrix2::identity() / cfg.min_eigenvalue);
        let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
        let rect = match cfg.truncation_sigma {
            Some(k) => {
                // bounding box of the k-sigma ellipse
                let rx = k * cov2[(0, 0)].sqrt();
                let ry = k * cov2[(1, 1)].sqrt();
                pixel_rect(mean, rx, ry, cam.width, cam.height)
            }
            None => Some([0, 0, cam.width - 1, cam.height - 1]),
        };
        visible[index] = true;
        splats.push(Splat {
            index,
            mean,
            conic,
            depth: z,
            opacity: g.opacity(),
            color: g.color,
            rect,
            cam_point: q,
            proj,
            cov3,
            m,
            rot,
            scale,
            quat_unit,
            quat_norm: quat_norm(&g.rotation),
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| content_order(&gaussians[a.index], &gaussians[b.index]))
    });
    Ok(Prepared { splats, visible })
}

fn pixel_rect(mean: Vector2<f64>, rx: f64, ry: f64, w: usize, h: usize) -> Option<[usize; 4]> {
    let x0 = (mean.x - rx).ceil().max(0.0);
    let y0 = (mean.y - ry).ceil().max(0.0);
    let x1 = (mean.x + rx).floor().min(w as f64 - 1.0);
    let y1 = (mean.y + ry).floor().min(h as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
}

/// One splat's contribution to one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Position in the tile's splat list.
    pub slot: usize,
    pub alpha: f64,
    pub transmittance: f64,
    pub falloff: f64,
    pub delta: Vector2<f64>,
}

/// Splat evaluation at pixel center `p`; `None` when truncated away.
#[inline]
pub(crate) fn evaluate(
    s: &Splat,
    p: Vector2<f64>,
    cfg: &RasterConfig,
) -> Option<(f64, f64, Vector2<f64>)> {
    let d = p - s.mean;
    let maha = d.dot(&(s.conic * d));
    if let Some(k) = cfg.truncation_sigma {
        if maha > k * k {
            return None;
        }
    }
    let falloff = (-0.5 * maha).exp();
    Some((s.opacity * falloff, falloff, d))
}

pub(crate) struct PixelResult {
    pub rgb: Vec3,
    pub alpha: f64,
    pub depth: f64,
}

/// Front-to-back blend of `list` (indices into `splats`) at one pixel.
/// When `trace` is given, every contribution is recorded in order.
pub(crate) fn composite_pixel(
    splats: &[Splat],
    list: &[usize],
    p: Vector2<f64>,
    cfg: &RasterConfig,
    mut trace: Option<&mut Vec<Contribution>>,
) -> PixelResult {
    let mut t = 1.0f64;
    let mut rgb = Vec3::zeros();
    let mut depth = 0.0;
    let mut alpha_acc = 0.0;
    for (slot, &si) in list.iter().enumerate() {
        let s = &splats[si];
        let Some((alpha, falloff, delta)) = evaluate(s, p, cfg) else {
            continue;
        };
        let w = t * alpha;
        rgb += s.color * w;
        depth += s.depth * w;
        alpha_acc += w;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(Contribution {
                slot,
                alpha,
                transmittance: t,
                falloff,
                delta,
            });
        }
        t *= 1.0 - alpha;
        if let Some(eps) = cfg.early_exit_transmittance {
            if t < eps {
                break;
            }
        }
    }
    PixelResult {
        rgb,
        alpha: alpha_acc,
        depth,
    }
}

pub(crate) struct TileGrid {
    pub size: usize,
    pub cols: usize,
    /// Per tile, indices into the sorted splat list in front-to-back order.
    pub lists: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn build(splats: &[Splat], width: usize, height: usize, size: usize) -> Self {
        let size = size.max(1);
        let cols = width.div_ceil(size);
        let rows = height.div_ceil(size);
        let mut lists = vec![Vec::new(); cols * rows];
        for (si, s) in splats.iter().enumerate() {
            let Some([x0, y0, x1, y1]) = s.rect else {
                continue;
            };
            for ty in y0 / size..=y1 / size {
                for tx in x0 / size..=x1 / size {
                    lists[ty * cols + tx].push(si);
                }
            }
        }
        TileGrid { size, cols, lists }
    }

    /// Pixel bounds `[x0, x1) × [y0, y1)` of tile `t`.
    pub fn bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.cols, t / self.cols);
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (
            x0,
            (x0 + self.size).min(width),
            y0,
            (y0 + self.size).min(height),
        )
    }
}

/// Renders `gaussians` from `cam`. Output color is premultiplied against black.
pub fn rasterize(gaussians: &[Gaussian], cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    let prep = prepare(gaussians, cam, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let grid = TileGrid::build(&prep.splats, w, h, cfg.tile_size);
    let tiles: Vec<Vec<PixelResult>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t, w, h);
            let list = &grid.lists[t];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Vector2::new(x as f64, y as f64);
                    out.push(composite_pixel(&prep.splats, list, p, cfg, None));
                }
            }
            out
        })
        .collect();

    let mut rgb = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut depth = Image::new(w, h, 1);
    for (t, results) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, _) = grid.bounds(t, w, h);
        let tw = x1 - x0;
        for (k, r) in results.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            for c in 0..3 {
                rgb.set(x, y, c, r.rgb[c]);
            }
            alpha.set(x, y, 0, r.alpha);
            depth.set(x, y, 0, r.depth);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::IDENTITY_QUAT;
    use crate::render::Intrinsics;

    pub(crate) fn test_cam(size: usize) -> Camera {
        let intr = Intrinsics {
            fx: size as f64,
            fy: size as f64,
            cx: (size as f64 - 1.0) / 2.0,
            cy: (size as f64 - 1.0) / 2.0,
            width: size,
            height: size,
            near: 0.1,
            far: 100.0,
        };
        Camera::new(intr, Mat3::identity(), Vec3::zeros())
    }

    fn blob(pos: Vec3, sigma: f64, logit: f64, color: Vec3) -> Gaussian {
        Gaussian {
            position: pos,
            rotation: IDENTITY_QUAT,
            log_scale: Vec3::repeat(sigma.ln()),
            opacity_logit: logit,
            color,
        }
    }

    #[test]
    fn empty_cloud_renders_black() {
        let out = rasterize(&[], &test_cam(16), &RasterConfig::default()).unwrap();
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(out.rgb.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn footprint_matches_closed_form() {
        let size = 33;
        let cam = test_cam(size);
        let z = 4.0;
        let sigma = 0.1;
        let g = blob(Vec3::new(0.0, 0.0, z), sigma, 40.0, Vec3::repeat(1.0));
        let out = rasterize(&[g], &cam, &RasterConfig::default()).unwrap();
        // on-axis: J W Σ Wᵀ Jᵀ = (f σ / z)² I
        let s2 = (cam.fx * sigma / z).powi(2) + 0.3;
        let c = cam.cx;
        let mut checked = 0;
        for y in 0..size {
            for x in 0..size {
                let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                if r2 / s2 <= 9.0 {
                    let expect = (-0.5 * r2 / s2).exp();
                    assert!((out.alpha.get(x, y, 0) - expect).abs() < 1e-3);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn nearer_opaque_gaussian_wins() {
        let cam = test_cam(15);
        let red = Vec3::new(1.0, 0.0, 0.0);
        let blue = Vec3::new(0.0, 0.0, 1.0);
        let front = blob(Vec3::new(0.0, 0.0, 2.0), 0.2, 40.0, red);
        let back = blob(Vec3::new(0.0, 0.0, 3.0), 0.2, 40.0, blue);
        let cfg = RasterConfig::default();
        let center = cam.cx as usize;
        let a = rasterize(&[front.clone(), back.clone()], &cam, &cfg).unwrap();
        let px = a.rgb.pixel(center, center);
        assert!((px[0] - 1.0).abs() < 1e-9 && px[2].abs() < 1e-9);

        let mut front2 = front;
        let mut back2 = back;
        std::mem::swap(&mut front2.position, &mut back2.position);
        let b = rasterize(&[front2, back2], &cam, &cfg).unwrap();
        let px = b.rgb.pixel(center, center);
        assert!(px[0].abs() < 1e-9 && (px[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_is_bit_identical() {
        let cam = test_cam(24);
        let gs: Vec<Gaussian> = (0..12)
            .map(|i| {
                let f = i as f64;
                blob(
                    Vec3::new(0.05 * (f - 6.0), 0.03 * (f % 4.0), 2.0 + 0.1 * (f % 3.0)),
                    0.05 + 0.01 * f,
                    0.3 * f - 1.0,
                    Vec3::new(f / 12.0, 1.0 - f / 12.0, 0.5),
                )
            })
            .collect();
        let mut rev = gs.clone();
        rev.reverse();
        let cfg = RasterConfig::default();
        let a = rasterize(&gs, &cam, &cfg).unwrap();
        let b = rasterize(&rev, &cam, &cfg).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn behind_camera_gaussians_are_skipped() {
        let cam = test_cam(8);
        let g = blob(Vec3::new(0.0, 0.0, -1.0), 0.5, 40.0, Vec3::repeat(1.0));
        let out = rasterize(&[g], &cam, &RasterConfig::default()).unwrap();
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(!out.screen_stats.visible[0]);
    }

    #[test]
    fn eigen_clamp_lifts_degenerate_covariance() {
        let s = clamp_eigen(Matrix2::new(1.0, 1.0, 1.0, 1.0), 1e-3);
        let det = s.determinant();
        assert!(det > 0.0);
        let untouched = clamp_eigen(Matrix2::new(2.0, 0.5, 0.5, 1.0), 1e-8);
        assert_eq!(untouched, Matrix2::new(2.0, 0.5, 0.5, 1.0));
    }

    #[test]
    fn non_finite_input_errors() {
        let g = blob(Vec3::new(f64::NAN, 0.0, 1.0), 0.1, 0.0, Vec3::zeros());
        assert!(rasterize(&[g], &test_cam(8), &RasterConfig::default()).is_err());
    }
}
