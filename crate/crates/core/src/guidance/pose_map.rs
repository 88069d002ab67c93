//! Skeleton conditioning images: colored bones and joints on black.

use crate::body_model::BodyModel;
use crate::image::Image;
use crate::math::Vec3;
use crate::render::{project, Camera};
use crate::Result;

/// Fully saturated color for joint `j` of `k`, spread around the hue wheel.
pub fn joint_color(j: usize, k: usize) -> Vec3 {
    let h = 6.0 * j as f64 / k.max(1) as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => Vec3::new(1.0, x, 0.0),
        1 => Vec3::new(x, 1.0, 0.0),
        2 => Vec3::new(0.0, 1.0, x),
        3 => Vec3::new(0.0, x, 1.0),
        4 => Vec3::new(x, 0.0, 1.0),
        _ => Vec3::new(1.0, 0.0, x),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn stamp(
    img: &mut Image,
    center: (f64, f64),
    reach: f64,
    color: Vec3,
    inside: impl Fn(f64, f64) -> bool,
) {
    let x0 = (center.0 - reach).floor().max(0.0) as usize;
    let y0 = (center.1 - reach).floor().max(0.0) as usize;
    let x1 = ((center.0 + reach).ceil().max(-1.0) as isize).min(img.width as isize - 1);
    let y1 = ((center.1 + reach).ceil().max(-1.0) as isize).min(img.height as isize - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            if inside(x as f64, y as f64) {
                for c in 0..3 {
                    img.set(x, y, c, color[c]);
                }
            }
        }
    }
}

/// Draws `joints` (world space) with the model's kinematic tree from `cam`.
/// Joints behind the camera and bones touching them are skipped.
pub fn draw_pose_map(model: &BodyModel, joints: &[Vec3], cam: &Camera) -> Result<Image> {
    let mut img = Image::new(cam.width, cam.height, 3);
    let k = joints.len();
    let scale = cam.width.max(cam.height) as f64 / 256.0;
    let bone_radius = (2.0 * scale).max(1.0);
    let joint_radius = (4.0 * scale).max(1.5);
    let pix: Vec<Option<(f64, f64)>> = joints
        .iter()
        .map(|j| project(cam, j).ok().map(|(u, v, _)| (u, v)))
        .collect();
    for j in 0..k {
        let Some(parent) = model.parent(j) else {
            continue;
        };
        let (Some(a), Some(b)) = (pix[parent], pix[j]) else {
            continue;
        };
        let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let reach = 0.5 * ((a.0 - b.0).hypot(a.1 - b.1)) + bone_radius;
        if !(reach.is_finite() && reach < 4.0 * (img.width + img.height) as f64) {
            continue;
        }
        let color = joint_color(j, k) * 0.6;
        stamp(&mut img, mid, reach, color, |x, y| {
            segment_distance((x, y), a, b) <= bone_radius
        });
    }
    // root last so it stays on top
    for (j, p) in pix.iter().enumerate().rev() {
        let Some(c) = *p else { continue };
        stamp(&mut img, c, joint_radius, joint_color(j, k), |x, y| {
            (x - c.0).hypot(y - c.1) <= joint_radius
        });
    }
    Ok(img)
}
