use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

/// Axis-aligned pixel box; `w` and `h` count pixels, so a single pixel is 1×1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn as_array(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x as f64 - 0.5
            && v >= self.y as f64 - 0.5
            && u <= (self.x + self.w) as f64 - 0.5
            && v <= (self.y + self.h) as f64 - 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    /// `None` when no pixel passes the threshold.
    pub bbox: Option<BBox>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }

    pub fn to_image(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Image::from_data(self.width, self.height, 1, data).expect("mask dimensions")
    }
}

pub fn mask_and_bbox(alpha: &Image, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold {threshold} outside (0, 1)"
        )));
    }
    if alpha.channels != 1 {
        return Err(Error::Dimension(format!(
            "alpha has {} channels",
            alpha.channels
        )));
    }
    let (w, h) = (alpha.width, alpha.height);
    let data: Vec<bool> = alpha.data.iter().map(|&a| a >= threshold).collect();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            if data[y * w + x] {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let bbox = bounds.map(|(x0, y0, x1, y1)| BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    });
    Ok(Mask {
        width: w,
        height: h,
        data,
        bbox,
    })
}
