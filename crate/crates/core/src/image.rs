//! Dense float images plus the two on-disk encodings used by the pipeline:
//! 8-bit PNG for display frames and NPY (`<f4` / `<f8`, shape `(H, W, C)`)
//! as the lossless container for HDR color, depth and alpha.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Row-major `height × width × channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resample with pixel centers aligned at the image corners'
    /// half-pixel offsets.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut out = Image::new(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_x = self.width as f64 - 1.0;
        let max_y = self.height as f64 - 1.0;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    out.set(x, y, c, top * (1.0 - ty) + bottom * ty);
                }
            }
        }
        out
    }
}

/// Reinhard `x / (1 + x)` followed by the sRGB transfer curve.
pub fn tonemap(x: f64) -> f64 {
    let x = x.max(0.0);
    srgb_encode(x / (1.0 + x))
}

pub fn srgb_encode(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.040_45 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}

pub fn quantize_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes display-range values (already in [0,1]) as an 8-bit PNG.
/// One channel becomes grayscale, three RGB, four RGBA.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    write_png_u8(path, img.width, img.height, img.channels, &bytes)
}

pub fn write_png_u8(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Image(format!("unsupported PNG channel count {c}"))),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Raw 8-bit PNG contents: `(width, height, channels, bytes)`.
pub fn read_png_u8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "{}: only 8-bit PNG is supported",
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Reads a PNG into display-range floats in [0,1].
pub fn read_png(path: &Path) -> Result<Image> {
    let (w, h, c, bytes) = read_png_u8(path)?;
    Image::from_data(
        w,
        h,
        c,
        bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }
}

/// Serializes an image as NPY v1.0 with shape `(H, W, C)`.
pub fn encode_npy(img: &Image, dtype: NpyDtype) -> Vec<u8> {
    let header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        dtype.descr(),
        img.height,
        img.width,
        img.channels
    );
    // magic(6) + version(2) + header_len(2) + header + '\n', padded to 64 bytes
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = header.len() + pad + 1;
    let mut out = Vec::with_capacity(10 + header_len + img.data.len() * 8);
    out.extend_from_slice(b"\x93NUMPY");
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    match dtype {
        NpyDtype::F32 => img
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        NpyDtype::F64 => img
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Reads one NPY array from a stream. Accepts `<f4`/`<f8` C-order arrays of
/// rank 2 (`H, W`) or 3 (`H, W, C`).
pub fn read_npy_from(reader: &mut impl Read) -> Result<Image> {
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::Image(format!("npy magic: {e}")))?;
    if &magic[..6] != b"\x93NUMPY" {
        return Err(Error::Image("not an NPY stream".into()));
    }
    let header_len = if magic[6] == 1 {
        let mut b = [0u8; 2];
        reader
            .read_exact(&mut b)
            .map_err(|e| Error::Image(format!("npy header: {e}")))?;
        u16::from_le_bytes(b) as usize
    } else {
        let mut b = [0u8; 4];
        reader
            .read_exact(&mut b)
            .map_err(|e| Error::Image(format!("npy header: {e}")))?;
        u32::from_le_bytes(b) as usize
    };
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|e| Error::Image(format!("npy header: {e}")))?;
    let header = String::from_utf8_lossy(&header);
    let dtype = if header.contains("'<f8'") {
        NpyDtype::F64
    } else if header.contains("'<f4'") {
        NpyDtype::F32
    } else {
        return Err(Error::Image(format!(
            "unsupported npy dtype in header {header}"
        )));
    };
    if header.contains("'fortran_order': True") {
        return Err(Error::Image(
            "fortran-ordered npy arrays are not supported".into(),
        ));
    }
    let shape_start = header
        .find("'shape': (")
        .ok_or_else(|| Error::Image("npy header missing shape".into()))?
        + "'shape': (".len();
    let shape_end = header[shape_start..]
        .find(')')
        .ok_or_else(|| Error::Image("npy header has malformed shape".into()))?
        + shape_start;
    let dims: Vec<usize> = header[shape_start..shape_end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Image(format!("npy shape: {e}")))?;
    let (h, w, c) = match dims.as_slice() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        _ => return Err(Error::Image(format!("npy rank {} unsupported", dims.len()))),
    };
    let n = h * w * c;
    let data = match dtype {
        NpyDtype::F32 => {
            let mut raw = vec![0u8; n * 4];
            reader
                .read_exact(&mut raw)
                .map_err(|e| Error::Image(format!("npy payload: {e}")))?;
            raw.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect()
        }
        NpyDtype::F64 => {
            let mut raw = vec![0u8; n * 8];
            reader
                .read_exact(&mut raw)
                .map_err(|e| Error::Image(format!("npy payload: {e}")))?;
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect()
        }
    };
    Image::from_data(w, h, c, data)
}

pub fn write_npy(path: &Path, img: &Image, dtype: NpyDtype) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_npy(img, dtype))
        .map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<Image> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_npy_from(&mut std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn npy_header_is_aligned() {
        let img = Image::new(5, 3, 2);
        let bytes = encode_npy(&img, NpyDtype::F64);
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn png_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        write_png_u8(&path, 4, 3, 3, &bytes).unwrap();
        let (w, h, c, back) = read_png_u8(&path).unwrap();
        assert_eq!((w, h, c), (4, 3, 3));
        assert_eq!(back, bytes);
    }

    #[test]
    fn tonemap_is_monotone_and_bounded() {
        let mut prev = -1.0;
        for i in 0..100 {
            let v = tonemap(i as f64 * 0.3);
            assert!(v > prev || i == 0);
            assert!((0.0..1.0).contains(&v));
            prev = v;
        }
        assert_eq!(tonemap(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn npy_f64_round_trip(w in 1usize..6, h in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h * c)
                .map(|i| ((seed ^ i as u64) as f64).sin() * 1e3)
                .collect();
            let img = Image::from_data(w, h, c, data).unwrap();
            let bytes = encode_npy(&img, NpyDtype::F64);
            let back = read_npy_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
