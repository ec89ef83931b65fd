//! RGB images and binary masks, read from PNG or raw little-endian f32.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as PngRgb};

use crate::error::{Error, Result};

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Contract(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// Row-major binary mask; `true` marks the object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(x0, y0, x1, y1)` bounds of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Contract(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

fn is_raw(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("f32" | "raw" | "bin")
    )
}

/// Reads a PNG, or a raw `224 x 224 x 3` little-endian f32 array when the
/// extension is `.f32`, `.raw` or `.bin`.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    if is_raw(path) {
        return load_raw_f32(path, 224, 224);
    }
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    RgbImage::new(w as usize, h as usize, data)
}

pub fn load_raw_f32(path: &Path, width: usize, height: usize) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = width * height * 3 * 4;
    if bytes.len() != expected {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("raw image must be {expected} bytes ({width}x{height}x3 f32), got {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    RgbImage::new(width, height, data)
}

pub fn save_raw_f32(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let raw = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: PngRgb = ImageBuffer::<Rgb<u8>, _>::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads a mask image; any nonzero channel marks the object.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0.iter().any(|&c| c != 0)).collect();
    Mask::new(w as usize, h as usize, data)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            msg: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(224, 224, [0.2, 0.4, 1.0]);
        img.set_pixel(3, 5, [0.0, 1.0, 0.0]);
        let raw = dir.path().join("img.f32");
        save_raw_f32(&raw, &img).unwrap();
        let back = load_image(&raw).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-7));

        let png = dir.path().join("img.png");
        save_png(&png, &img).unwrap();
        let back = load_image(&png).unwrap();
        assert_eq!(back.pixel(3, 5), [0.0, 1.0, 0.0]);
        assert!((back.pixel(0, 0)[0] - 51.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn mask_round_trip_and_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::empty(10, 8);
        m.set(2, 3, true);
        m.set(7, 5, true);
        let p = dir.path().join("m.png");
        save_mask(&p, &m).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.bbox(), Some((2, 3, 7, 5)));
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }

    #[test]
    fn raw_size_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.f32");
        std::fs::write(&p, [0u8; 12]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }

    #[test]
    fn iou_half_overlap() {
        let mut a = Mask::empty(4, 1);
        let mut b = Mask::empty(4, 1);
        a.set(0, 0, true);
        a.set(1, 0, true);
        b.set(1, 0, true);
        b.set(2, 0, true);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&Mask::empty(4, 1), &Mask::empty(4, 1)).unwrap(), 0.0);
    }
}
