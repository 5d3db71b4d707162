//! Grayscale image and binary mask containers.
//!
//! Pixels are `f64` in `[0,1]`, row-major. PNG is the on-disk format: images
//! are stored 8-bit (the ingestion contract quantizes to 8 bits anyway) and
//! masks as 0/255.

use std::path::Path;

use crate::error::{RaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "pixel buffer does not match {h}x{w}");
        Image { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    /// Checks the container invariant: finite pixels within `[0,1]`.
    pub fn validate_range(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(RaError::Data(format!(
                    "pixel {} (y={}, x={}) out of range: {v}",
                    i,
                    i / self.w,
                    i % self.w
                )));
            }
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.data {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        (lo, hi)
    }

    /// Quantizes to 8 bits: `round(clamp(v, 0, 1) * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(h: usize, w: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), h * w);
        Image {
            h,
            w,
            data: bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.w as u32, self.h as u32, self.to_u8())
            .expect("buffer size checked by construction");
        buf.save(path)
            .map_err(|e| RaError::Data(format!("failed to write PNG {}: {e}", path.display())))
    }

    /// Loads a PNG as grayscale. 16-bit sources keep their full depth when
    /// mapping to `[0,1]`; anything else goes through 8-bit luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| RaError::Data(format!("failed to read image {}: {e}", path.display())))?;
        Ok(match img {
            image::DynamicImage::ImageLuma16(b) => {
                let (w, h) = (b.width() as usize, b.height() as usize);
                Image {
                    h,
                    w,
                    data: b.into_raw().iter().map(|v| *v as f64 / 65535.0).collect(),
                }
            }
            other => {
                let b = other.to_luma8();
                let (w, h) = (b.width() as usize, b.height() as usize);
                Image::from_u8(h, w, &b.into_raw())
            }
        })
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Image {
        Image {
            h: oh,
            w: ow,
            data: bilinear_resize(&self.data, self.h, self.w, oh, ow),
        }
    }
}

/// Bilinear resampling with half-pixel centers:
/// `src = (dst + 0.5) * (src_len / dst_len) - 0.5`, edge-clamped.
pub(crate) fn bilinear_resize(
    src: &[f64],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw);
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Binary pixel mask, same layout as [`Image`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w);
        Mask { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|b| *b)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes)
            .expect("buffer size checked by construction");
        buf.save(path)
            .map_err(|e| RaError::Data(format!("failed to write PNG {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = Image::load_png(path)?;
        Ok(Mask {
            h: img.h(),
            w: img.w(),
            data: img.data().iter().map(|v| *v > 0.5).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_roundtrip_is_identity_on_quantized_values() {
        let img = Image::from_u8(2, 3, &[0, 51, 102, 153, 204, 255]);
        let again = Image::from_u8(2, 3, &img.to_u8());
        assert_eq!(img, again);
    }

    #[test]
    fn range_validation_flags_bad_pixels() {
        let mut img = Image::zeros(2, 2);
        assert!(img.validate_range().is_ok());
        img.set(1, 0, 1.5);
        assert!(img.validate_range().is_err());
        img.set(1, 0, f64::NAN);
        assert!(img.validate_range().is_err());
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.25]);
        assert_eq!(img.resize_bilinear(2, 2), img);
    }

    #[test]
    fn bilinear_upsample_preserves_constant_and_interpolates_ramp() {
        let c = Image::from_vec(3, 3, vec![0.4; 9]);
        let up = c.resize_bilinear(6, 6);
        for v in up.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
        // A horizontal ramp stays monotone along rows after resampling.
        let ramp = Image::from_vec(1, 4, vec![0.0, 0.25, 0.5, 0.75]);
        let up = ramp.resize_bilinear(1, 8);
        for pair in up.data().windows(2) {
            assert!(pair[0] <= pair[1] + 1e-12);
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image::from_u8(3, 5, &(0..15u8).map(|v| v * 17).collect::<Vec<_>>());
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(img, back);

        let mpath = dir.path().join("mask.png");
        let mut m = Mask::zeros(4, 4);
        m.set(1, 2, true);
        m.set(3, 0, true);
        m.save_png(&mpath).unwrap();
        assert_eq!(Mask::load_png(&mpath).unwrap(), m);
    }

    #[test]
    fn load_missing_file_is_an_error() {
        assert!(Image::load_png(Path::new("/nonexistent/x.png")).is_err());
    }
}
