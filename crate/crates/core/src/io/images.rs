//! 8-bit RGB image input (PNG / PPM) and normalization into model tensors.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar};

/// Interleaved 8-bit RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbBuffer {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbBuffer {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        RgbBuffer {
            height,
            width,
            data,
        }
    }

    /// Scales to [0,1] and normalizes per channel into a `[3, H, W]` buffer.
    pub fn to_chw<S: Scalar>(&self, mean: f64, std: f64) -> Vec<S> {
        let plane = self.height * self.width;
        let mut out = vec![S::zero(); 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let v = self.data[p * 3 + c] as f64 / 255.0;
                out[c * plane + p] = cast((v - mean) / std);
            }
        }
        out
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbBuffer> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbBuffer::new(h, w, img.into_raw()))
}

pub fn save_rgb(path: impl AsRef<Path>, buf: &RgbBuffer) -> Result<()> {
    let img: RgbImage =
        ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(buf.width as u32, buf.height as u32, buf.data.clone())
            .expect("buffer length matches extents");
    img.save(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}

/// Zero-pads an image on the top and right to the target extents, matching
/// the padding convention used before inference. Padding happens in raw
/// [0,1] space, i.e. the padded pixels are black.
pub fn pad_top_right(buf: &RgbBuffer, target_h: usize, target_w: usize) -> RgbBuffer {
    assert!(target_h >= buf.height && target_w >= buf.width);
    let top = target_h - buf.height;
    let mut data = vec![0u8; target_h * target_w * 3];
    for y in 0..buf.height {
        let src = &buf.data[y * buf.width * 3..(y + 1) * buf.width * 3];
        let dst_row = top + y;
        data[(dst_row * target_w) * 3..(dst_row * target_w) * 3 + buf.width * 3]
            .copy_from_slice(src);
    }
    RgbBuffer::new(target_h, target_w, data)
}

/// Next multiple of `unit` at or above `v`.
pub fn round_up(v: usize, unit: usize) -> usize {
    v.div_ceil(unit) * unit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_normalization() {
        let buf = RgbBuffer::new(1, 2, vec![255, 0, 127, 0, 255, 127]);
        let t: Vec<f64> = buf.to_chw(0.5, 0.5);
        // channel 0: [255, 0] -> [1.0, -1.0]
        assert!((t[0] - 1.0).abs() < 1e-12);
        assert!((t[1] + 1.0).abs() < 1e-12);
        // channel 1: [0, 255]
        assert!((t[2] + 1.0).abs() < 1e-12);
        assert!((t[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padding_is_top_and_right() {
        let buf = RgbBuffer::new(1, 1, vec![9, 9, 9]);
        let padded = pad_top_right(&buf, 2, 2);
        // original pixel lands at the bottom-left
        assert_eq!(&padded.data[(1 * 2) * 3..(1 * 2) * 3 + 3], &[9, 9, 9]);
        assert!(padded.data[..6].iter().all(|&b| b == 0));
        assert_eq!(round_up(62, 16), 64);
        assert_eq!(round_up(64, 16), 64);
    }

    #[test]
    fn png_round_trip() {
        let dir = std::env::temp_dir().join("gwcstereo-img-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.png");
        let buf = RgbBuffer::new(2, 3, (0u8..18).collect());
        save_rgb(&p, &buf).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), buf);
    }
}
