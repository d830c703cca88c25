//! Sparse disparity as 16-bit grayscale PNG: disparity = raw / 256, raw 0
//! encodes a missing measurement.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::loss::DisparityMap;

pub fn read_disparity_png(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let buf = match img {
        DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                msg: format!(
                    "expected 16-bit single-channel PNG, got {:?}-color input",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut values = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    for (i, px) in buf.pixels().enumerate() {
        let raw = px.0[0];
        if raw != 0 {
            values[i] = raw as f32 / 256.0;
            valid[i] = true;
        }
    }
    Ok(DisparityMap {
        height: h,
        width: w,
        values,
        valid,
    })
}

/// Writes `round(d * 256)` clamped to u16, with invalid pixels (and
/// disparities that round to raw 0) encoded as 0.
pub fn write_disparity_png(path: impl AsRef<Path>, map: &DisparityMap) -> Result<()> {
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::new(map.width as u32, map.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let raw = if map.valid[i] {
            (map.values[i] as f64 * 256.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        *px = Luma([raw]);
    }
    buf.save(path.as_ref())
        .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
}
