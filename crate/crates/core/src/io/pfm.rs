//! PFM disparity maps: "Pf" (grayscale) or "PF" (color) header, `W H`
//! dimensions, a scale line whose sign encodes endianness (negative =
//! little-endian), and rows stored bottom-to-top. Reads flip rows so the
//! in-memory layout is top-down. Round trips are bit-exact, which lets
//! +inf mark occluded pixels in generated ground truth.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Scale/endianness flag as stored in the file.
    pub scale: f32,
    /// Top-down, row-major, channel-interleaved samples.
    pub data: Vec<f32>,
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Reads one whitespace-delimited token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(path, start, "unexpected end of header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| format_err(path, start, "non-UTF8 header token"))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let magic_at = pos;
    let magic = token(&bytes, &mut pos, path)?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(format_err(
                path,
                magic_at,
                format!("bad magic '{other}', expected 'Pf' or 'PF'"),
            ))
        }
    };
    let w_at = pos;
    let width: usize = token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| format_err(path, w_at, "invalid width"))?;
    let h_at = pos;
    let height: usize = token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| format_err(path, h_at, "invalid height"))?;
    let s_at = pos;
    let scale: f32 = token(&bytes, &mut pos, path)?
        .parse()
        .map_err(|_| format_err(path, s_at, "invalid scale"))?;
    if scale == 0.0 {
        return Err(format_err(path, s_at, "zero scale"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing header terminator"));
    }
    pos += 1;

    let count = width * height * channels;
    let need = count * 4;
    if bytes.len() - pos < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!(
                "truncated payload: need {need} bytes, have {}",
                bytes.len() - pos
            ),
        ));
    }
    let little = scale < 0.0;
    let payload = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; count];
    let row = width * channels;
    for y in 0..height {
        // file rows run bottom-to-top
        let src_y = height - 1 - y;
        for i in 0..row {
            let o = (src_y * row + i) * 4;
            let b = [payload[o], payload[o + 1], payload[o + 2], payload[o + 3]];
            data[y * row + i] = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        scale,
        data,
    })
}

/// Writes little-endian PFM (scale -1.0) from top-down data.
pub fn write_pfm(path: impl AsRef<Path>, img: &PfmImage) -> Result<()> {
    let path = path.as_ref();
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::invalid(format!(
            "PFM supports 1 or 3 channels, got {}",
            img.channels
        )));
    }
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::shape(
            "write_pfm",
            format!(
                "{}x{}x{} needs {} samples, got {}",
                img.width,
                img.height,
                img.channels,
                img.width * img.height * img.channels,
                img.data.len()
            ),
        ));
    }
    let magic = if img.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for i in 0..row {
            out.extend_from_slice(&img.data[y * row + i].to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
