//! Data ingestion and generation: PFM disparity files, 16-bit PNG sparse
//! disparity, 8-bit stereo images and the synthetic random-dot stereogram
//! generator.

pub mod images;
pub mod kitti;
pub mod manifest;
pub mod pfm;
pub mod rds;

use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{filter_valid, DisparityMap};

pub use images::RgbBuffer;
pub use manifest::ManifestEntry;
pub use rds::{generate_rds, sample_seed, StereoSample, SyntheticConfig};

/// Loads a ground-truth disparity map, dispatching on extension:
/// `.pfm` for dense maps (non-finite values mark missing pixels) and
/// `.png` for sparse 16-bit maps (raw 0 marks missing pixels).
pub fn load_gt(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => {
            let img = pfm::read_pfm(path)?;
            if img.channels != 1 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    msg: "disparity PFM must be grayscale".into(),
                });
            }
            let valid = img.data.iter().map(|v| v.is_finite()).collect();
            Ok(DisparityMap {
                height: img.height,
                width: img.width,
                values: img.data,
                valid,
            })
        }
        Some("png") => kitti::read_disparity_png(path),
        other => Err(Error::invalid(format!(
            "unsupported ground-truth extension {other:?} (expected .pfm or .png)"
        ))),
    }
}

/// A manifest sample loaded into memory with its validity refined against
/// `d_max`, plus whether it clears the 10%-valid threshold.
pub fn load_sample(entry: &ManifestEntry, d_max: usize) -> Result<(StereoSample, bool)> {
    let left = images::load_rgb(&entry.left)?;
    let right = images::load_rgb(&entry.right)?;
    let gt_raw = load_gt(&entry.gt)?;
    if left.height != right.height
        || left.width != right.width
        || left.height != gt_raw.height
        || left.width != gt_raw.width
    {
        return Err(Error::shape(
            "load_sample",
            format!(
                "extent mismatch: left {}x{}, right {}x{}, gt {}x{}",
                left.height, left.width, right.height, right.width, gt_raw.height, gt_raw.width
            ),
        ));
    }
    let (gt, passes) = filter_valid(&gt_raw, d_max);
    let id = entry
        .left
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    Ok((
        StereoSample {
            id,
            left,
            right,
            gt,
        },
        passes,
    ))
}

/// Writes a ground-truth map as grayscale PFM, encoding invalid pixels as
/// +inf so readers recover the mask through the finite check.
pub fn write_gt_pfm(path: impl AsRef<Path>, gt: &DisparityMap) -> Result<()> {
    let data: Vec<f32> = gt
        .values
        .iter()
        .zip(&gt.valid)
        .map(|(&v, &ok)| if ok { v } else { f32::INFINITY })
        .collect();
    pfm::write_pfm(
        path,
        &pfm::PfmImage {
            width: gt.width,
            height: gt.height,
            channels: 1,
            scale: -1.0,
            data,
        },
    )
}
