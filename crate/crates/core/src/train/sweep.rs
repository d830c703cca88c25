//! Channel-reduction sweep: trains each (variant, base width) cell under
//! an identical budget on shared synthetic data and tabulates parameter
//! counts and validation EPE.
//!
//! The cost volume scales with the trunk: correlation groups and
//! compressed concat channels shrink by the same factor as the base
//! channel count, mirroring how the full-scale model is thinned.

use crate::config::{RunConfig, SweepSettings, VolumeVariant};
use crate::error::{Error, Result};
use crate::io::{generate_rds, sample_seed, StereoSample, SyntheticConfig};
use crate::train::train;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub variant: &'static str,
    pub base_channels: usize,
    pub param_count: usize,
    pub val_epe: f64,
}

pub const SWEEP_CSV_HEADER: &str = "variant,base_channels,param_count,val_epe";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4}\n",
            r.variant, r.base_channels, r.param_count, r.val_epe
        ));
    }
    out
}

/// Derives the cell config for one (variant, base) pair from the template.
pub fn scaled_config(template: &RunConfig, variant: VolumeVariant, base: usize) -> Result<RunConfig> {
    let mut cfg = template.clone();
    let ref_base = template.net.base_3d_channels;
    if ref_base == 0 || base == 0 {
        return Err(Error::Config("base channels must be positive".into()));
    }
    let factor = base as f64 / ref_base as f64;
    let scale = |v: usize| ((v as f64 * factor).round() as usize).max(1);
    cfg.net.base_3d_channels = base;
    cfg.net.gwc_groups = scale(template.net.gwc_groups);
    cfg.net.concat_channels = scale(template.net.concat_channels);
    cfg.net.set_variant(variant);
    cfg.validate()?;
    Ok(cfg)
}

fn synthetic_set(settings: &SweepSettings, d_max: usize, seed: u64, count: usize, salt: u64) -> Result<Vec<StereoSample>> {
    (0..count)
        .map(|i| {
            generate_rds(&SyntheticConfig {
                height: settings.height,
                width: settings.width,
                d_max,
                dot_density: 0.7,
                max_shapes: 5,
                seed: sample_seed(seed ^ salt, i as u64),
            })
        })
        .collect()
}

/// Trains every cell and returns rows grouped by variant, in the listed
/// base-channel order.
pub fn run_sweep<S: Scalar>(template: &RunConfig, settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    settings.validate()?;
    let train_set = synthetic_set(
        settings,
        template.net.d_max,
        template.train.seed,
        settings.train_samples,
        0x5EED_0001,
    )?;
    let val_set = synthetic_set(
        settings,
        template.net.d_max,
        template.train.seed,
        settings.val_samples,
        0x5EED_0002,
    )?;
    let mut rows = Vec::new();
    for &variant in &settings.variants {
        for &base in &settings.base_channels {
            let cfg = scaled_config(template, variant, base)?;
            let outcome = train::<S>(&cfg, &train_set, &val_set, None)?;
            rows.push(SweepRow {
                variant: variant.name(),
                base_channels: base,
                param_count: outcome.trainable_params,
                val_epe: outcome.best_val_epe,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NetworkConfig, TrainConfig};

    #[test]
    fn scaling_tracks_base_factor() {
        let template = RunConfig {
            net: NetworkConfig::desk(),
            train: TrainConfig::desk(),
        };
        // desk reference: base 8, groups 8, concat 4
        let c4 = scaled_config(&template, VolumeVariant::GwcCat, 4).unwrap();
        assert_eq!((c4.net.gwc_groups, c4.net.concat_channels), (4, 2));
        let c2 = scaled_config(&template, VolumeVariant::GwcCat, 2).unwrap();
        assert_eq!((c2.net.gwc_groups, c2.net.concat_channels), (2, 1));
        let cat = scaled_config(&template, VolumeVariant::Cat, 8).unwrap();
        assert!(!cat.net.use_gwc_volume && cat.net.use_concat_volume);
        // combined volume channels exceed cat-only by the group term
        assert_eq!(c4.net.volume_channels(), 4 + 2 * 2);
        assert_eq!(
            scaled_config(&template, VolumeVariant::Cat, 4).unwrap().net.volume_channels(),
            2 * 2
        );
    }

    #[test]
    fn csv_row_count_is_variants_times_widths() {
        let rows = vec![
            SweepRow { variant: "cat", base_channels: 8, param_count: 100, val_epe: 1.0 },
            SweepRow { variant: "cat", base_channels: 4, param_count: 50, val_epe: 2.0 },
        ];
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
    }
}
