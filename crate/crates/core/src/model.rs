//! The assembled stereo network: shared-weight feature extraction, cost
//! volume construction, 3D aggregation and the soft-argmin output modules.
//!
//! Volume extents that are not divisible by 4 (the hourglass needs two
//! clean halvings) are zero-padded on the high side before aggregation and
//! cropped back before the output modules, so the probability volumes
//! always cover exactly `d_max` disparities of the unpadded geometry.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::aggregation::{Aggregation, AggregationOutputs};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::features::{CompressHead, FeatureExtractor};
use crate::head::{soft_argmin, OutputModule};
use crate::nn::RunMode;
use crate::params::{Leaves, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};
use crate::volume::{
    build_combined_volume, build_concat_volume, build_gwc_volume, CostVolume,
};

pub struct StereoModel {
    pub cfg: NetworkConfig,
    pub features: FeatureExtractor,
    pub compress: Option<CompressHead>,
    pub aggregation: Aggregation,
    pub heads: Vec<OutputModule>,
}

impl StereoModel {
    /// Builds the network and registers all parameters under `ps`, with
    /// He initialization drawn from `seed`.
    pub fn new<S: Scalar>(cfg: NetworkConfig, ps: &mut ParamStore<S>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureExtractor::new(ps, &mut rng, &cfg)?;
        let compress = if cfg.use_concat_volume {
            Some(CompressHead::new(ps, &mut rng, &cfg)?)
        } else {
            None
        };
        let aggregation = Aggregation::new(
            ps,
            &mut rng,
            cfg.volume_channels(),
            cfg.base_3d_channels,
            cfg.num_hourglasses,
        )?;
        let mut heads = Vec::new();
        for i in 0..cfg.num_outputs() {
            heads.push(OutputModule::new(ps, &mut rng, &format!("output{i}"), cfg.base_3d_channels)?);
        }
        Ok(StereoModel {
            cfg,
            features,
            compress,
            aggregation,
            heads,
        })
    }

    fn build_volume<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        left: TensorId,
        right: TensorId,
        mode: RunMode,
    ) -> Result<CostVolume> {
        let fl = self.features.forward(tape, ps, lv, left, mode)?;
        let fr = self.features.forward(tape, ps, lv, right, mode)?;
        tape.label("unary_l", fl.id);
        tape.label("unary_r", fr.id);
        let d_levels = self.cfg.d_levels();

        let gwc = if self.cfg.use_gwc_volume {
            let v = build_gwc_volume(tape, &fl, &fr, d_levels, self.cfg.gwc_groups)?;
            tape.label("volume_g", v.id);
            Some(v)
        } else {
            None
        };
        let cat = if self.cfg.use_concat_volume {
            let compress = self.compress.as_ref().expect("compress head exists");
            let cl = compress.forward(tape, ps, lv, &fl, mode)?;
            let cr = compress.forward(tape, ps, lv, &fr, mode)?;
            let v = build_concat_volume(tape, &cl, &cr, d_levels)?;
            tape.label("volume_c", v.id);
            Some(v)
        } else {
            None
        };
        let volume = match (gwc, cat) {
            (Some(g), Some(c)) => build_combined_volume(tape, &g, &c)?,
            (Some(g), None) => g,
            (None, Some(c)) => c,
            (None, None) => unreachable!("config validation requires one volume"),
        };
        tape.label("volume", volume.id);
        if volume.channels != self.cfg.volume_channels() {
            return Err(Error::shape(
                "build_volume",
                format!(
                    "volume has {} channels, config expects {}",
                    volume.channels,
                    self.cfg.volume_channels()
                ),
            ));
        }
        Ok(volume)
    }

    fn aggregate<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        volume: &CostVolume,
        mode: RunMode,
        infer: bool,
    ) -> Result<Vec<TensorId>> {
        let vs = tape.shape(volume.id).to_vec();
        let dims = [vs[2], vs[3], vs[4]];
        let pad = [
            (4 - dims[0] % 4) % 4,
            (4 - dims[1] % 4) % 4,
            (4 - dims[2] % 4) % 4,
        ];
        let padded = if pad != [0, 0, 0] {
            tape.zero_pad_high(volume.id, pad)?
        } else {
            volume.id
        };
        let outs = self
            .aggregation
            .forward(tape, ps, lv, padded, mode, infer)?;
        let vols = match outs {
            AggregationOutputs::Train(v) => v,
            AggregationOutputs::Infer(v) => vec![v],
        };
        if pad == [0, 0, 0] {
            return Ok(vols);
        }
        vols.into_iter()
            .map(|v| tape.crop_high(v, dims))
            .collect()
    }

    fn head_disparity<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        head_index: usize,
        volume: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let prob = self.heads[head_index].forward(tape, ps, lv, volume, self.cfg.d_max, mode)?;
        let d = soft_argmin(tape, &prob)?;
        tape.label(format!("output{head_index}.disparity"), d);
        Ok(d)
    }

    /// Training forward: one full-resolution disparity map per output
    /// module, auxiliary heads included.
    pub fn forward_train<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        left: TensorId,
        right: TensorId,
        mode: RunMode,
    ) -> Result<Vec<TensorId>> {
        let volume = self.build_volume(tape, ps, lv, left, right, mode)?;
        let vols = self.aggregate(tape, ps, lv, &volume, mode, false)?;
        let mut preds = Vec::with_capacity(vols.len());
        for (i, v) in vols.into_iter().enumerate() {
            preds.push(self.head_disparity(tape, ps, lv, i, v, mode)?);
        }
        Ok(preds)
    }

    /// Inference forward: auxiliary output modules are skipped entirely;
    /// only the final head's disparity map is computed.
    pub fn forward_infer<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        left: TensorId,
        right: TensorId,
    ) -> Result<TensorId> {
        let mode = RunMode::eval();
        let volume = self.build_volume(tape, ps, lv, left, right, mode)?;
        let vols = self.aggregate(tape, ps, lv, &volume, mode, true)?;
        let last = self.cfg.num_outputs() - 1;
        self.head_disparity(tape, ps, lv, last, vols[0], mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            unary_channels: 8,
            gwc_groups: 2,
            concat_channels: 2,
            d_max: 8,
            base_3d_channels: 4,
            num_hourglasses: 3,
            blocks: [1, 1, 1, 1],
            use_gwc_volume: true,
            use_concat_volume: true,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }

    fn image<S: Scalar>(tape: &mut Tape<S>, seed: u64, h: usize, w: usize) -> TensorId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.leaf_f64(&[1, 3, h, w], &data, false).unwrap()
    }

    #[test]
    fn train_and_infer_shapes_with_volume_padding() {
        // 8x16 image: quarter-resolution extents 2x4 and d_levels 2 all
        // need high-side padding to 4 inside the aggregation stage.
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f32>::new();
        let model = StereoModel::new(cfg, &mut ps, 11).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let left = image(&mut tape, 0, 8, 16);
        let right = image(&mut tape, 1, 8, 16);
        let preds = model
            .forward_train(&mut tape, &mut ps, &mut lv, left, right, RunMode::eval())
            .unwrap();
        assert_eq!(preds.len(), 4);
        for &p in &preds {
            assert_eq!(tape.shape(p), &[1, 8, 16]);
        }
        assert_eq!(tape.labeled_shape("volume").unwrap(), &[1, 6, 2, 2, 4]);
        // disparity range [0, d_max - 1]
        for &p in &preds {
            for &v in tape.value(p) {
                assert!((0.0..=7.0).contains(&v));
            }
        }
    }

    #[test]
    fn infer_matches_train_graph_final_head_exactly() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::<f32>::new();
        let model = StereoModel::new(cfg, &mut ps, 3).unwrap();

        let mut t1 = Tape::new();
        let mut lv1 = Leaves::new(&ps, false);
        let l1 = image(&mut t1, 5, 16, 32);
        let r1 = image(&mut t1, 6, 16, 32);
        let train_preds = model
            .forward_train(&mut t1, &mut ps, &mut lv1, l1, r1, RunMode::eval())
            .unwrap();

        let mut t2 = Tape::new();
        let mut lv2 = Leaves::new(&ps, false);
        let l2 = image(&mut t2, 5, 16, 32);
        let r2 = image(&mut t2, 6, 16, 32);
        let infer_pred = model
            .forward_infer(&mut t2, &mut ps, &mut lv2, l2, r2)
            .unwrap();

        assert_eq!(
            t1.value(train_preds[3]),
            t2.value(infer_pred),
            "aux heads must not perturb the trunk"
        );

        // inference graph references no aux-head parameters
        let used: Vec<String> = lv2
            .used()
            .iter()
            .map(|(p, _)| ps.slot(*p).name.clone())
            .collect();
        for name in &used {
            assert!(
                !name.starts_with("output0") && !name.starts_with("output1") && !name.starts_with("output2"),
                "inference path touched {name}"
            );
        }
        assert!(used.iter().any(|n| n.starts_with("output3")));
    }
}
