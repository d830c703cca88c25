//! Unary feature extraction: a ResNet-like, shared-weight extractor
//! producing quarter-resolution feature maps, and the two-convolution
//! compression head feeding the concatenation volume.
//!
//! Layout: a three-convolution stem reaches half resolution, stage 1 keeps
//! it, stage 2 strides to quarter resolution, stages 3 and 4 stay at
//! quarter resolution with dilations 1 and 2. The last maps of stages 2-4
//! are concatenated into the `Nc`-channel unary features; widths scale
//! proportionally to the full-scale 64/128/128 split.

use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn2d, RunMode};
use crate::params::{Leaves, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};

/// Quarter-resolution unary features of one image.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub id: TensorId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

struct ResBlock {
    c1: ConvBn2d,
    c2: ConvBn2d,
    down: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dil: usize,
    ) -> Result<Self> {
        let c1 = ConvBn2d::new(
            ps,
            rng,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            (stride, stride),
            (dil, dil),
            true,
        )?;
        let c2 = ConvBn2d::new(
            ps,
            rng,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            (1, 1),
            (dil, dil),
            false,
        )?;
        let down = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(
                ps,
                rng,
                &format!("{name}.downsample"),
                c_in,
                c_out,
                1,
                (stride, stride),
                (0, 0),
                (1, 1),
                false,
            )?)
        } else {
            None
        };
        Ok(ResBlock { c1, c2, down })
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let y = self.c1.forward(tape, ps, lv, x, mode)?;
        let y = self.c2.forward(tape, ps, lv, y, mode)?;
        let skip = match &self.down {
            Some(d) => d.forward(tape, ps, lv, x)?,
            None => x,
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }
}

pub struct FeatureExtractor {
    stem: Vec<ConvBn2d>,
    stages: [Vec<ResBlock>; 4],
    unary_channels: usize,
}

impl FeatureExtractor {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &NetworkConfig,
    ) -> Result<Self> {
        let w = cfg.stage_widths();
        let mut stem = Vec::new();
        for (i, (ci, stride)) in [(3, 2), (w.stem, 1), (w.stem, 1)].into_iter().enumerate() {
            stem.push(ConvBn2d::new(
                ps,
                rng,
                &format!("features.stem.{i}"),
                ci,
                w.stem,
                3,
                (stride, stride),
                (1, 1),
                true,
            )?);
        }
        let specs = [
            // (in, out, stride, dilation)
            (w.stem, w.s1, 1, 1),
            (w.s1, w.s2, 2, 1),
            (w.s2, w.s3, 1, 1),
            (w.s3, w.s4, 1, 2),
        ];
        let mut stages: [Vec<ResBlock>; 4] = Default::default();
        for (si, &(c_in, c_out, stride, dil)) in specs.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks[si] {
                let (ci, st) = if b == 0 { (c_in, stride) } else { (c_out, 1) };
                blocks.push(ResBlock::new(
                    ps,
                    rng,
                    &format!("features.stage{}.{b}", si + 1),
                    ci,
                    c_out,
                    st,
                    dil,
                )?);
            }
            stages[si] = blocks;
        }
        Ok(FeatureExtractor {
            stem,
            stages,
            unary_channels: cfg.unary_channels,
        })
    }

    /// Extracts `Nc`-channel features at exactly 1/4 input resolution.
    /// The image extents must be divisible by 4.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        image: TensorId,
        mode: RunMode,
    ) -> Result<FeatureMap> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "extract_features",
                format!("expected [N, 3, H, W] image, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "extract_features: image extents {h}x{w} must be divisible by 4; \
                 pad the input first"
            )));
        }
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(tape, ps, lv, x, mode)?;
        }
        for block in &self.stages[0] {
            x = block.forward(tape, ps, lv, x, mode)?;
        }
        let mut s2 = x;
        for block in &self.stages[1] {
            s2 = block.forward(tape, ps, lv, s2, mode)?;
        }
        let mut s3 = s2;
        for block in &self.stages[2] {
            s3 = block.forward(tape, ps, lv, s3, mode)?;
        }
        let mut s4 = s3;
        for block in &self.stages[3] {
            s4 = block.forward(tape, ps, lv, s4, mode)?;
        }
        let id = tape.concat(&[s2, s3, s4], 1)?;
        let out_shape = tape.shape(id);
        debug_assert_eq!(out_shape[1], self.unary_channels);
        Ok(FeatureMap {
            id,
            channels: out_shape[1],
            height: out_shape[2],
            width: out_shape[3],
        })
    }
}

/// Two-convolution channel compression for the concatenation volume:
/// a 3x3 conv+BN+ReLU into the hidden width, then a bare 1x1 projection.
pub struct CompressHead {
    c1: ConvBn2d,
    c2: Conv2d,
    out_channels: usize,
}

impl CompressHead {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &NetworkConfig,
    ) -> Result<Self> {
        let mid = cfg.compress_mid_channels();
        Ok(CompressHead {
            c1: ConvBn2d::new(
                ps,
                rng,
                "compress.conv1",
                cfg.unary_channels,
                mid,
                3,
                (1, 1),
                (1, 1),
                true,
            )?,
            c2: Conv2d::new(
                ps,
                rng,
                "compress.conv2",
                mid,
                cfg.concat_channels,
                1,
                (1, 1),
                (0, 0),
                (1, 1),
                false,
            )?,
            out_channels: cfg.concat_channels,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        f: &FeatureMap,
        mode: RunMode,
    ) -> Result<FeatureMap> {
        let y = self.c1.forward(tape, ps, lv, f.id, mode)?;
        let y = self.c2.forward(tape, ps, lv, y)?;
        Ok(FeatureMap {
            id: y,
            channels: self.out_channels,
            height: f.height,
            width: f.width,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn desk_small() -> NetworkConfig {
        let mut cfg = NetworkConfig::desk();
        cfg.blocks = [1, 1, 1, 1];
        cfg
    }

    fn image<S: Scalar>(tape: &mut Tape<S>, seed: u64, n: usize, h: usize, w: usize) -> TensorId {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.leaf_f64(&[n, 3, h, w], &data, false).unwrap()
    }

    #[test]
    fn quarter_resolution_and_channel_count() {
        let cfg = desk_small();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fx = FeatureExtractor::new(&mut ps, &mut rng, &cfg).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let img = image(&mut tape, 1, 1, 64, 128);
        let f = fx
            .forward(&mut tape, &mut ps, &mut lv, img, RunMode::eval())
            .unwrap();
        assert_eq!(tape.shape(f.id), &[1, 32, 16, 32]);
    }

    #[test]
    fn indivisible_extents_instruct_padding() {
        let cfg = desk_small();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fx = FeatureExtractor::new(&mut ps, &mut rng, &cfg).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let img = image(&mut tape, 1, 1, 62, 128);
        let err = fx
            .forward(&mut tape, &mut ps, &mut lv, img, RunMode::eval())
            .unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn shared_weights_make_left_right_identical() {
        let cfg = desk_small();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = FeatureExtractor::new(&mut ps, &mut rng, &cfg).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let left = image(&mut tape, 9, 1, 16, 32);
        let right = image(&mut tape, 9, 1, 16, 32);
        let fl = fx
            .forward(&mut tape, &mut ps, &mut lv, left, RunMode::eval())
            .unwrap();
        let fr = fx
            .forward(&mut tape, &mut ps, &mut lv, right, RunMode::eval())
            .unwrap();
        assert_eq!(tape.value(fl.id), tape.value(fr.id));
    }

    #[test]
    fn no_cross_batch_leakage_in_eval() {
        let cfg = desk_small();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fx = FeatureExtractor::new(&mut ps, &mut rng, &cfg).unwrap();

        let run = |ps: &mut ParamStore<f32>, seed_b: u64| -> Vec<f32> {
            let mut tape = Tape::new();
            let mut lv = Leaves::new(ps, false);
            let a = image(&mut tape, 21, 1, 16, 32);
            let b = image(&mut tape, seed_b, 1, 16, 32);
            let batch = tape.concat(&[a, b], 0).unwrap();
            let f = fx
                .forward(&mut tape, ps, &mut lv, batch, RunMode::eval())
                .unwrap();
            let n = tape.numel(f.id);
            tape.value(f.id)[..n / 2].to_vec()
        };
        let f0 = run(&mut ps, 22);
        let f1 = run(&mut ps, 23);
        assert_eq!(f0, f1, "entry 0 features changed when entry 1 changed");
    }

    #[test]
    fn compression_preserves_extent_and_reduces_channels() {
        let cfg = desk_small();
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = FeatureExtractor::new(&mut ps, &mut rng, &cfg).unwrap();
        let ch = CompressHead::new(&mut ps, &mut rng, &cfg).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let img = image(&mut tape, 2, 1, 64, 128);
        let f = fx
            .forward(&mut tape, &mut ps, &mut lv, img, RunMode::eval())
            .unwrap();
        let c = ch
            .forward(&mut tape, &mut ps, &mut lv, &f, RunMode::eval())
            .unwrap();
        assert_eq!(tape.shape(c.id), &[1, 4, 16, 32]);
    }
}
