//! The improved 3D aggregation network: a four-convolution pre-hourglass
//! with a residual add, followed by three stacked encoder-decoder
//! hourglasses whose shortcut connections carry 1x1x1 convolutions (batch
//! norm, no ReLU). There are no residual connections between hourglasses,
//! so the auxiliary branches can be dropped entirely at inference.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBn3d, DeconvBn3d, RunMode};
use crate::params::{Leaves, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};

/// Pre-hourglass: conv1 = volume -> base -> base, conv2 = base -> base -> base,
/// output = conv1 path + conv2 path (no trailing ReLU on the add).
pub struct PreHourglass {
    conv1a: ConvBn3d,
    conv1b: ConvBn3d,
    conv2a: ConvBn3d,
    conv2b: ConvBn3d,
}

impl PreHourglass {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        volume_channels: usize,
        base: usize,
    ) -> Result<Self> {
        Ok(PreHourglass {
            conv1a: ConvBn3d::new(ps, rng, "pre.conv1a", volume_channels, base, 3, 1, true)?,
            conv1b: ConvBn3d::new(ps, rng, "pre.conv1b", base, base, 3, 1, true)?,
            conv2a: ConvBn3d::new(ps, rng, "pre.conv2a", base, base, 3, 1, true)?,
            conv2b: ConvBn3d::new(ps, rng, "pre.conv2b", base, base, 3, 1, true)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        volume: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let c1 = self.conv1a.forward(tape, ps, lv, volume, mode)?;
        let c1 = self.conv1b.forward(tape, ps, lv, c1, mode)?;
        tape.label("pre.conv1", c1);
        let c2 = self.conv2a.forward(tape, ps, lv, c1, mode)?;
        let c2 = self.conv2b.forward(tape, ps, lv, c2, mode)?;
        tape.label("pre.conv2", c2);
        let out = tape.add(c1, c2)?;
        tape.label("pre.output", out);
        Ok(out)
    }
}

/// One 3D hourglass: two stride-2 encoder stages (base -> 2b -> 4b), two
/// doubling deconv stages back, with 1x1x1 shortcut convolutions feeding
/// the Add&ReLU joins. Output shape equals input shape.
pub struct Hourglass {
    name: String,
    conv1a: ConvBn3d,
    conv1b: ConvBn3d,
    conv2a: ConvBn3d,
    conv2b: ConvBn3d,
    deconv1: DeconvBn3d,
    shortcut1: ConvBn3d,
    deconv0: DeconvBn3d,
    shortcut0: ConvBn3d,
}

impl Hourglass {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        base: usize,
    ) -> Result<Self> {
        let b2 = base * 2;
        let b4 = base * 4;
        Ok(Hourglass {
            name: name.to_string(),
            conv1a: ConvBn3d::new(ps, rng, &format!("{name}.conv1a"), base, b2, 3, 2, true)?,
            conv1b: ConvBn3d::new(ps, rng, &format!("{name}.conv1b"), b2, b2, 3, 1, true)?,
            conv2a: ConvBn3d::new(ps, rng, &format!("{name}.conv2a"), b2, b4, 3, 2, true)?,
            conv2b: ConvBn3d::new(ps, rng, &format!("{name}.conv2b"), b4, b4, 3, 1, true)?,
            deconv1: DeconvBn3d::new(ps, rng, &format!("{name}.deconv1"), b4, b2)?,
            shortcut1: ConvBn3d::new(ps, rng, &format!("{name}.shortcut1"), b2, b2, 1, 1, false)?,
            deconv0: DeconvBn3d::new(ps, rng, &format!("{name}.deconv0"), b2, base)?,
            shortcut0: ConvBn3d::new(ps, rng, &format!("{name}.shortcut0"), base, base, 1, 1, false)?,
        })
    }

    /// The 1x1x1 shortcut convolutions, exposed for parameter-cost checks.
    pub fn shortcut_convs(&self) -> [&ConvBn3d; 2] {
        [&self.shortcut1, &self.shortcut0]
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        input: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(
                "hourglass",
                format!("expected 5D volume, got {shape:?}"),
            ));
        }
        for (axis, extent) in shape[2..].iter().enumerate() {
            if extent % 4 != 0 {
                return Err(Error::invalid(format!(
                    "hourglass: spatial axis {axis} extent {extent} must be divisible by 4; \
                     zero-pad the volume on the high side first"
                )));
            }
        }
        let x1a = self.conv1a.forward(tape, ps, lv, input, mode)?;
        tape.label(format!("{}.conv1a", self.name), x1a);
        let x1 = self.conv1b.forward(tape, ps, lv, x1a, mode)?;
        tape.label(format!("{}.conv1b", self.name), x1);
        let x2a = self.conv2a.forward(tape, ps, lv, x1, mode)?;
        tape.label(format!("{}.conv2a", self.name), x2a);
        let x2 = self.conv2b.forward(tape, ps, lv, x2a, mode)?;
        tape.label(format!("{}.conv2b", self.name), x2);
        let up1 = self.deconv1.forward(tape, ps, lv, x2, mode)?;
        tape.label(format!("{}.deconv1", self.name), up1);
        let sc1 = self.shortcut1.forward(tape, ps, lv, x1, mode)?;
        tape.label(format!("{}.shortcut1", self.name), sc1);
        let plus1 = tape.add(up1, sc1)?;
        let plus1 = tape.relu(plus1);
        tape.label(format!("{}.plus1", self.name), plus1);
        let up0 = self.deconv0.forward(tape, ps, lv, plus1, mode)?;
        tape.label(format!("{}.deconv0", self.name), up0);
        let sc0 = self.shortcut0.forward(tape, ps, lv, input, mode)?;
        tape.label(format!("{}.shortcut0", self.name), sc0);
        let out = tape.add(up0, sc0)?;
        let out = tape.relu(out);
        tape.label(format!("{}.output", self.name), out);
        Ok(out)
    }
}

/// Feature volumes feeding the output modules: all four in train mode,
/// only the final one in inference mode.
pub enum AggregationOutputs {
    Train(Vec<TensorId>),
    Infer(TensorId),
}

pub struct Aggregation {
    pub pre: PreHourglass,
    pub hourglasses: Vec<Hourglass>,
}

impl Aggregation {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        volume_channels: usize,
        base: usize,
        num_hourglasses: usize,
    ) -> Result<Self> {
        let pre = PreHourglass::new(ps, rng, volume_channels, base)?;
        let mut hourglasses = Vec::new();
        for i in 0..num_hourglasses {
            hourglasses.push(Hourglass::new(ps, rng, &format!("hourglass{}", i + 1), base)?);
        }
        Ok(Aggregation { pre, hourglasses })
    }

    /// Runs the trunk. Hourglasses chain sequentially with no cross-module
    /// residual adds, so in infer mode the intermediate volumes exist only
    /// as trunk state and no auxiliary output is materialized.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        volume: TensorId,
        mode: RunMode,
        infer: bool,
    ) -> Result<AggregationOutputs> {
        let v0 = self.pre.forward(tape, ps, lv, volume, mode)?;
        let mut outs = vec![v0];
        let mut cur = v0;
        for hg in &self.hourglasses {
            cur = hg.forward(tape, ps, lv, cur, mode)?;
            outs.push(cur);
        }
        Ok(if infer {
            AggregationOutputs::Infer(cur)
        } else {
            AggregationOutputs::Train(outs)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hourglass_preserves_shape_and_is_nonnegative() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hg = Hourglass::new(&mut ps, &mut rng, "hg", 8).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 8 * 8 * 16 * 32).map(|_| drng.random_range(-1.0..1.0)).collect();
        let x = tape.leaf_f64(&[2, 8, 8, 16, 32], &data, false).unwrap();
        let y = hg
            .forward(&mut tape, &mut ps, &mut lv, x, RunMode::eval())
            .unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 8, 16, 32]);
        assert!(tape.value(y).iter().all(|&v| v >= 0.0), "final Add&ReLU");
    }

    #[test]
    fn hourglass_rejects_indivisible_extents() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hg = Hourglass::new(&mut ps, &mut rng, "hg", 4).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let x = tape
            .leaf(&[1, 4, 2, 8, 8], vec![0.0f32; 4 * 2 * 8 * 8], false)
            .unwrap();
        let err = hg
            .forward(&mut tape, &mut ps, &mut lv, x, RunMode::eval())
            .unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn pre_hourglass_zero_volume_zero_biases_gives_zero() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = PreHourglass::new(&mut ps, &mut rng, 16, 8).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let x = tape
            .leaf(&[1, 16, 4, 4, 8], vec![0.0f32; 16 * 4 * 4 * 8], false)
            .unwrap();
        // convs are bias-free and batch norm has beta = 0
        let y = pre
            .forward(&mut tape, &mut ps, &mut lv, x, RunMode::eval())
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 4, 4, 8]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shortcut_kernels_are_one_twenty_seventh_of_dense() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hg = Hourglass::new(&mut ps, &mut rng, "hg", 8).unwrap();
        for sc in hg.shortcut_convs() {
            let w = ps.slot(sc.conv().weight_id());
            let numel: usize = w.shape.iter().product();
            let dense = w.shape[0] * w.shape[1] * 27;
            assert_eq!(numel * 27, dense, "1x1x1 kernel is 1/27 of a 3x3x3 kernel");
        }
    }
}
