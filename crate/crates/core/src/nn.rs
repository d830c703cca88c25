//! Layer building blocks: convolutions with He initialization and batch
//! norm with running statistics, composed the way the network tables
//! specify (conv+BN+ReLU, BN without ReLU on deconv/shortcut paths).

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{he_init, Leaves, ParamId, ParamStore, SlotKind};
use crate::tensor::{cast, Scalar, Tape, TensorId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode. `training` selects batch statistics in batch norm;
/// `update_stats` lets gradient checks run the training graph as a pure
/// function of its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    pub training: bool,
    pub update_stats: bool,
}

impl RunMode {
    pub fn train() -> Self {
        RunMode {
            training: true,
            update_stats: true,
        }
    }

    pub fn train_frozen() -> Self {
        RunMode {
            training: true,
            update_stats: false,
        }
    }

    pub fn eval() -> Self {
        RunMode {
            training: false,
            update_stats: false,
        }
    }
}

pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        let gamma = ps.add(
            format!("{name}.gamma"),
            vec![channels],
            vec![S::one(); channels],
            SlotKind::Trainable,
        )?;
        let beta = ps.add(
            format!("{name}.beta"),
            vec![channels],
            vec![S::zero(); channels],
            SlotKind::Trainable,
        )?;
        let running_mean = ps.add(
            format!("{name}.running_mean"),
            vec![channels],
            vec![S::zero(); channels],
            SlotKind::Buffer,
        )?;
        let running_var = ps.add(
            format!("{name}.running_var"),
            vec![channels],
            vec![S::one(); channels],
            SlotKind::Buffer,
        )?;
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let gamma = lv.get(tape, ps, self.gamma);
        let beta = lv.get(tape, ps, self.beta);
        if mode.training {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            if mode.update_stats {
                let m = cast::<S>(BN_MOMENTUM);
                let keep = S::one() - m;
                let rm = &mut ps.slot_mut(self.running_mean).data;
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = *r * keep + b * m;
                }
                let rv = &mut ps.slot_mut(self.running_var).data;
                for (r, &b) in rv.iter_mut().zip(&stats.var_unbiased) {
                    *r = *r * keep + b * m;
                }
            }
            Ok(y)
        } else {
            let rm = ps.slot(self.running_mean).data.clone();
            let rv = ps.slot(self.running_var).data.clone();
            tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: (usize, usize),
        pad: (usize, usize),
        dil: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = ps.add(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k],
            he_init(rng, c_out * fan_in, fan_in),
            SlotKind::Trainable,
        )?;
        let bias = if bias {
            Some(ps.add(
                format!("{name}.bias"),
                vec![c_out],
                vec![S::zero(); c_out],
                SlotKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
            dil,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = lv.get(tape, ps, self.weight);
        let b = self.bias.map(|p| lv.get(tape, ps, p));
        tape.conv2d(x, w, b, self.stride, self.pad, self.dil)
    }
}

pub struct Conv3d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k * k;
        let weight = ps.add(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k, k],
            he_init(rng, c_out * fan_in, fan_in),
            SlotKind::Trainable,
        )?;
        let bias = if bias {
            Some(ps.add(
                format!("{name}.bias"),
                vec![c_out],
                vec![S::zero(); c_out],
                SlotKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv3d {
            weight,
            bias,
            stride: (stride, stride, stride),
            pad: (pad, pad, pad),
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = lv.get(tape, ps, self.weight);
        let b = self.bias.map(|p| lv.get(tape, ps, p));
        tape.conv3d(x, w, b, self.stride, self.pad)
    }
}

pub struct Deconv3d {
    weight: ParamId,
    stride: usize,
    pad: usize,
    output_pad: usize,
}

impl Deconv3d {
    /// Stride-2 transposed convolution that exactly doubles each spatial
    /// extent (kernel 3, pad 1, output pad 1).
    pub fn doubling<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let k = 3;
        let fan_in = c_in * k * k * k;
        let weight = ps.add(
            format!("{name}.weight"),
            vec![c_in, c_out, k, k, k],
            he_init(rng, c_in * c_out * k * k * k, fan_in),
            SlotKind::Trainable,
        )?;
        Ok(Deconv3d {
            weight,
            stride: 2,
            pad: 1,
            output_pad: 1,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = lv.get(tape, ps, self.weight);
        tape.conv_transpose3d(x, w, None, self.stride, self.pad, self.output_pad)
    }
}

/// 2D convolution + batch norm, optionally followed by ReLU.
pub struct ConvBn2d {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: (usize, usize),
        dil: (usize, usize),
        relu: bool,
    ) -> Result<Self> {
        // padding preserves extent at stride 1: pad = dil * (k-1) / 2
        let pad = (dil.0 * (k - 1) / 2, dil.1 * (k - 1) / 2);
        Ok(ConvBn2d {
            conv: Conv2d::new(ps, rng, name, c_in, c_out, k, stride, pad, dil, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out)?,
            relu,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let y = self.conv.forward(tape, ps, lv, x)?;
        let y = self.bn.forward(tape, ps, lv, y, mode)?;
        Ok(if self.relu { tape.relu(y) } else { y })
    }
}

/// 3D convolution + batch norm, optionally followed by ReLU.
pub struct ConvBn3d {
    conv: Conv3d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvBn3d {
            conv: Conv3d::new(ps, rng, name, c_in, c_out, k, stride, (k - 1) / 2, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out)?,
            relu,
        })
    }

    pub fn conv(&self) -> &Conv3d {
        &self.conv
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let y = self.conv.forward(tape, ps, lv, x)?;
        let y = self.bn.forward(tape, ps, lv, y, mode)?;
        Ok(if self.relu { tape.relu(y) } else { y })
    }
}

/// Doubling transposed 3D convolution + batch norm, never ReLU.
pub struct DeconvBn3d {
    deconv: Deconv3d,
    bn: BatchNorm,
}

impl DeconvBn3d {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(DeconvBn3d {
            deconv: Deconv3d::doubling(ps, rng, name, c_in, c_out)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        x: TensorId,
        mode: RunMode,
    ) -> Result<TensorId> {
        let y = self.deconv.forward(tape, ps, lv, x)?;
        self.bn.forward(tape, ps, lv, y, mode)
    }
}
