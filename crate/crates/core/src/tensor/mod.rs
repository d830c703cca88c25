//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The graph is a tape: every operation appends a node holding its value,
//! its recorded inputs and whatever forward state the backward pass needs.
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients
//! additively, so a tensor consumed twice receives the sum of both
//! contributions.
//!
//! Scalars are generic: `f32` for training, `f64` for gradient and oracle
//! verification.

pub mod geom;
pub mod gradcheck;
mod backward;
mod kernels;

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};
use geom::ConvGeom;
pub use kernels::{dot4, sum4};

/// Scalar element type of a [`Tape`]. Implemented for `f32` and `f64`.
pub trait Scalar: Float + AddAssign + Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the tape's scalar type.
#[inline]
pub fn cast<S: Scalar>(x: f64) -> S {
    S::from(x).expect("f64 constant representable in scalar type")
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm, used by layers to
/// update their running estimates.
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var_unbiased: Vec<S>,
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the adjoint convolution whose
    /// input side is this op's output and whose output side is this op's input.
    Deconv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<S>,
        invstd: Vec<S>,
        train: bool,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    MulScalar {
        x: usize,
        k: S,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Upsample {
        x: usize,
        scale: usize,
    },
    PadHigh {
        x: usize,
    },
    CropHigh {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    CorrVolume {
        left: usize,
        right: usize,
        d_levels: usize,
    },
    GwcVolume {
        left: usize,
        right: usize,
        d_levels: usize,
        groups: usize,
    },
    ConcatVolume {
        left: usize,
        right: usize,
        d_levels: usize,
    },
    DispExpect {
        p: usize,
    },
    MaskedSmoothL1 {
        pred: usize,
        target: Vec<S>,
        mask: Vec<bool>,
        count: usize,
    },
    DotConst {
        x: usize,
        r: Vec<S>,
    },
}

/// Recorded computation graph over tensors of scalar type `S`.
pub struct Tape<S: Scalar> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<S>>,
    grads: Vec<Option<Vec<S>>>,
    ops: Vec<Op<S>>,
    needs: Vec<bool>,
    requires: Vec<bool>,
    labels: Vec<(String, usize)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            requires: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Attaches a name to a tensor so structural checks can look up the
    /// shapes of named intermediates after a forward pass.
    pub fn label(&mut self, name: impl Into<String>, id: TensorId) {
        self.labels.push((name.into(), id.0));
    }

    /// Shape of the most recent tensor labeled `name`.
    pub fn labeled_shape(&self, name: &str) -> Option<&[usize]> {
        self.labels
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, i)| self.shapes[*i].as_slice())
    }

    pub fn labels(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.labels
            .iter()
            .map(|(n, i)| (n.as_str(), self.shapes[*i].as_slice()))
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.values[id.0].len()
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` call, if this tensor was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires[id.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.shapes.push(shape);
        self.values.push(data);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        self.requires.push(false);
        TensorId(self.ops.len() - 1)
    }

    fn needs_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs[i])
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target for `backward`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        let id = self.push(shape.to_vec(), data, Op::Leaf, requires_grad);
        self.requires[id.0] = requires_grad;
        Ok(id)
    }

    pub fn leaf_f64(&mut self, shape: &[usize], data: &[f64], requires_grad: bool) -> Result<TensorId> {
        let conv: Vec<S> = data.iter().map(|&v| cast(v)).collect();
        self.leaf(shape, conv, requires_grad)
    }

    // ---- convolution family ------------------------------------------------

    /// 2D cross-correlation over `[N, C, H, W]`, weight `[Co, Ci, kH, kW]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize),
        pad: (usize, usize),
        dil: (usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be 4D, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be 4D, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "channel axis 1 mismatch: input has {} channels, weight expects {}",
                    xs[1], ws[1]
                ),
            ));
        }
        let geom = ConvGeom::new(
            "conv2d",
            xs[0],
            xs[1],
            ws[0],
            [1, xs[2], xs[3]],
            [1, ws[2], ws[3]],
            [1, stride.0, stride.1],
            [0, pad.0, pad.1],
            [1, dil.0, dil.1],
        )?;
        let out_shape = vec![xs[0], ws[0], geom.out_dims[1], geom.out_dims[2]];
        self.conv_common(x, w, b, geom, out_shape)
    }

    /// 3D cross-correlation over `[N, C, D, H, W]`, weight `[Co, Ci, kD, kH, kW]`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("conv3d", format!("input must be 5D, got {xs:?}")));
        }
        if ws.len() != 5 {
            return Err(Error::shape("conv3d", format!("weight must be 5D, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "channel axis 1 mismatch: input has {} channels, weight expects {}",
                    xs[1], ws[1]
                ),
            ));
        }
        let geom = ConvGeom::new(
            "conv3d",
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            [stride.0, stride.1, stride.2],
            [pad.0, pad.1, pad.2],
            [1, 1, 1],
        )?;
        let out_shape = vec![xs[0], ws[0], geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]];
        self.conv_common(x, w, b, geom, out_shape)
    }

    fn conv_common(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "bias must be [{}], got {:?}",
                        geom.c_out,
                        self.shape(b)
                    ),
                ));
            }
        }
        let mut out = vec![S::zero(); geom.out_len()];
        kernels::conv_forward(&self.values[x.0], &self.values[w.0], &mut out, &geom);
        if let Some(b) = b {
            kernels::add_bias(&mut out, &self.values[b.0], geom.batch, geom.c_out, geom.out_plane());
        }
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let needs = self.needs_any(&parents);
        Ok(self.push(
            out_shape,
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|t| t.0),
                geom,
            },
            needs,
        ))
    }

    /// Transposed 3D convolution. Input `[N, Ci, D, H, W]`, weight
    /// `[Ci, Co, kD, kH, kW]`. Output extent per axis is
    /// `(in - 1)*stride - 2*pad + k + output_pad`; with the stride-2
    /// configuration used here each spatial extent must come out exactly
    /// doubled, otherwise the parameters are rejected.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("input must be 5D, got {xs:?}"),
            ));
        }
        if ws.len() != 5 {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("weight must be 5D [Ci, Co, kD, kH, kW], got {ws:?}"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape(
                "conv_transpose3d",
                format!(
                    "channel axis 1 mismatch: input has {} channels, weight expects {}",
                    xs[1], ws[0]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose3d stride must be positive".into()));
        }
        let (c_in, c_out) = (ws[0], ws[1]);
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            let i = xs[2 + a];
            let k = ws[2 + a];
            let o = (i - 1) * stride + k + output_pad;
            if o < 2 * pad {
                return Err(Error::Config(format!(
                    "conv_transpose3d axis {a}: negative output extent"
                )));
            }
            out_dims[a] = o - 2 * pad;
            if stride == 2 && out_dims[a] != 2 * i {
                return Err(Error::Config(format!(
                    "conv_transpose3d axis {a}: stride-2 output extent {} is not exactly \
                     double the input extent {i}; use kernel 3, pad 1, output_pad 1",
                    out_dims[a]
                )));
            }
        }
        // Adjoint convolution: maps the deconv *output* extents back to the
        // deconv *input* extents with the same weight buffer.
        let geom = ConvGeom::new(
            "conv_transpose3d",
            xs[0],
            c_out,
            c_in,
            out_dims,
            [ws[2], ws[3], ws[4]],
            [stride; 3],
            [pad; 3],
            [1, 1, 1],
        )?;
        if geom.out_dims != [xs[2], xs[3], xs[4]] {
            return Err(Error::Config(format!(
                "conv_transpose3d: inconsistent geometry, adjoint gives {:?} for input {:?}",
                geom.out_dims,
                &xs[2..]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!("bias must be [{c_out}], got {:?}", self.shape(b)),
                ));
            }
        }
        let out_plane = out_dims[0] * out_dims[1] * out_dims[2];
        let mut out = vec![S::zero(); xs[0] * c_out * out_plane];
        kernels::conv_backward_input(&self.values[x.0], &self.values[w.0], &mut out, &geom);
        if let Some(b) = b {
            kernels::add_bias(&mut out, &self.values[b.0], xs[0], c_out, out_plane);
        }
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let needs = self.needs_any(&parents);
        Ok(self.push(
            vec![xs[0], c_out, out_dims[0], out_dims[1], out_dims[2]],
            out,
            Op::Deconv {
                x: x.0,
                w: w.0,
                b: b.map(|t| t.0),
                geom,
            },
            needs,
        ))
    }

    // ---- normalization / activations ----------------------------------------

    fn bn_check(&self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<usize> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape("batchnorm", format!("input must be at least 2D, got {xs:?}")));
        }
        let c = xs[1];
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(t) != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} must be [{c}] to match channel axis 1, got {:?}", self.shape(t)),
                ));
            }
        }
        Ok(c)
    }

    /// Train-mode batch norm over channel axis 1: normalizes by batch
    /// statistics and returns them so callers can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BnStats<S>)> {
        let c = self.bn_check(x, gamma, beta)?;
        let xs = self.shape(x).to_vec();
        let plane: usize = xs[2..].iter().product();
        let n = xs[0];
        let m = n * plane;
        let xv = &self.values[x.0];
        let inv_m = cast::<S>(1.0 / m as f64);

        let mut mean = vec![S::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] = mean[ci] + sum4(&xv[(ni * c + ci) * plane..][..plane]);
            }
        }
        for v in mean.iter_mut() {
            *v = *v * inv_m;
        }
        let mut var = vec![S::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                let row = &xv[(ni * c + ci) * plane..][..plane];
                let mut acc = S::zero();
                for &v in row {
                    let d = v - mu;
                    acc = acc + d * d;
                }
                var[ci] = var[ci] + acc;
            }
        }
        for v in var.iter_mut() {
            *v = *v * inv_m;
        }
        let invstd: Vec<S> = var.iter().map(|&v| (v + cast::<S>(eps)).sqrt().recip()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &invstd);
        let needs = self.needs_any(&[x.0, gamma.0, beta.0]);
        let var_unbiased: Vec<S> = if m > 1 {
            let f = cast::<S>(m as f64 / (m as f64 - 1.0));
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let id = self.push(
            xs,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                invstd,
                train: true,
            },
            needs,
        );
        Ok((id, BnStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm: normalizes with the provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<TensorId> {
        let c = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "running stats must have {c} channels, got {}/{}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let xs = self.shape(x).to_vec();
        let invstd: Vec<S> = running_var
            .iter()
            .map(|&v| (v + cast::<S>(eps)).sqrt().recip())
            .collect();
        let mean = running_mean.to_vec();
        let out = self.bn_apply(x, gamma, beta, &mean, &invstd);
        let needs = self.needs_any(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                invstd,
                train: false,
            },
            needs,
        ))
    }

    fn bn_apply(&self, x: TensorId, gamma: TensorId, beta: TensorId, mean: &[S], invstd: &[S]) -> Vec<S> {
        let xs = self.shape(x);
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        let xv = &self.values[x.0];
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        let mut out = vec![S::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let scale = gv[ci] * invstd[ci];
                let shift = bv[ci] - mean[ci] * scale;
                let src = &xv[(ni * c + ci) * plane..][..plane];
                let dst = &mut out[(ni * c + ci) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * scale + shift;
                }
            }
        }
        out
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<S> = self.values[x.0]
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let needs = self.needs[x.0];
        self.push(self.shapes[x.0].clone(), out, Op::Relu { x: x.0 }, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<S> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs_any(&[a.0, b.0]);
        Ok(self.push(self.shapes[a.0].clone(), out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn mul_scalar(&mut self, x: TensorId, k: S) -> TensorId {
        let out: Vec<S> = self.values[x.0].iter().map(|&v| v * k).collect();
        let needs = self.needs[x.0];
        self.push(self.shapes[x.0].clone(), out, Op::MulScalar { x: x.0, k }, needs)
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0usize;
        for &t in xs {
            let s = self.shape(t);
            if s.len() != first.len() {
                return Err(Error::shape("concat", format!("rank mismatch: {first:?} vs {s:?}")));
            }
            for (a, (&x, &y)) in first.iter().zip(s).enumerate() {
                if a != axis && x != y {
                    return Err(Error::shape(
                        "concat",
                        format!("axis {a} mismatch: {x} vs {y}"),
                    ));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let total_inner = axis_total * tail;
        let mut out = vec![S::zero(); outer * total_inner];
        let mut offset = 0usize;
        for &t in xs {
            let inner = self.shape(t)[axis] * tail;
            let src = &self.values[t.0];
            for o in 0..outer {
                out[o * total_inner + offset..o * total_inner + offset + inner]
                    .copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
            offset += inner;
        }
        let ids: Vec<usize> = xs.iter().map(|t| t.0).collect();
        let needs = self.needs_any(&ids);
        Ok(self.push(out_shape, out, Op::Concat { xs: ids, axis }, needs))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for rank {}", xs.len()),
            ));
        }
        let (outer, k, inner) = split_axis(&xs, axis);
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); xv.len()];
        let mut maxbuf = vec![S::neg_infinity(); inner];
        let mut sumbuf = vec![S::zero(); inner];
        for o in 0..outer {
            let base = o * k * inner;
            maxbuf.iter_mut().for_each(|v| *v = S::neg_infinity());
            sumbuf.iter_mut().for_each(|v| *v = S::zero());
            for j in 0..k {
                let row = &xv[base + j * inner..][..inner];
                for (m, &v) in maxbuf.iter_mut().zip(row) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
            for j in 0..k {
                let row = &xv[base + j * inner..][..inner];
                let dst = &mut out[base + j * inner..][..inner];
                for ((d, &v), (&m, s)) in dst.iter_mut().zip(row).zip(maxbuf.iter().zip(sumbuf.iter_mut())) {
                    let e = (v - m).exp();
                    *d = e;
                    *s = *s + e;
                }
            }
            for j in 0..k {
                let dst = &mut out[base + j * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(sumbuf.iter()) {
                    *d = *d / s;
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(xs, out, Op::Softmax { x: x.0, axis }, needs))
    }

    /// Trilinear upsampling of `[N, C, D, H, W]` by an integer factor with
    /// half-pixel-center (align-corners = false) sampling.
    pub fn upsample_trilinear(&mut self, x: TensorId, scale: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape(
                "upsample_trilinear",
                format!("input must be 5D, got {xs:?}"),
            ));
        }
        if scale == 0 {
            return Err(Error::invalid("upsample scale must be a positive integer"));
        }
        let (n, c) = (xs[0], xs[1]);
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d * scale, h * scale, w * scale);
        let td = lerp_table::<S>(od, d, scale);
        let th = lerp_table::<S>(oh, h, scale);
        let tw = lerp_table::<S>(ow, w, scale);
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..][..d * h * w];
            let dst = &mut out[nc * od * oh * ow..][..od * oh * ow];
            for (zo, &(z0, z1, fz)) in td.iter().enumerate() {
                for (yo, &(y0, y1, fy)) in th.iter().enumerate() {
                    let p00 = &src[(z0 * h + y0) * w..][..w];
                    let p01 = &src[(z0 * h + y1) * w..][..w];
                    let p10 = &src[(z1 * h + y0) * w..][..w];
                    let p11 = &src[(z1 * h + y1) * w..][..w];
                    let row = &mut dst[(zo * oh + yo) * ow..][..ow];
                    let one = S::one();
                    for (xo, &(x0, x1, fx)) in tw.iter().enumerate() {
                        let c00 = p00[x0] + (p00[x1] - p00[x0]) * fx;
                        let c01 = p01[x0] + (p01[x1] - p01[x0]) * fx;
                        let c10 = p10[x0] + (p10[x1] - p10[x0]) * fx;
                        let c11 = p11[x0] + (p11[x1] - p11[x0]) * fx;
                        let c0 = c00 * (one - fy) + c01 * fy;
                        let c1 = c10 * (one - fy) + c11 * fy;
                        row[xo] = c0 * (one - fz) + c1 * fz;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(
            vec![n, c, od, oh, ow],
            out,
            Op::Upsample { x: x.0, scale },
            needs,
        ))
    }

    /// Zero-pads the D/H/W axes of a 5D tensor on the high side.
    pub fn zero_pad_high(&mut self, x: TensorId, pad: [usize; 3]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("zero_pad_high", format!("input must be 5D, got {xs:?}")));
        }
        let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d + pad[0], h + pad[1], w + pad[2]);
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            for zd in 0..d {
                for zh in 0..h {
                    let src = &xv[((nc * d + zd) * h + zh) * w..][..w];
                    let dst = &mut out[((nc * od + zd) * oh + zh) * ow..][..w];
                    dst.copy_from_slice(src);
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(vec![n, c, od, oh, ow], out, Op::PadHigh { x: x.0 }, needs))
    }

    /// Keeps the leading `take` extents of the D/H/W axes of a 5D tensor.
    pub fn crop_high(&mut self, x: TensorId, take: [usize; 3]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("crop_high", format!("input must be 5D, got {xs:?}")));
        }
        let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let [td, th, tw] = take;
        if td > d || th > h || tw > w {
            return Err(Error::shape(
                "crop_high",
                format!("cannot take {take:?} from spatial extents {:?}", &xs[2..]),
            ));
        }
        let xv = &self.values[x.0];
        let mut out = vec![S::zero(); n * c * td * th * tw];
        for nc in 0..n * c {
            for zd in 0..td {
                for zh in 0..th {
                    let src = &xv[((nc * d + zd) * h + zh) * w..][..tw];
                    let dst = &mut out[((nc * td + zd) * th + zh) * tw..][..tw];
                    dst.copy_from_slice(src);
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(vec![n, c, td, th, tw], out, Op::CropHigh { x: x.0 }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.values[x.0].clone();
        let needs = self.needs[x.0];
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x: x.0 }, needs))
    }

    // ---- cost volumes --------------------------------------------------------

    fn volume_check(
        &self,
        op: &'static str,
        left: TensorId,
        right: TensorId,
        d_levels: usize,
    ) -> Result<[usize; 4]> {
        let ls = self.shape(left);
        let rs = self.shape(right);
        if ls.len() != 4 || rs.len() != 4 {
            return Err(Error::shape(op, format!("features must be 4D, got {ls:?} and {rs:?}")));
        }
        if ls != rs {
            return Err(Error::shape(op, format!("left {ls:?} vs right {rs:?}")));
        }
        if d_levels == 0 {
            return Err(Error::invalid(format!("{op}: d_levels must be at least 1")));
        }
        Ok([ls[0], ls[1], ls[2], ls[3]])
    }

    /// Full correlation volume: mean over channels of the inner product of
    /// left features and disparity-shifted right features. Output
    /// `[N, 1, d_levels, H, W]`; entries with `x - d < 0` are zero.
    pub fn corr_volume(&mut self, left: TensorId, right: TensorId, d_levels: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.volume_check("build_full_correlation_volume", left, right, d_levels)?;
        let lv = &self.values[left.0];
        let rv = &self.values[right.0];
        let mut out = vec![S::zero(); n * d_levels * h * w];
        for ni in 0..n {
            for d in 0..d_levels.min(w) {
                for ci in 0..c {
                    let base = ((ni * c + ci) * h) * w;
                    for y in 0..h {
                        let l_row = &lv[base + y * w..][..w];
                        let r_row = &rv[base + y * w..][..w];
                        let o_row = &mut out[((ni * d_levels + d) * h + y) * w..][..w];
                        for ((o, &a), &b) in
                            o_row[d..].iter_mut().zip(&l_row[d..]).zip(&r_row[..w - d])
                        {
                            *o = *o + a * b;
                        }
                    }
                }
            }
        }
        let scale = cast::<S>(1.0 / c as f64);
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        let needs = self.needs_any(&[left.0, right.0]);
        Ok(self.push(
            vec![n, 1, d_levels, h, w],
            out,
            Op::CorrVolume {
                left: left.0,
                right: right.0,
                d_levels,
            },
            needs,
        ))
    }

    /// Group-wise correlation volume: features are split into `groups` along
    /// the channel axis and correlated group by group. Output
    /// `[N, groups, d_levels, H, W]`.
    pub fn gwc_volume(
        &mut self,
        left: TensorId,
        right: TensorId,
        d_levels: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let [n, c, h, w] = self.volume_check("build_gwc_volume", left, right, d_levels)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "build_gwc_volume: feature channels Nc={c} not divisible into Ng={groups} groups"
            )));
        }
        let cpg = c / groups;
        let lv = &self.values[left.0];
        let rv = &self.values[right.0];
        let mut out = vec![S::zero(); n * groups * d_levels * h * w];
        for ni in 0..n {
            for g in 0..groups {
                for d in 0..d_levels.min(w) {
                    for cg in 0..cpg {
                        let ci = g * cpg + cg;
                        let base = ((ni * c + ci) * h) * w;
                        for y in 0..h {
                            let l_row = &lv[base + y * w..][..w];
                            let r_row = &rv[base + y * w..][..w];
                            let o_row = &mut out
                                [(((ni * groups + g) * d_levels + d) * h + y) * w..][..w];
                            for ((o, &a), &b) in
                                o_row[d..].iter_mut().zip(&l_row[d..]).zip(&r_row[..w - d])
                            {
                                *o = *o + a * b;
                            }
                        }
                    }
                }
            }
        }
        let scale = cast::<S>(1.0 / cpg as f64);
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        let needs = self.needs_any(&[left.0, right.0]);
        Ok(self.push(
            vec![n, groups, d_levels, h, w],
            out,
            Op::GwcVolume {
                left: left.0,
                right: right.0,
                d_levels,
                groups,
            },
            needs,
        ))
    }

    /// Concatenation volume: stacks left features and disparity-shifted right
    /// features along the channel axis. Output `[N, 2C, d_levels, H, W]`;
    /// the right half is zero where `x - d < 0`.
    pub fn concat_volume(
        &mut self,
        left: TensorId,
        right: TensorId,
        d_levels: usize,
    ) -> Result<TensorId> {
        let [n, c, h, w] = self.volume_check("build_concat_volume", left, right, d_levels)?;
        let lv = &self.values[left.0];
        let rv = &self.values[right.0];
        let c2 = 2 * c;
        let mut out = vec![S::zero(); n * c2 * d_levels * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let base = ((ni * c + ci) * h) * w;
                for d in 0..d_levels {
                    for y in 0..h {
                        let l_row = &lv[base + y * w..][..w];
                        let o_l = &mut out[(((ni * c2 + ci) * d_levels + d) * h + y) * w..][..w];
                        o_l.copy_from_slice(l_row);
                    }
                    if d < w {
                        for y in 0..h {
                            let r_row = &rv[base + y * w..][..w];
                            let o_r = &mut out
                                [(((ni * c2 + c + ci) * d_levels + d) * h + y) * w..][..w];
                            o_r[d..].copy_from_slice(&r_row[..w - d]);
                        }
                    }
                }
            }
        }
        let needs = self.needs_any(&[left.0, right.0]);
        Ok(self.push(
            vec![n, c2, d_levels, h, w],
            out,
            Op::ConcatVolume {
                left: left.0,
                right: right.0,
                d_levels,
            },
            needs,
        ))
    }

    /// Expectation over the disparity axis of a probability volume
    /// `[N, D, H, W]`: `sum_k k * p_k` per pixel. Output `[N, H, W]`.
    pub fn disparity_expectation(&mut self, p: TensorId) -> Result<TensorId> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 4 {
            return Err(Error::shape(
                "soft_argmin",
                format!("probability volume must be 4D [N, D, H, W], got {ps:?}"),
            ));
        }
        let (n, d, h, w) = (ps[0], ps[1], ps[2], ps[3]);
        let pv = &self.values[p.0];
        let mut out = vec![S::zero(); n * h * w];
        for ni in 0..n {
            for k in 0..d {
                let kf = cast::<S>(k as f64);
                let src = &pv[(ni * d + k) * h * w..][..h * w];
                let dst = &mut out[ni * h * w..][..h * w];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + kf * v;
                }
            }
        }
        let needs = self.needs[p.0];
        Ok(self.push(vec![n, h, w], out, Op::DispExpect { p: p.0 }, needs))
    }

    /// Mean smooth-L1 loss of `pred - target` over masked-in elements.
    /// Returns a scalar tensor. Errors if the mask selects nothing.
    pub fn masked_smooth_l1(
        &mut self,
        pred: TensorId,
        target: &[S],
        mask: &[bool],
    ) -> Result<TensorId> {
        let numel = self.numel(pred);
        if target.len() != numel || mask.len() != numel {
            return Err(Error::shape(
                "smooth_l1",
                format!(
                    "prediction has {numel} elements, target {} and mask {}",
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid(
                "smooth_l1: zero valid pixels in target mask",
            ));
        }
        let pv = &self.values[pred.0];
        let half = cast::<S>(0.5);
        let one = S::one();
        let mut acc = S::zero();
        for i in 0..numel {
            if mask[i] {
                let d = pv[i] - target[i];
                let a = d.abs();
                acc = acc + if a < one { half * d * d } else { a - half };
            }
        }
        let loss = acc / cast::<S>(count as f64);
        let needs = self.needs[pred.0];
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MaskedSmoothL1 {
                pred: pred.0,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Fixed linear functional `sum_i r_i * x_i`, returning a scalar.
    /// Used by gradient checks to reduce arbitrary outputs to a loss.
    pub fn dot_const(&mut self, x: TensorId, r: &[S]) -> Result<TensorId> {
        if r.len() != self.numel(x) {
            return Err(Error::shape(
                "dot_const",
                format!("{} coefficients for {} elements", r.len(), self.numel(x)),
            ));
        }
        let v = dot4(&self.values[x.0], r);
        let needs = self.needs[x.0];
        Ok(self.push(
            vec![1],
            vec![v],
            Op::DotConst {
                x: x.0,
                r: r.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively into every reachable tensor whose subgraph contains a
    /// `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs[loss.0] {
            return Ok(());
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] = g[0] + S::one(),
            slot => *slot = Some(vec![S::one()]),
        }
        for i in (0..=loss.0).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            backward::backprop_node(i, &self.ops, &self.shapes, &self.values, &self.needs, &mut self.grads);
        }
        Ok(())
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interpolation table for one axis of align-corners=false upsampling:
/// for each output index, the two source indices and the blend factor.
pub(crate) fn lerp_table<S: Scalar>(out_len: usize, in_len: usize, scale: usize) -> Vec<(usize, usize, S)> {
    let mut t = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f64 + 0.5) / scale as f64 - 0.5;
        let i0 = src.floor();
        let f = src - i0;
        let lo = (i0.max(0.0) as usize).min(in_len - 1);
        let hi = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
        t.push((lo, hi, cast::<S>(f)));
    }
    t
}
