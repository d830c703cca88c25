//! Convolution geometry shared by the 2D, 3D and transposed-3D ops.

use crate::error::{Error, Result};

/// Fully resolved geometry of a (cross-correlation) convolution over up to
/// three spatial axes in `[N, C, D, H, W]` order. 2D convolutions use a
/// depth extent of 1 with a trivial kernel/stride on that axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dil: [usize; 3],
    pub out_dims: [usize; 3],
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil.checked_mul(k.checked_sub(1)?)?.checked_add(1)?;
    let padded = input.checked_add(2 * pad)?;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        batch: usize,
        c_in: usize,
        c_out: usize,
        in_dims: [usize; 3],
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        dil: [usize; 3],
    ) -> Result<Self> {
        if stride.iter().any(|&s| s == 0) || dil.iter().any(|&d| d == 0) {
            return Err(Error::shape(op, "stride and dilation must be positive"));
        }
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            out_dims[a] = out_extent(in_dims[a], k[a], stride[a], pad[a], dil[a]).ok_or_else(
                || {
                    Error::shape(
                        op,
                        format!(
                            "spatial axis {a}: input extent {} too small for kernel {} \
                             (stride {}, pad {}, dilation {})",
                            in_dims[a], k[a], stride[a], pad[a], dil[a]
                        ),
                    )
                },
            )?;
        }
        Ok(ConvGeom {
            batch,
            c_in,
            c_out,
            in_dims,
            k,
            stride,
            pad,
            dil,
            out_dims,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.in_dims[0] * self.in_dims[1] * self.in_dims[2]
    }

    pub fn out_plane(&self) -> usize {
        self.out_dims[0] * self.out_dims[1] * self.out_dims[2]
    }

    pub fn k_vol(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.c_in * self.in_plane()
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.out_plane()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k_vol()
    }
}

/// Range of output indices `o` for which `o*stride + off` lands in `[0, in_len)`.
/// Returns `(lo, hi)` with `lo <= hi <= o_len`; the range may be empty.
#[inline]
pub fn valid_out_range(o_len: usize, stride: usize, off: isize, in_len: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let top = in_len as isize - 1 - off;
    let hi = if top < 0 {
        0
    } else {
        (top as usize) / stride + 1
    };
    (lo.min(o_len), hi.min(o_len).max(lo.min(o_len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_matches_floor_formula() {
        // floor((H + 2p - d(k-1) - 1)/s) + 1
        let g = ConvGeom::new(
            "conv",
            1,
            1,
            1,
            [1, 8, 8],
            [1, 3, 3],
            [1, 2, 2],
            [0, 1, 1],
            [1, 1, 1],
        )
        .unwrap();
        assert_eq!(g.out_dims, [1, 4, 4]);

        let g = ConvGeom::new(
            "conv",
            1,
            1,
            1,
            [1, 9, 9],
            [1, 3, 3],
            [1, 1, 1],
            [0, 2, 2],
            [1, 2, 2],
        )
        .unwrap();
        // 9 + 4 - (2*2+1) = 8 -> 8/1 + 1 = 9 (dilated conv preserves extent)
        assert_eq!(g.out_dims, [1, 9, 9]);
    }

    #[test]
    fn kernel_larger_than_input_is_an_error() {
        let r = ConvGeom::new(
            "conv",
            1,
            1,
            1,
            [1, 2, 2],
            [1, 5, 5],
            [1, 1, 1],
            [0, 0, 0],
            [1, 1, 1],
        );
        assert!(r.is_err());
    }

    #[test]
    fn valid_range_clips_both_sides() {
        // o + (-2) in [0, 5) for o in [0, 8): o in [2, 7)
        assert_eq!(valid_out_range(8, 1, -2, 5), (2, 7));
        // fully out of range
        assert_eq!(valid_out_range(4, 1, 10, 5), (0, 0));
        // stride 2: 2o - 1 in [0, 6) -> o in [1, 4): ceil(1/2)=1, (5-(-1))/2+1=4
        assert_eq!(valid_out_range(8, 2, -1, 6), (1, 4));
    }
}
