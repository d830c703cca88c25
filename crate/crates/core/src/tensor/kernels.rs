//! Scalar compute kernels for the tape ops.
//!
//! All kernels accumulate into their output buffer so the backward pass can
//! sum contributions from multiple consumers. Loops are ordered so the
//! innermost axis walks contiguous memory whenever the width stride is 1,
//! which lets the compiler vectorize the hot paths. Reductions use a fixed
//! four-lane accumulation order so results are bit-for-bit reproducible.

use super::geom::{valid_out_range, ConvGeom};
use super::Scalar;

/// Dot product with a fixed 4-lane reduction order.
#[inline]
pub fn dot4<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut tail = S::zero();
    for j in chunks * 4..a.len() {
        tail = tail + a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sum with a fixed 4-lane reduction order.
#[inline]
pub fn sum4<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j];
        acc[1] = acc[1] + a[j + 1];
        acc[2] = acc[2] + a[j + 2];
        acc[3] = acc[3] + a[j + 3];
    }
    let mut tail = S::zero();
    for j in chunks * 4..a.len() {
        tail = tail + a[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dst[i] += k * src[i]`
#[inline]
fn axpy<S: Scalar>(k: S, src: &[S], dst: &mut [S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + k * *s;
    }
}

/// Forward convolution (cross-correlation): `out[n,co] += sum_ci x[n,ci] * w[co,ci]`.
pub fn conv_forward<S: Scalar>(x: &[S], w: &[S], out: &mut [S], g: &ConvGeom) {
    let [din, hin, win] = g.in_dims;
    let [dout, hout, wout] = g.out_dims;
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let k_vol = g.k_vol();
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let out_base = (n * g.c_out + co) * out_plane;
            for ci in 0..g.c_in {
                let x_base = (n * g.c_in + ci) * in_plane;
                let w_base = (co * g.c_in + ci) * k_vol;
                for zd in 0..g.k[0] {
                    let off_d = (zd * g.dil[0]) as isize - g.pad[0] as isize;
                    let (d_lo, d_hi) = valid_out_range(dout, g.stride[0], off_d, din);
                    for zh in 0..g.k[1] {
                        let off_h = (zh * g.dil[1]) as isize - g.pad[1] as isize;
                        let (h_lo, h_hi) = valid_out_range(hout, g.stride[1], off_h, hin);
                        for zw in 0..g.k[2] {
                            let wv = w[w_base + (zd * g.k[1] + zh) * g.k[2] + zw];
                            let off_w = (zw * g.dil[2]) as isize - g.pad[2] as isize;
                            let (w_lo, w_hi) = valid_out_range(wout, g.stride[2], off_w, win);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for od in d_lo..d_hi {
                                let id = (od * g.stride[0]) as isize + off_d;
                                for oh in h_lo..h_hi {
                                    let ih = (oh * g.stride[1]) as isize + off_h;
                                    let x_row = &x[x_base + (id as usize * hin + ih as usize) * win..]
                                        [..win];
                                    let out_row =
                                        &mut out[out_base + (od * hout + oh) * wout..][..wout];
                                    if g.stride[2] == 1 {
                                        let src0 = (w_lo as isize + off_w) as usize;
                                        axpy(
                                            wv,
                                            &x_row[src0..src0 + (w_hi - w_lo)],
                                            &mut out_row[w_lo..w_hi],
                                        );
                                    } else {
                                        for ow in w_lo..w_hi {
                                            let iw = (ow * g.stride[2]) as isize + off_w;
                                            out_row[ow] = out_row[ow] + wv * x_row[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv_forward` with respect to its input: scatters `dout`
/// back through the kernel. `dx[n,ci] += sum_co dout[n,co] * w[co,ci]`.
pub fn conv_backward_input<S: Scalar>(dout: &[S], w: &[S], dx: &mut [S], g: &ConvGeom) {
    let [din, hin, win] = g.in_dims;
    let [dout_d, hout, wout] = g.out_dims;
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let k_vol = g.k_vol();
    for n in 0..g.batch {
        for ci in 0..g.c_in {
            let dx_base = (n * g.c_in + ci) * in_plane;
            for co in 0..g.c_out {
                let g_base = (n * g.c_out + co) * out_plane;
                let w_base = (co * g.c_in + ci) * k_vol;
                for zd in 0..g.k[0] {
                    let off_d = (zd * g.dil[0]) as isize - g.pad[0] as isize;
                    let (d_lo, d_hi) = valid_out_range(dout_d, g.stride[0], off_d, din);
                    for zh in 0..g.k[1] {
                        let off_h = (zh * g.dil[1]) as isize - g.pad[1] as isize;
                        let (h_lo, h_hi) = valid_out_range(hout, g.stride[1], off_h, hin);
                        for zw in 0..g.k[2] {
                            let wv = w[w_base + (zd * g.k[1] + zh) * g.k[2] + zw];
                            let off_w = (zw * g.dil[2]) as isize - g.pad[2] as isize;
                            let (w_lo, w_hi) = valid_out_range(wout, g.stride[2], off_w, win);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for od in d_lo..d_hi {
                                let id = (od * g.stride[0]) as isize + off_d;
                                for oh in h_lo..h_hi {
                                    let ih = (oh * g.stride[1]) as isize + off_h;
                                    let dx_row = &mut dx
                                        [dx_base + (id as usize * hin + ih as usize) * win..]
                                        [..win];
                                    let g_row = &dout[g_base + (od * hout + oh) * wout..][..wout];
                                    if g.stride[2] == 1 {
                                        let dst0 = (w_lo as isize + off_w) as usize;
                                        axpy(
                                            wv,
                                            &g_row[w_lo..w_hi],
                                            &mut dx_row[dst0..dst0 + (w_hi - w_lo)],
                                        );
                                    } else {
                                        for ow in w_lo..w_hi {
                                            let iw = (ow * g.stride[2]) as isize + off_w;
                                            dx_row[iw as usize] =
                                                dx_row[iw as usize] + wv * g_row[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv_forward` with respect to the weights:
/// `dw[co,ci,z] += sum_n,out x[n,ci,in(z,out)] * dout[n,co,out]`.
pub fn conv_backward_weight<S: Scalar>(x: &[S], dout: &[S], dw: &mut [S], g: &ConvGeom) {
    let [din, hin, win] = g.in_dims;
    let [dout_d, hout, wout] = g.out_dims;
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let k_vol = g.k_vol();
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let w_base = (co * g.c_in + ci) * k_vol;
            for zd in 0..g.k[0] {
                let off_d = (zd * g.dil[0]) as isize - g.pad[0] as isize;
                let (d_lo, d_hi) = valid_out_range(dout_d, g.stride[0], off_d, din);
                for zh in 0..g.k[1] {
                    let off_h = (zh * g.dil[1]) as isize - g.pad[1] as isize;
                    let (h_lo, h_hi) = valid_out_range(hout, g.stride[1], off_h, hin);
                    for zw in 0..g.k[2] {
                        let off_w = (zw * g.dil[2]) as isize - g.pad[2] as isize;
                        let (w_lo, w_hi) = valid_out_range(wout, g.stride[2], off_w, win);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let mut acc = S::zero();
                        for n in 0..g.batch {
                            let x_base = (n * g.c_in + ci) * in_plane;
                            let g_base = (n * g.c_out + co) * out_plane;
                            for od in d_lo..d_hi {
                                let id = (od * g.stride[0]) as isize + off_d;
                                for oh in h_lo..h_hi {
                                    let ih = (oh * g.stride[1]) as isize + off_h;
                                    let x_row = &x
                                        [x_base + (id as usize * hin + ih as usize) * win..]
                                        [..win];
                                    let g_row = &dout[g_base + (od * hout + oh) * wout..][..wout];
                                    if g.stride[2] == 1 {
                                        let src0 = (w_lo as isize + off_w) as usize;
                                        acc = acc
                                            + dot4(
                                                &g_row[w_lo..w_hi],
                                                &x_row[src0..src0 + (w_hi - w_lo)],
                                            );
                                    } else {
                                        for ow in w_lo..w_hi {
                                            let iw = (ow * g.stride[2]) as isize + off_w;
                                            acc = acc + g_row[ow] * x_row[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                        dw[w_base + (zd * g.k[1] + zh) * g.k[2] + zw] =
                            dw[w_base + (zd * g.k[1] + zh) * g.k[2] + zw] + acc;
                    }
                }
            }
        }
    }
}

/// Adds one bias value per channel across `[N, C, plane]`.
pub fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], batch: usize, channels: usize, plane: usize) {
    for n in 0..batch {
        for c in 0..channels {
            let b = bias[c];
            let row = &mut out[(n * channels + c) * plane..][..plane];
            for v in row.iter_mut() {
                *v = *v + b;
            }
        }
    }
}

/// Accumulates the per-channel sum of `dout` into `db`.
pub fn bias_backward<S: Scalar>(dout: &[S], db: &mut [S], batch: usize, channels: usize, plane: usize) {
    for n in 0..batch {
        for c in 0..channels {
            let row = &dout[(n * channels + c) * plane..][..plane];
            db[c] = db[c] + sum4(row);
        }
    }
}
