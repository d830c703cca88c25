//! Reverse-mode dispatch: one function per recorded op, accumulating into
//! parent gradients. Gradient buffers are taken out of the tape slot being
//! processed, so peak memory falls as the sweep walks backwards.

use super::kernels;
use super::{cast, lerp_table, split_axis, Op, Scalar};

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], id: usize, numel: usize) -> &'a mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); numel])
}

pub(crate) fn backprop_node<S: Scalar>(
    i: usize,
    ops: &[Op<S>],
    shapes: &[Vec<usize>],
    values: &[Vec<S>],
    needs: &[bool],
    grads: &mut [Option<Vec<S>>],
) {
    if matches!(ops[i], Op::Leaf) {
        return;
    }
    let g = grads[i].take().expect("grad present for dispatched node");
    match &ops[i] {
        Op::Leaf => unreachable!(),

        Op::Conv { x, w, b, geom } => {
            if needs[*x] {
                let dx = slot(grads, *x, values[*x].len());
                kernels::conv_backward_input(&g, &values[*w], dx, geom);
            }
            if needs[*w] {
                let dw = slot(grads, *w, values[*w].len());
                kernels::conv_backward_weight(&values[*x], &g, dw, geom);
            }
            if let Some(b) = b {
                if needs[*b] {
                    let db = slot(grads, *b, values[*b].len());
                    kernels::bias_backward(&g, db, geom.batch, geom.c_out, geom.out_plane());
                }
            }
        }

        // `geom` is the adjoint convolution: its input side is this op's
        // output, its output side is this op's input.
        Op::Deconv { x, w, b, geom } => {
            if needs[*x] {
                let dx = slot(grads, *x, values[*x].len());
                kernels::conv_forward(&g, &values[*w], dx, geom);
            }
            if needs[*w] {
                let dw = slot(grads, *w, values[*w].len());
                kernels::conv_backward_weight(&g, &values[*x], dw, geom);
            }
            if let Some(b) = b {
                if needs[*b] {
                    let db = slot(grads, *b, values[*b].len());
                    kernels::bias_backward(&g, db, geom.batch, geom.c_in, geom.in_plane());
                }
            }
        }

        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => {
            let shape = &shapes[i];
            let (n, c) = (shape[0], shape[1]);
            let plane: usize = shape[2..].iter().product();
            let xv = &values[*x];
            let gv = &values[*gamma];
            let m = cast::<S>((n * plane) as f64);

            let mut sum_g = vec![S::zero(); c];
            let mut sum_gxh = vec![S::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mu, is) = (mean[ci], invstd[ci]);
                    let mut a0 = S::zero();
                    let mut a1 = S::zero();
                    for j in 0..plane {
                        let gj = g[base + j];
                        a0 = a0 + gj;
                        a1 = a1 + gj * (xv[base + j] - mu) * is;
                    }
                    sum_g[ci] = sum_g[ci] + a0;
                    sum_gxh[ci] = sum_gxh[ci] + a1;
                }
            }
            if needs[*gamma] {
                let dg = slot(grads, *gamma, c);
                for ci in 0..c {
                    dg[ci] = dg[ci] + sum_gxh[ci];
                }
            }
            if needs[*beta] {
                let db = slot(grads, *beta, c);
                for ci in 0..c {
                    db[ci] = db[ci] + sum_g[ci];
                }
            }
            if needs[*x] {
                let dx = slot(grads, *x, xv.len());
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (mean[ci], invstd[ci]);
                        let scale = gv[ci] * is;
                        if *train {
                            let mg = sum_g[ci] / m;
                            let mgxh = sum_gxh[ci] / m;
                            for j in 0..plane {
                                let xh = (xv[base + j] - mu) * is;
                                dx[base + j] =
                                    dx[base + j] + scale * (g[base + j] - mg - xh * mgxh);
                            }
                        } else {
                            for j in 0..plane {
                                dx[base + j] = dx[base + j] + scale * g[base + j];
                            }
                        }
                    }
                }
            }
        }

        Op::Relu { x } => {
            if needs[*x] {
                let xv = &values[*x];
                let dx = slot(grads, *x, xv.len());
                for j in 0..xv.len() {
                    if xv[j] > S::zero() {
                        dx[j] = dx[j] + g[j];
                    }
                }
            }
        }

        Op::Add { a, b } => {
            for p in [*a, *b] {
                if needs[p] {
                    let dp = slot(grads, p, g.len());
                    for (d, &gv) in dp.iter_mut().zip(&g) {
                        *d = *d + gv;
                    }
                }
            }
        }

        Op::Concat { xs, axis } => {
            let shape = &shapes[i];
            let (outer, _, tail) = split_axis(shape, *axis);
            let total_inner = shape[*axis] * tail;
            let mut offset = 0usize;
            for &p in xs {
                let inner = shapes[p][*axis] * tail;
                if needs[p] {
                    let dp = slot(grads, p, values[p].len());
                    for o in 0..outer {
                        let src = &g[o * total_inner + offset..][..inner];
                        let dst = &mut dp[o * inner..][..inner];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                }
                offset += inner;
            }
        }

        Op::MulScalar { x, k } => {
            if needs[*x] {
                let k = *k;
                let dx = slot(grads, *x, g.len());
                for (d, &gv) in dx.iter_mut().zip(&g) {
                    *d = *d + k * gv;
                }
            }
        }

        Op::Softmax { x, axis } => {
            if needs[*x] {
                let shape = &shapes[i];
                let (outer, k, inner) = split_axis(shape, *axis);
                let s = &values[i];
                let dx = slot(grads, *x, s.len());
                let mut dot = vec![S::zero(); inner];
                for o in 0..outer {
                    let base = o * k * inner;
                    dot.iter_mut().for_each(|v| *v = S::zero());
                    for j in 0..k {
                        let row_s = &s[base + j * inner..][..inner];
                        let row_g = &g[base + j * inner..][..inner];
                        for ((d, &sv), &gv) in dot.iter_mut().zip(row_s).zip(row_g) {
                            *d = *d + sv * gv;
                        }
                    }
                    for j in 0..k {
                        let row_s = &s[base + j * inner..][..inner];
                        let row_g = &g[base + j * inner..][..inner];
                        let row_dx = &mut dx[base + j * inner..][..inner];
                        for (((d, &sv), &gv), &dt) in
                            row_dx.iter_mut().zip(row_s).zip(row_g).zip(dot.iter())
                        {
                            *d = *d + sv * (gv - dt);
                        }
                    }
                }
            }
        }

        Op::Upsample { x, scale } => {
            if needs[*x] {
                let xs = &shapes[*x];
                let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let (od, oh, ow) = (d * scale, h * scale, w * scale);
                let td = lerp_table::<S>(od, d, *scale);
                let th = lerp_table::<S>(oh, h, *scale);
                let tw = lerp_table::<S>(ow, w, *scale);
                let dx = slot(grads, *x, values[*x].len());
                let one = S::one();
                for nc in 0..n * c {
                    let src = &g[nc * od * oh * ow..][..od * oh * ow];
                    let dst = &mut dx[nc * d * h * w..][..d * h * w];
                    for (zo, &(z0, z1, fz)) in td.iter().enumerate() {
                        for (yo, &(y0, y1, fy)) in th.iter().enumerate() {
                            let row = &src[(zo * oh + yo) * ow..][..ow];
                            for (xo, &(x0, x1, fx)) in tw.iter().enumerate() {
                                let gv = row[xo];
                                let g0 = gv * (one - fz);
                                let g1 = gv * fz;
                                let g00 = g0 * (one - fy);
                                let g01 = g0 * fy;
                                let g10 = g1 * (one - fy);
                                let g11 = g1 * fy;
                                let fx1 = one - fx;
                                dst[(z0 * h + y0) * w + x0] += g00 * fx1;
                                dst[(z0 * h + y0) * w + x1] += g00 * fx;
                                dst[(z0 * h + y1) * w + x0] += g01 * fx1;
                                dst[(z0 * h + y1) * w + x1] += g01 * fx;
                                dst[(z1 * h + y0) * w + x0] += g10 * fx1;
                                dst[(z1 * h + y0) * w + x1] += g10 * fx;
                                dst[(z1 * h + y1) * w + x0] += g11 * fx1;
                                dst[(z1 * h + y1) * w + x1] += g11 * fx;
                            }
                        }
                    }
                }
            }
        }

        Op::PadHigh { x } => {
            if needs[*x] {
                let xs = &shapes[*x];
                let os = &shapes[i];
                let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let (od, oh, ow) = (os[2], os[3], os[4]);
                let dx = slot(grads, *x, values[*x].len());
                for nc in 0..n * c {
                    for zd in 0..d {
                        for zh in 0..h {
                            let src = &g[((nc * od + zd) * oh + zh) * ow..][..w];
                            let dst = &mut dx[((nc * d + zd) * h + zh) * w..][..w];
                            for (dv, &gv) in dst.iter_mut().zip(src) {
                                *dv = *dv + gv;
                            }
                        }
                    }
                }
            }
        }

        Op::CropHigh { x } => {
            if needs[*x] {
                let xs = &shapes[*x];
                let os = &shapes[i];
                let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let (td, th, tw) = (os[2], os[3], os[4]);
                let dx = slot(grads, *x, values[*x].len());
                for nc in 0..n * c {
                    for zd in 0..td {
                        for zh in 0..th {
                            let src = &g[((nc * td + zd) * th + zh) * tw..][..tw];
                            let dst = &mut dx[((nc * d + zd) * h + zh) * w..][..tw];
                            for (dv, &gv) in dst.iter_mut().zip(src) {
                                *dv = *dv + gv;
                            }
                        }
                    }
                }
            }
        }

        Op::Reshape { x } => {
            if needs[*x] {
                let dx = slot(grads, *x, g.len());
                for (d, &gv) in dx.iter_mut().zip(&g) {
                    *d = *d + gv;
                }
            }
        }

        Op::CorrVolume {
            left,
            right,
            d_levels,
        } => {
            let ls = &shapes[*left];
            let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
            let scale = cast::<S>(1.0 / c as f64);
            corr_volume_backward(
                &g, values, needs, grads, *left, *right, n, c, h, w, *d_levels, 1, scale,
            );
        }

        Op::GwcVolume {
            left,
            right,
            d_levels,
            groups,
        } => {
            let ls = &shapes[*left];
            let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
            let cpg = c / groups;
            let scale = cast::<S>(1.0 / cpg as f64);
            corr_volume_backward(
                &g, values, needs, grads, *left, *right, n, c, h, w, *d_levels, *groups, scale,
            );
        }

        Op::ConcatVolume {
            left,
            right,
            d_levels,
        } => {
            let ls = &shapes[*left];
            let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
            let c2 = 2 * c;
            let dl = *d_levels;
            if needs[*left] {
                let dlft = slot(grads, *left, values[*left].len());
                for ni in 0..n {
                    for ci in 0..c {
                        for d in 0..dl {
                            for y in 0..h {
                                let src = &g[(((ni * c2 + ci) * dl + d) * h + y) * w..][..w];
                                let dst = &mut dlft[((ni * c + ci) * h + y) * w..][..w];
                                for (dv, &gv) in dst.iter_mut().zip(src) {
                                    *dv = *dv + gv;
                                }
                            }
                        }
                    }
                }
            }
            if needs[*right] {
                let drgt = slot(grads, *right, values[*right].len());
                for ni in 0..n {
                    for ci in 0..c {
                        for d in 0..dl.min(w) {
                            for y in 0..h {
                                let src = &g[(((ni * c2 + c + ci) * dl + d) * h + y) * w..][..w];
                                let dst = &mut drgt[((ni * c + ci) * h + y) * w..][..w];
                                for (dv, &gv) in dst[..w - d].iter_mut().zip(&src[d..]) {
                                    *dv = *dv + gv;
                                }
                            }
                        }
                    }
                }
            }
        }

        Op::DispExpect { p } => {
            if needs[*p] {
                let ps = &shapes[*p];
                let (n, d, h, w) = (ps[0], ps[1], ps[2], ps[3]);
                let dp = slot(grads, *p, values[*p].len());
                for ni in 0..n {
                    let src = &g[ni * h * w..][..h * w];
                    for k in 0..d {
                        let kf = cast::<S>(k as f64);
                        let dst = &mut dp[(ni * d + k) * h * w..][..h * w];
                        for (dv, &gv) in dst.iter_mut().zip(src) {
                            *dv = *dv + kf * gv;
                        }
                    }
                }
            }
        }

        Op::MaskedSmoothL1 {
            pred,
            target,
            mask,
            count,
        } => {
            if needs[*pred] {
                let pv = &values[*pred];
                let factor = g[0] / cast::<S>(*count as f64);
                let one = S::one();
                let dp = slot(grads, *pred, pv.len());
                for j in 0..pv.len() {
                    if mask[j] {
                        let d = pv[j] - target[j];
                        let clamped = if d > one {
                            one
                        } else if d < -one {
                            -one
                        } else {
                            d
                        };
                        dp[j] = dp[j] + factor * clamped;
                    }
                }
            }
        }

        Op::DotConst { x, r } => {
            if needs[*x] {
                let g0 = g[0];
                let dx = slot(grads, *x, r.len());
                for (d, &rv) in dx.iter_mut().zip(r) {
                    *d = *d + g0 * rv;
                }
            }
        }
    }
}

/// Shared backward for the full- and group-wise correlation volumes.
/// The gradient tensor has layout `[N, groups, d_levels, H, W]`.
#[allow(clippy::too_many_arguments)]
fn corr_volume_backward<S: Scalar>(
    g: &[S],
    values: &[Vec<S>],
    needs: &[bool],
    grads: &mut [Option<Vec<S>>],
    left: usize,
    right: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d_levels: usize,
    groups: usize,
    scale: S,
) {
    let cpg = c / groups;
    if needs[left] {
        let rv = &values[right];
        let dlft = slot(grads, left, values[left].len());
        for ni in 0..n {
            for ci in 0..c {
                let gg = ci / cpg;
                let f_base = ((ni * c + ci) * h) * w;
                for d in 0..d_levels.min(w) {
                    for y in 0..h {
                        let g_row = &g[(((ni * groups + gg) * d_levels + d) * h + y) * w..][..w];
                        let r_row = &rv[f_base + y * w..][..w];
                        let dst = &mut dlft[f_base + y * w..][..w];
                        for ((dv, &gv), &bv) in
                            dst[d..].iter_mut().zip(&g_row[d..]).zip(&r_row[..w - d])
                        {
                            *dv = *dv + scale * gv * bv;
                        }
                    }
                }
            }
        }
    }
    if needs[right] {
        let lv = &values[left];
        let drgt = slot(grads, right, values[right].len());
        for ni in 0..n {
            for ci in 0..c {
                let gg = ci / cpg;
                let f_base = ((ni * c + ci) * h) * w;
                for d in 0..d_levels.min(w) {
                    for y in 0..h {
                        let g_row = &g[(((ni * groups + gg) * d_levels + d) * h + y) * w..][..w];
                        let l_row = &lv[f_base + y * w..][..w];
                        let dst = &mut drgt[f_base + y * w..][..w];
                        for ((dv, &gv), &av) in
                            dst[..w - d].iter_mut().zip(&g_row[d..]).zip(&l_row[d..])
                        {
                            *dv = *dv + scale * gv * av;
                        }
                    }
                }
            }
        }
    }
}
