//! Cost volume construction: full correlation, group-wise correlation,
//! channel concatenation and their combination, plus a brute-force oracle.
//!
//! All builders share one out-of-bounds rule: a right-feature lookup at
//! `x - d < 0` contributes zero (zero correlation, zero concat channels).
//! Disparity level `d` indexes quarter-resolution shifts; the mapping to
//! full-resolution pixels happens in the disparity head.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tensor::{cast, Scalar, Tape, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Corr,
    Gwc,
    Concat,
    Combined,
}

/// A `[N, C, Dq, Hq, Wq]` matching-cost volume on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    pub id: TensorId,
    pub kind: VolumeKind,
    pub channels: usize,
    pub d_levels: usize,
}

fn check_pair(f_l: &FeatureMap, f_r: &FeatureMap, op: &'static str) -> Result<()> {
    if f_l.channels != f_r.channels || f_l.height != f_r.height || f_l.width != f_r.width {
        return Err(Error::shape(
            op,
            format!(
                "left {}x{}x{} vs right {}x{}x{}",
                f_l.channels, f_l.height, f_l.width, f_r.channels, f_r.height, f_r.width
            ),
        ));
    }
    Ok(())
}

/// Single-channel full correlation: the channel-mean inner product of left
/// and shifted right features per disparity level.
pub fn build_full_correlation_volume<S: Scalar>(
    tape: &mut Tape<S>,
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    d_levels: usize,
) -> Result<CostVolume> {
    check_pair(f_l, f_r, "build_full_correlation_volume")?;
    let id = tape.corr_volume(f_l.id, f_r.id, d_levels)?;
    Ok(CostVolume {
        id,
        kind: VolumeKind::Corr,
        channels: 1,
        d_levels,
    })
}

/// Group-wise correlation: `Ng` per-group mean inner products per level.
pub fn build_gwc_volume<S: Scalar>(
    tape: &mut Tape<S>,
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    d_levels: usize,
    n_groups: usize,
) -> Result<CostVolume> {
    check_pair(f_l, f_r, "build_gwc_volume")?;
    let id = tape.gwc_volume(f_l.id, f_r.id, d_levels, n_groups)?;
    Ok(CostVolume {
        id,
        kind: VolumeKind::Gwc,
        channels: n_groups,
        d_levels,
    })
}

/// Concatenation volume: left features stacked on shifted right features.
pub fn build_concat_volume<S: Scalar>(
    tape: &mut Tape<S>,
    f_l_c: &FeatureMap,
    f_r_c: &FeatureMap,
    d_levels: usize,
) -> Result<CostVolume> {
    check_pair(f_l_c, f_r_c, "build_concat_volume")?;
    let id = tape.concat_volume(f_l_c.id, f_r_c.id, d_levels)?;
    Ok(CostVolume {
        id,
        kind: VolumeKind::Concat,
        channels: 2 * f_l_c.channels,
        d_levels,
    })
}

/// Channel concatenation of a group-wise and a concatenation volume,
/// group-wise channels first.
pub fn build_combined_volume<S: Scalar>(
    tape: &mut Tape<S>,
    gwc: &CostVolume,
    concat: &CostVolume,
) -> Result<CostVolume> {
    let gs = tape.shape(gwc.id).to_vec();
    let cs = tape.shape(concat.id).to_vec();
    if gs[0] != cs[0] || gs[2..] != cs[2..] {
        return Err(Error::shape(
            "build_combined_volume",
            format!("incompatible volume extents {gs:?} vs {cs:?}"),
        ));
    }
    let id = tape.concat(&[gwc.id, concat.id], 1)?;
    Ok(CostVolume {
        id,
        kind: VolumeKind::Combined,
        channels: gwc.channels + concat.channels,
        d_levels: gwc.d_levels,
    })
}

/// Brute-force reference for every builder: naive nested loops over
/// `(n, d or channel, y, x, group, channel)` with no vectorization and no
/// shared code with the builders. Features are `[N, C, H, W]` row-major.
pub fn oracle_volume<S: Scalar>(
    kind: VolumeKind,
    left: &[S],
    right: &[S],
    shape: [usize; 4],
    d_levels: usize,
    n_groups: usize,
) -> Result<Vec<S>> {
    let [n, c, h, w] = shape;
    if left.len() != n * c * h * w || right.len() != left.len() {
        return Err(Error::shape(
            "oracle_volume",
            format!("feature buffers do not match shape {shape:?}"),
        ));
    }
    if d_levels == 0 {
        return Err(Error::invalid("oracle_volume: d_levels must be at least 1"));
    }
    let at = |buf: &[S], ni: usize, ci: usize, y: usize, x: usize| buf[((ni * c + ci) * h + y) * w + x];
    match kind {
        VolumeKind::Corr | VolumeKind::Gwc => {
            let groups = if kind == VolumeKind::Corr { 1 } else { n_groups };
            if groups == 0 || c % groups != 0 {
                return Err(Error::invalid(format!(
                    "oracle_volume: Nc={c} not divisible into Ng={groups} groups"
                )));
            }
            let cpg = c / groups;
            let norm = cast::<S>(1.0 / cpg as f64);
            let mut out = vec![S::zero(); n * groups * d_levels * h * w];
            for ni in 0..n {
                for g in 0..groups {
                    for d in 0..d_levels {
                        for y in 0..h {
                            for x in 0..w {
                                let mut acc = S::zero();
                                if x >= d {
                                    for cg in 0..cpg {
                                        let ci = g * cpg + cg;
                                        acc = acc
                                            + at(left, ni, ci, y, x) * at(right, ni, ci, y, x - d);
                                    }
                                }
                                out[(((ni * groups + g) * d_levels + d) * h + y) * w + x] =
                                    acc * norm;
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        VolumeKind::Concat => {
            let c2 = 2 * c;
            let mut out = vec![S::zero(); n * c2 * d_levels * h * w];
            for ni in 0..n {
                for ci in 0..c2 {
                    for d in 0..d_levels {
                        for y in 0..h {
                            for x in 0..w {
                                let v = if ci < c {
                                    at(left, ni, ci, y, x)
                                } else if x >= d {
                                    at(right, ni, ci - c, y, x - d)
                                } else {
                                    S::zero()
                                };
                                out[(((ni * c2 + ci) * d_levels + d) * h + y) * w + x] = v;
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        VolumeKind::Combined => Err(Error::invalid(
            "oracle_volume: combined volumes are checked as gwc + concat slices",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feat<S: Scalar>(
        tape: &mut Tape<S>,
        data: Vec<f64>,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> FeatureMap {
        let id = tape.leaf_f64(&[n, c, h, w], &data, false).unwrap();
        FeatureMap {
            id,
            channels: c,
            height: h,
            width: w,
        }
    }

    fn rand_feat(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap {
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        feat(tape, data, n, c, h, w)
    }

    #[test]
    fn direct_evaluation_of_correlation_formulas() {
        // constant per-channel features: f_l = [1,2,3,4], f_r = [1,1,1,1]
        let mut tape = Tape::<f64>::new();
        let (h, w) = (2, 3);
        let mut ld = Vec::new();
        let mut rd = Vec::new();
        for ci in 0..4 {
            ld.extend(std::iter::repeat_n((ci + 1) as f64, h * w));
            rd.extend(std::iter::repeat_n(1.0, h * w));
        }
        let fl = feat(&mut tape, ld, 1, 4, h, w);
        let fr = feat(&mut tape, rd, 1, 4, h, w);

        let corr = build_full_correlation_volume(&mut tape, &fl, &fr, 1).unwrap();
        for v in tape.value(corr.id) {
            assert!((v - 2.5).abs() < 1e-12, "full correlation (1+2+3+4)/4");
        }

        let gwc = build_gwc_volume(&mut tape, &fl, &fr, 1, 2).unwrap();
        assert_eq!(gwc.channels, 2);
        let v = tape.value(gwc.id);
        for i in 0..h * w {
            assert!((v[i] - 1.5).abs() < 1e-12, "group 0: (1+2)/2");
            assert!((v[h * w + i] - 3.5).abs() < 1e-12, "group 1: (3+4)/2");
        }
    }

    #[test]
    fn self_correlation_at_zero_disparity_is_mean_square() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_feat(&mut tape, &mut rng, 1, 8, 3, 5);
        let corr = build_full_correlation_volume(&mut tape, &f, &f, 2).unwrap();
        let fv = tape.value(f.id).to_vec();
        let cv = tape.value(corr.id);
        for y in 0..3 {
            for x in 0..5 {
                let mut expect = 0.0;
                for c in 0..8 {
                    let v = fv[(c * 3 + y) * 5 + x];
                    expect += v * v;
                }
                expect /= 8.0;
                assert!((cv[y * 5 + x] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_bounds_cells_are_zero() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fl = rand_feat(&mut tape, &mut rng, 1, 4, 2, 6);
        let fr = rand_feat(&mut tape, &mut rng, 1, 4, 2, 6);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, 5, 2).unwrap();
        let v = tape.value(gwc.id);
        // layout [1, 2, 5, 2, 6]
        for g in 0..2 {
            for d in 0..5 {
                for y in 0..2 {
                    for x in 0..d.min(6) {
                        assert_eq!(v[((g * 5 + d) * 2 + y) * 6 + x], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_volume_structure() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fl = rand_feat(&mut tape, &mut rng, 1, 3, 2, 5);
        let fr = rand_feat(&mut tape, &mut rng, 1, 3, 2, 5);
        let vol = build_concat_volume(&mut tape, &fl, &fr, 3).unwrap();
        assert_eq!(vol.channels, 6);
        let v = tape.value(vol.id).to_vec();
        let lv = tape.value(fl.id).to_vec();
        let rv = tape.value(fr.id).to_vec();
        // d = 0 slice is the verbatim channel concat
        for ci in 0..3 {
            for p in 0..10 {
                assert_eq!(v[(ci * 3) * 10 + p], lv[ci * 10 + p]);
                assert_eq!(v[((3 + ci) * 3) * 10 + p], rv[ci * 10 + p]);
            }
        }
        // left half is identical across d
        for ci in 0..3 {
            for d in 1..3 {
                for p in 0..10 {
                    assert_eq!(v[(ci * 3 + d) * 10 + p], v[(ci * 3) * 10 + p]);
                }
            }
        }
    }

    #[test]
    fn combined_volume_slices_recover_inputs() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fl = rand_feat(&mut tape, &mut rng, 2, 8, 3, 4);
        let fr = rand_feat(&mut tape, &mut rng, 2, 8, 3, 4);
        let clf = rand_feat(&mut tape, &mut rng, 2, 4, 3, 4);
        let crf = rand_feat(&mut tape, &mut rng, 2, 4, 3, 4);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, 2, 8).unwrap();
        let cat = build_concat_volume(&mut tape, &clf, &crf, 2).unwrap();
        let comb = build_combined_volume(&mut tape, &gwc, &cat).unwrap();
        assert_eq!(comb.channels, 16);
        let plane = 2 * 3 * 4;
        let cv = tape.value(comb.id);
        let gv = tape.value(gwc.id);
        let ct = tape.value(cat.id);
        for n in 0..2 {
            let base = n * 16 * plane;
            assert_eq!(&cv[base..base + 8 * plane], &gv[n * 8 * plane..(n + 1) * 8 * plane]);
            assert_eq!(
                &cv[base + 8 * plane..base + 16 * plane],
                &ct[n * 8 * plane..(n + 1) * 8 * plane]
            );
        }
    }

    #[test]
    fn desk_scale_channel_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fl = rand_feat(&mut tape, &mut rng, 1, 32, 2, 8);
        let fr = rand_feat(&mut tape, &mut rng, 1, 32, 2, 8);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, 2, 8).unwrap();
        let cl = rand_feat(&mut tape, &mut rng, 1, 4, 2, 8);
        let cr = rand_feat(&mut tape, &mut rng, 1, 4, 2, 8);
        let cat = build_concat_volume(&mut tape, &cl, &cr, 2).unwrap();
        let comb = build_combined_volume(&mut tape, &gwc, &cat).unwrap();
        assert_eq!((gwc.channels, cat.channels, comb.channels), (8, 8, 16));
    }

    #[test]
    fn indivisible_groups_name_both_quantities() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fl = rand_feat(&mut tape, &mut rng, 1, 6, 2, 4);
        let fr = rand_feat(&mut tape, &mut rng, 1, 6, 2, 4);
        let err = build_gwc_volume(&mut tape, &fl, &fr, 2, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Nc=6") && msg.contains("Ng=4"), "{msg}");
    }

    #[test]
    fn builders_match_oracle_on_random_instances() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f64>::new();
            let (n, c, h, w) = (2, 8, 3, 6);
            let dl = 1 + (seed as usize % 5);
            let fl = rand_feat(&mut tape, &mut rng, n, c, h, w);
            let fr = rand_feat(&mut tape, &mut rng, n, c, h, w);
            let shape = [n, c, h, w];
            let lv = tape.value(fl.id).to_vec();
            let rv = tape.value(fr.id).to_vec();

            let corr = build_full_correlation_volume(&mut tape, &fl, &fr, dl).unwrap();
            let expect = oracle_volume(VolumeKind::Corr, &lv, &rv, shape, dl, 1).unwrap();
            for (a, b) in tape.value(corr.id).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }

            let gwc = build_gwc_volume(&mut tape, &fl, &fr, dl, 4).unwrap();
            let expect = oracle_volume(VolumeKind::Gwc, &lv, &rv, shape, dl, 4).unwrap();
            for (a, b) in tape.value(gwc.id).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }

            let cat = build_concat_volume(&mut tape, &fl, &fr, dl).unwrap();
            let expect = oracle_volume(VolumeKind::Concat, &lv, &rv, shape, dl, 1).unwrap();
            for (a, b) in tape.value(cat.id).iter().zip(&expect) {
                assert_eq!(*a, *b, "concat volume must match the oracle exactly");
            }
        }
    }

    #[test]
    fn zero_features_give_zero_correlations() {
        let mut tape = Tape::<f64>::new();
        let fl = feat(&mut tape, vec![0.0; 2 * 4 * 2 * 3], 2, 4, 2, 3);
        let fr = feat(&mut tape, vec![0.0; 2 * 4 * 2 * 3], 2, 4, 2, 3);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, 2, 2).unwrap();
        assert!(tape.value(gwc.id).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Within-group channel permutation of both features leaves the
        /// group-wise volume unchanged.
        #[test]
        fn within_group_permutation_invariance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w, groups) = (8usize, 2usize, 5usize, 2usize);
            let cpg = c / groups;
            let ld: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rd: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            // rotate channels within each group by one
            let permute = |data: &[f64]| -> Vec<f64> {
                let mut out = data.to_vec();
                for g in 0..groups {
                    for cg in 0..cpg {
                        let src = g * cpg + cg;
                        let dst = g * cpg + (cg + 1) % cpg;
                        out[dst * h * w..(dst + 1) * h * w]
                            .copy_from_slice(&data[src * h * w..(src + 1) * h * w]);
                    }
                }
                out
            };
            let mut tape = Tape::<f64>::new();
            let fl = feat(&mut tape, ld.clone(), 1, c, h, w);
            let fr = feat(&mut tape, rd.clone(), 1, c, h, w);
            let v1 = build_gwc_volume(&mut tape, &fl, &fr, 3, groups).unwrap();
            let flp = feat(&mut tape, permute(&ld), 1, c, h, w);
            let frp = feat(&mut tape, permute(&rd), 1, c, h, w);
            let v2 = build_gwc_volume(&mut tape, &flp, &frp, 3, groups).unwrap();
            for (a, b) in tape.value(v1.id).iter().zip(tape.value(v2.id)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// Scaling both features by a scales correlations by a^2; scaling
        /// only the left by a scales them by a.
        #[test]
        fn scaling_covariance(seed in 0u64..200, alpha in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, h, w) = (4usize, 2usize, 4usize);
            let ld: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rd: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = |d: &[f64]| -> Vec<f64> { d.iter().map(|v| v * alpha).collect() };
            let mut tape = Tape::<f64>::new();
            let fl = feat(&mut tape, ld.clone(), 1, c, h, w);
            let fr = feat(&mut tape, rd.clone(), 1, c, h, w);
            let base = build_gwc_volume(&mut tape, &fl, &fr, 2, 2).unwrap();
            let fls = feat(&mut tape, scale(&ld), 1, c, h, w);
            let frs = feat(&mut tape, scale(&rd), 1, c, h, w);
            let both = build_gwc_volume(&mut tape, &fls, &frs, 2, 2).unwrap();
            let left_only = build_gwc_volume(&mut tape, &fls, &fr, 2, 2).unwrap();
            let b = tape.value(base.id).to_vec();
            for (i, v) in tape.value(both.id).iter().enumerate() {
                prop_assert!((v - alpha * alpha * b[i]).abs() < 1e-9);
            }
            for (i, v) in tape.value(left_only.id).iter().enumerate() {
                prop_assert!((v - alpha * b[i]).abs() < 1e-9);
            }
        }
    }
}
