//! Output modules: two 3D convolutions squeeze an aggregation volume to a
//! single score channel, the scores are upsampled x4 (disparity, height and
//! width), softmaxed over the disparity axis, and reduced by soft argmin to
//! a full-resolution disparity map.
//!
//! The disparity index k of the upsampled volume is already in
//! full-resolution pixels, so the expectation needs no extra scaling.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvBn3d, RunMode};
use crate::params::{Leaves, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};

/// Per-pixel disparity distribution `[N, D_max, H, W]`, nonnegative and
/// summing to one over the disparity axis.
#[derive(Clone, Copy, Debug)]
pub struct ProbabilityVolume {
    pub id: TensorId,
    pub d_max: usize,
}

/// One output module: conv1 (BN+ReLU), conv2 (convolution only, to one
/// channel), upsample, softmax.
pub struct OutputModule {
    name: String,
    conv1: ConvBn3d,
    conv2: Conv3d,
}

impl OutputModule {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        base: usize,
    ) -> Result<Self> {
        Ok(OutputModule {
            name: name.to_string(),
            conv1: ConvBn3d::new(ps, rng, &format!("{name}.conv1"), base, base, 3, 1, true)?,
            conv2: Conv3d::new(ps, rng, &format!("{name}.conv2"), base, 1, 3, 1, 1, true)?,
        })
    }

    /// Scores, upsamples and normalizes an aggregation volume into a
    /// probability volume over `d_max` full-resolution disparities.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ps: &mut ParamStore<S>,
        lv: &mut Leaves,
        v: TensorId,
        d_max: usize,
        mode: RunMode,
    ) -> Result<ProbabilityVolume> {
        let shape = tape.shape(v).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(
                "output_module",
                format!("expected 5D volume, got {shape:?}"),
            ));
        }
        let dq = shape[2];
        if d_max != 4 * dq {
            return Err(Error::invalid(format!(
                "output_module: d_max {d_max} does not equal 4 x volume depth {dq}"
            )));
        }
        let y = self.conv1.forward(tape, ps, lv, v, mode)?;
        tape.label(format!("{}.conv1", self.name), y);
        let score = self.conv2.forward(tape, ps, lv, y)?;
        tape.label(format!("{}.conv2", self.name), score);
        let up = tape.upsample_trilinear(score, 4)?;
        tape.label(format!("{}.score", self.name), up);
        let us = tape.shape(up).to_vec();
        let flat = tape.reshape(up, &[us[0], us[2], us[3], us[4]])?;
        let prob = tape.softmax(flat, 1)?;
        tape.label(format!("{}.prob", self.name), prob);
        Ok(ProbabilityVolume { id: prob, d_max })
    }
}

/// Soft argmin: per-pixel expectation over disparity indices, `[N, H, W]`.
pub fn soft_argmin<S: Scalar>(tape: &mut Tape<S>, p: &ProbabilityVolume) -> Result<TensorId> {
    tape.disparity_expectation(p.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cast;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob_from_scores(scores: Vec<f64>, shape: &[usize]) -> (Tape<f64>, ProbabilityVolume) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(shape, scores, false).unwrap();
        let p = tape.softmax(x, 1).unwrap();
        (
            tape,
            ProbabilityVolume {
                id: p,
                d_max: shape[1],
            },
        )
    }

    #[test]
    fn soft_argmin_closed_forms() {
        // one-hot at k = 5 over 8 levels
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 8];
        data[5] = 1.0;
        let p = tape.leaf(&[1, 8, 1, 1], data, false).unwrap();
        let pv = ProbabilityVolume { id: p, d_max: 8 };
        let d = soft_argmin(&mut tape, &pv).unwrap();
        assert_eq!(tape.value(d), &[5.0]);

        // uniform over 4 levels -> 1.5
        let p = tape.leaf(&[1, 4, 1, 1], vec![0.25; 4], false).unwrap();
        let pv = ProbabilityVolume { id: p, d_max: 4 };
        let d = soft_argmin(&mut tape, &pv).unwrap();
        assert!((tape.value(d)[0] - 1.5).abs() < 1e-12);

        // p = [0.25, 0.75] -> 0.75
        let p = tape.leaf(&[1, 2, 1, 1], vec![0.25, 0.75], false).unwrap();
        let pv = ProbabilityVolume { id: p, d_max: 2 };
        let d = soft_argmin(&mut tape, &pv).unwrap();
        assert!((tape.value(d)[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn output_module_shapes_and_uniform_probabilities() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = OutputModule::new(&mut ps, &mut rng, "out3", 4).unwrap();
        let mut tape = Tape::new();
        let mut lv = Leaves::new(&ps, false);
        let v = tape.leaf(&[1, 4, 2, 3, 4], vec![0.0; 4 * 24], false).unwrap();
        let p = head
            .forward(&mut tape, &mut ps, &mut lv, v, 8, RunMode::eval())
            .unwrap();
        assert_eq!(tape.shape(p.id), &[1, 8, 12, 16]);
        // zero volume, bias-free conv plus zero-beta BN, final conv bias zero:
        // constant scores, so probabilities are uniform 1/8
        for v in tape.value(p.id) {
            assert!((v - 0.125).abs() < 1e-12);
        }

        let err = head
            .forward(&mut tape, &mut ps, &mut lv, v, 12, RunMode::eval())
            .unwrap_err();
        assert!(err.to_string().contains("4 x volume depth"), "{err}");
    }

    #[test]
    fn soft_argmin_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err, FD_FLOOR, FD_STEP};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [1usize, 6, 2, 2];
        let scores: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&shape, scores.clone(), true).unwrap();
        let p = tape.softmax(x, 1).unwrap();
        let d = tape.disparity_expectation(p).unwrap();
        let loss = tape.dot_const(d, &r).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let mut eval = |v: &[f64]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(&shape, v.to_vec(), false).unwrap();
            let p = t.softmax(x, 1).unwrap();
            let d = t.disparity_expectation(p).unwrap();
            crate::tensor::dot4(t.value(d), &r)
        };
        let numeric = finite_diff_grad(&mut eval, &scores, FD_STEP);
        let err = max_rel_err(&analytic, &numeric, FD_FLOOR);
        assert!(err < 1e-4, "rel err {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Soft argmin stays in [0, D-1] and reverses covariantly when the
        /// disparity axis is flipped.
        #[test]
        fn range_and_reversal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 2 + (seed as usize % 7);
            let scores: Vec<f64> = (0..d * 6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (mut tape, pv) = prob_from_scores(scores.clone(), &[1, d, 2, 3]);
            let out = soft_argmin(&mut tape, &pv).unwrap();
            for &v in tape.value(out) {
                prop_assert!((0.0..=(d as f64 - 1.0)).contains(&v));
            }
            // reverse the disparity axis
            let mut rev = vec![0.0; scores.len()];
            for k in 0..d {
                rev[k * 6..(k + 1) * 6].copy_from_slice(&scores[(d - 1 - k) * 6..(d - k) * 6]);
            }
            let (mut tape_r, pv_r) = prob_from_scores(rev, &[1, d, 2, 3]);
            let out_r = soft_argmin(&mut tape_r, &pv_r).unwrap();
            for (a, b) in tape.value(out).iter().zip(tape_r.value(out_r)) {
                prop_assert!((a + b - (d as f64 - 1.0)).abs() < 1e-9);
            }
        }

        /// Adding a per-pixel constant to all scores leaves the soft argmin
        /// unchanged (softmax shift invariance).
        #[test]
        fn score_shift_invariance(seed in 0u64..500, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|v| v + shift).collect();
            let (mut t1, p1) = prob_from_scores(scores, &[1, 5, 2, 2]);
            let (mut t2, p2) = prob_from_scores(shifted, &[1, 5, 2, 2]);
            let d1 = soft_argmin(&mut t1, &p1).unwrap();
            let d2 = soft_argmin(&mut t2, &p2).unwrap();
            for (a, b) in t1.value(d1).iter().zip(t2.value(d2)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        /// Probabilities are nonnegative and sum to one along disparity.
        #[test]
        fn probabilities_normalized(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-4.0..4.0)).collect();
            let (tape, pv) = prob_from_scores(scores, &[1, 6, 2, 2]);
            let v = tape.value(pv.id);
            for px in 0..4 {
                let mut s = 0.0;
                for k in 0..6 {
                    let p = v[k * 4 + px];
                    prop_assert!(p >= 0.0);
                    s += p;
                }
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn expectation_uses_full_resolution_indices() {
        // a probability volume concentrated at level k maps to disparity k
        // without any extra x4 scaling
        let mut tape = Tape::<f64>::new();
        let d = 8;
        let mut data = vec![0.0; d];
        data[7] = 1.0;
        let p = tape.leaf(&[1, d, 1, 1], data, false).unwrap();
        let pv = ProbabilityVolume { id: p, d_max: d };
        let out = soft_argmin(&mut tape, &pv).unwrap();
        assert_eq!(tape.value(out)[0], cast::<f64>(7.0));
    }
}
