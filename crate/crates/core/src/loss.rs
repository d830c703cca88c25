//! Multi-output smooth-L1 training loss and evaluation metrics: end-point
//! error, >k px error rates and the D1 outlier rate with its
//! `max(3px, 0.05 d*)` threshold.

use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tape, TensorId};

/// Fraction of pixels that must be valid for an image to enter evaluation.
pub const VALID_PIXEL_THRESHOLD: f64 = 0.10;

/// Smooth L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Dense or sparse per-pixel disparity with a validity mask, in
/// full-resolution pixels. Ground truth and extracted predictions both use
/// this owned form; predictions on the tape stay `TensorId`s.
#[derive(Clone, Debug)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn dense(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width);
        let valid = vec![true; values.len()];
        DisparityMap {
            height,
            width,
            values,
            valid,
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / self.values.len() as f64
    }
}

/// Refines a ground-truth mask to pixels that are finite and inside
/// `[0, d_max)`, and reports whether the map clears the 10%-valid
/// threshold. Sparse-sensor zero-codes-missing handling belongs to the
/// reader that produced the incoming mask.
pub fn filter_valid(gt: &DisparityMap, d_max: usize) -> (DisparityMap, bool) {
    let mut out = gt.clone();
    let dm = d_max as f32;
    for (v, m) in out.values.iter().zip(out.valid.iter_mut()) {
        *m = *m && v.is_finite() && *v >= 0.0 && *v < dm;
    }
    let passes = out.valid_fraction() >= VALID_PIXEL_THRESHOLD;
    (out, passes)
}

/// A batch of ground-truth maps flattened for the loss op.
pub struct GtBatch<S> {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> GtBatch<S> {
    pub fn from_maps(maps: &[&DisparityMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("empty ground-truth batch"))?;
        let (h, w) = (first.height, first.width);
        let mut values = Vec::with_capacity(maps.len() * h * w);
        let mut valid = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.height != h || m.width != w {
                return Err(Error::shape(
                    "gt_batch",
                    format!("{}x{} vs {h}x{w}", m.height, m.width),
                ));
            }
            values.extend(m.values.iter().map(|&v| cast::<S>(v as f64)));
            valid.extend_from_slice(&m.valid);
        }
        Ok(GtBatch {
            n: maps.len(),
            height: h,
            width: w,
            values,
            valid,
        })
    }
}

/// Per-output smooth-L1 terms combined as `sum_i lambda_i * mean_valid(...)`.
/// Invalid pixels are excluded from each mean; zero valid pixels is an error.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[TensorId],
    gt: &GtBatch<S>,
    lambdas: &[f64],
) -> Result<TensorId> {
    if preds.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} predictions but {} lambda coefficients",
            preds.len(),
            lambdas.len()
        )));
    }
    let expect = [gt.n, gt.height, gt.width];
    let mut total: Option<TensorId> = None;
    for (&pred, &lambda) in preds.iter().zip(lambdas) {
        if tape.shape(pred) != expect {
            return Err(Error::shape(
                "total_loss",
                format!("prediction {:?} vs ground truth {expect:?}", tape.shape(pred)),
            ));
        }
        let li = tape.masked_smooth_l1(pred, &gt.values, &gt.valid)?;
        let weighted = tape.mul_scalar(li, cast::<S>(lambda));
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::invalid("total_loss: no predictions"))
}

/// Evaluation metrics over valid pixels. Rates are percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// Fractions of valid pixels with |error| > k for k in {1, 2, 3, 5}.
    pub err_gt: [f64; 4],
    pub d1_all: f64,
    pub valid_count: usize,
}

pub const METRIC_CSV_HEADER: &str = "epe,err1,err2,err3,err5,d1_all,valid_count";

impl MetricReport {
    /// Flat CSV row matching [`METRIC_CSV_HEADER`], percentages with two
    /// decimals.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.4},{:.2},{:.2},{:.2},{:.2},{:.2},{}",
            self.epe,
            self.err_gt[0],
            self.err_gt[1],
            self.err_gt[2],
            self.err_gt[3],
            self.d1_all,
            self.valid_count
        )
    }
}

/// D1 outlier threshold for a ground-truth disparity.
pub fn d1_threshold(gt: f64) -> f64 {
    (0.05 * gt).max(3.0)
}

/// Streaming metric accumulator over image pairs.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    abs_err_sum: f64,
    count: usize,
    over_k: [usize; 4],
    d1: usize,
}

const K_THRESHOLDS: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &DisparityMap, gt: &DisparityMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height, pred.width, gt.height, gt.width
                ),
            ));
        }
        for i in 0..gt.values.len() {
            if !gt.valid[i] {
                continue;
            }
            let err = (pred.values[i] as f64 - gt.values[i] as f64).abs();
            self.abs_err_sum += err;
            self.count += 1;
            for (k, &t) in K_THRESHOLDS.iter().enumerate() {
                if err > t {
                    self.over_k[k] += 1;
                }
            }
            if err > d1_threshold(gt.values[i] as f64) {
                self.d1 += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::invalid("evaluate: zero valid pixels"));
        }
        let n = self.count as f64;
        let pct = |c: usize| 100.0 * c as f64 / n;
        Ok(MetricReport {
            epe: self.abs_err_sum / n,
            err_gt: [
                pct(self.over_k[0]),
                pct(self.over_k[1]),
                pct(self.over_k[2]),
                pct(self.over_k[3]),
            ],
            d1_all: pct(self.d1),
            valid_count: self.count,
        })
    }
}

/// Metrics of a single prediction / ground-truth pair.
pub fn evaluate(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred, gt)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_branch_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert_eq!(smooth_l1(-3.0), 2.5);
        assert_eq!(smooth_l1(0.0), 0.0);
    }

    #[test]
    fn smooth_l1_continuous_at_branch_boundary() {
        for eps in [1e-9, 1e-6, 1e-3] {
            let below = smooth_l1(1.0 - eps);
            let above = smooth_l1(1.0 + eps);
            assert!((below - 0.5).abs() < 2.0 * eps);
            assert!((above - 0.5).abs() < 2.0 * eps);
        }
    }

    fn pred_tensor(tape: &mut Tape<f64>, gt: &GtBatch<f64>, offs: &[f64]) -> TensorId {
        let data: Vec<f64> = gt.values.iter().zip(offs.iter().cycle()).map(|(&v, &o)| v + o).collect();
        tape.leaf(&[gt.n, gt.height, gt.width], data, false).unwrap()
    }

    fn demo_gt() -> DisparityMap {
        let mut gt = DisparityMap::dense(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        gt.valid[3] = false;
        gt
    }

    #[test]
    fn paper_lambdas_scale_identical_losses() {
        let gt_map = demo_gt();
        let gt = GtBatch::<f64>::from_maps(&[&gt_map]).unwrap();
        let mut tape = Tape::<f64>::new();
        // constant offset 0.5 -> each output loss is smooth_l1(0.5) = 0.125
        let p = pred_tensor(&mut tape, &gt, &[0.5]);
        let preds = vec![p; 4];
        let loss = total_loss(&mut tape, &preds, &gt, &[0.5, 0.5, 0.7, 1.0]).unwrap();
        let expect = 2.7 * 0.125;
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_invalid_pixels() {
        let mut gt_map = DisparityMap::dense(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        gt_map.valid[0] = false;
        gt_map.valid[1] = false;
        let gt = GtBatch::<f64>::from_maps(&[&gt_map]).unwrap();
        let mut tape = Tape::<f64>::new();
        // garbage at invalid pixels, +0.5 at valid ones
        let data = vec![500.0, -30.0, 3.5, 4.5];
        let p = tape.leaf(&[1, 1, 4], data, false).unwrap();
        let loss = total_loss(&mut tape, &[p], &gt, &[1.0]).unwrap();
        assert!((tape.value(loss)[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_valid_pixels_is_an_error_not_nan() {
        let mut gt_map = DisparityMap::dense(1, 2, vec![1.0, 2.0]);
        gt_map.valid = vec![false, false];
        let gt = GtBatch::<f64>::from_maps(&[&gt_map]).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&[1, 1, 2], vec![0.0, 0.0], false).unwrap();
        assert!(total_loss(&mut tape, &[p], &gt, &[1.0]).is_err());
    }

    #[test]
    fn perfect_prediction_zeroes_all_metrics() {
        let gt = demo_gt();
        let report = evaluate(&gt, &gt).unwrap();
        assert_eq!(report.epe, 0.0);
        assert_eq!(report.err_gt, [0.0; 4]);
        assert_eq!(report.d1_all, 0.0);
        assert_eq!(report.valid_count, 7);
    }

    #[test]
    fn d1_rule_hand_evaluated_pixels() {
        // d* = 100, pred = 104.9: error 4.9 < max(3, 5) = 5 -> not a D1
        // outlier, but counted by the >3px rate.
        let gt = DisparityMap::dense(1, 1, vec![100.0]);
        let pred = DisparityMap::dense(1, 1, vec![104.9]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.d1_all, 0.0);
        assert_eq!(r.err_gt[2], 100.0);

        // d* = 10, pred = 14: error 4 > max(3, 0.5) = 3 -> D1 outlier.
        let gt = DisparityMap::dense(1, 1, vec![10.0]);
        let pred = DisparityMap::dense(1, 1, vec![14.0]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.d1_all, 100.0);
    }

    #[test]
    fn d1_threshold_crossover_at_sixty() {
        assert_eq!(d1_threshold(59.0), 3.0);
        assert_eq!(d1_threshold(60.0), 3.0);
        assert!((d1_threshold(61.0) - 3.05).abs() < 1e-12);
        assert!((d1_threshold(100.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn filter_valid_boundaries_and_threshold() {
        let mut gt = DisparityMap::dense(1, 5, vec![0.0, 31.9, 32.0, -0.1, f32::INFINITY]);
        gt.valid[0] = true;
        let (filtered, passes) = filter_valid(&gt, 32);
        assert_eq!(filtered.valid, vec![true, true, false, false, false]);
        assert!(passes, "2/5 = 40% valid");

        // 5% valid map is excluded
        let mut sparse = DisparityMap::dense(1, 100, vec![1.0; 100]);
        for i in 5..100 {
            sparse.valid[i] = false;
        }
        let (_, passes) = filter_valid(&sparse, 32);
        assert!(!passes);
        // exactly 10% passes
        let mut edge = DisparityMap::dense(1, 100, vec![1.0; 100]);
        for i in 10..100 {
            edge.valid[i] = false;
        }
        let (_, passes) = filter_valid(&edge, 32);
        assert!(passes);
    }

    #[test]
    fn csv_row_shape() {
        let r = MetricReport {
            epe: 1.23456,
            err_gt: [10.0, 5.0, 3.3333, 1.0],
            d1_all: 2.345,
            valid_count: 42,
        };
        assert_eq!(r.to_csv_row(), "1.2346,10.00,5.00,3.33,1.00,2.35,42");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Negating the per-pixel error leaves every metric unchanged.
        /// Values are quantized to 1/64 px so the negation is exact in f32.
        #[test]
        fn metrics_symmetric_in_error_sign(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            let gt_vals: Vec<f32> = (0..n).map(|_| rng.random_range(0..80 * 64) as f32 / 64.0).collect();
            let errs: Vec<f32> = (0..n).map(|_| rng.random_range(-6 * 64..6 * 64) as f32 / 64.0).collect();
            let gt = DisparityMap::dense(4, 6, gt_vals.clone());
            let plus = DisparityMap::dense(4, 6, gt_vals.iter().zip(&errs).map(|(g, e)| g + e).collect());
            let minus = DisparityMap::dense(4, 6, gt_vals.iter().zip(&errs).map(|(g, e)| g - e).collect());
            let a = evaluate(&plus, &gt).unwrap();
            let b = evaluate(&minus, &gt).unwrap();
            prop_assert!((a.epe - b.epe).abs() < 1e-9);
            prop_assert_eq!(a.err_gt, b.err_gt);
            prop_assert!((a.d1_all - b.d1_all).abs() < 1e-12);
        }

        /// The loss derivative is smooth-L1's clamped difference.
        #[test]
        fn loss_gradient_is_clamped_difference(offset in -3.0f64..3.0) {
            // keep away from the |x| = 1 kink where the FD check is invalid
            prop_assume!((offset.abs() - 1.0).abs() > 1e-2);
            let gt_map = DisparityMap::dense(1, 3, vec![2.0, 4.0, 6.0]);
            let gt = GtBatch::<f64>::from_maps(&[&gt_map]).unwrap();
            let mut tape = Tape::<f64>::new();
            let data: Vec<f64> = gt.values.iter().map(|&v| v + offset).collect();
            let p = tape.leaf(&[1, 1, 3], data, true).unwrap();
            let loss = total_loss(&mut tape, &[p], &gt, &[1.0]).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(p).unwrap();
            let expect = offset.clamp(-1.0, 1.0) / 3.0;
            for &v in g {
                prop_assert!((v - expect).abs() < 1e-9, "grad {v} vs {expect}");
            }
        }
    }
}
