//! Runnable verification suites: oracle equivalence, algebraic identities,
//! finite-difference gradient checks, structural shape conformance,
//! inference-path identity and file-format round trips. The CLI `verify`
//! command runs everything; the acceptance tests call the same functions.
//!
//! All numeric suites run at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::NetworkConfig;
use crate::features::FeatureMap;
use crate::io::{generate_rds, pfm, rds, SyntheticConfig};
use crate::loss::{evaluate, smooth_l1, total_loss, DisparityMap, GtBatch};
use crate::model::StereoModel;
use crate::nn::RunMode;
use crate::params::{Leaves, ParamStore, SlotKind};
use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err, FD_FLOOR, FD_STEP};
use crate::tensor::{dot4, Tape, TensorId};
use crate::volume::{
    build_full_correlation_volume, build_gwc_volume, oracle_volume, VolumeKind,
};
use crate::Result;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn feat(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = rand_vec(rng, n * c * h * w);
    let id = tape.leaf(&[n, c, h, w], data, false).expect("leaf");
    FeatureMap {
        id,
        channels: c,
        height: h,
        width: w,
    }
}

/// Group-wise correlation with one group degenerates to full correlation.
/// 20 random feature pairs cycling Nc in {4, 8, 32} and Dq in {1, 4, 8}.
pub fn degeneracy_suite(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let nc = [4, 8, 32][(i % 3) as usize];
        let dq = [1, 4, 8][((i / 3) % 3) as usize];
        let mut tape = Tape::<f64>::new();
        let fl = feat(&mut tape, &mut rng, 2, nc, 5, 9);
        let fr = feat(&mut tape, &mut rng, 2, nc, 5, 9);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, dq, 1).expect("gwc");
        let corr = build_full_correlation_volume(&mut tape, &fl, &fr, dq).expect("corr");
        for (a, b) in tape.value(gwc.id).iter().zip(tape.value(corr.id)) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckResult::new(
        "degeneracy: gwc(Ng=1) == full correlation",
        worst < 1e-6,
        format!("max abs diff {worst:.3e} over 20 instances (tol 1e-6)"),
    )
}

/// The mean over groups of the group-wise volume equals full correlation.
pub fn group_mean_suite(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let nc = [4, 8, 32][(i % 3) as usize];
        let dq = [1, 4, 8][((i / 3) % 3) as usize];
        let groups = [2, 4, nc][((i / 9) % 3) as usize].min(nc);
        let mut tape = Tape::<f64>::new();
        let fl = feat(&mut tape, &mut rng, 1, nc, 4, 10);
        let fr = feat(&mut tape, &mut rng, 1, nc, 4, 10);
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, dq, groups).expect("gwc");
        let corr = build_full_correlation_volume(&mut tape, &fl, &fr, dq).expect("corr");
        let plane = dq * 4 * 10;
        let gv = tape.value(gwc.id);
        let cv = tape.value(corr.id);
        for p in 0..plane {
            let mut mean = 0.0;
            for g in 0..groups {
                mean += gv[g * plane + p];
            }
            mean /= groups as f64;
            worst = worst.max((mean - cv[p]).abs());
        }
    }
    CheckResult::new(
        "group-mean identity: mean_g gwc == full correlation",
        worst < 1e-6,
        format!("max abs diff {worst:.3e} over 20 instances (tol 1e-6)"),
    )
}

/// Every builder matches the naive nested-loop oracle elementwise,
/// including out-of-bounds zero-fill cells.
pub fn oracle_suite(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0C0C);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for i in 0..20u64 {
        let (n, c, h, w) = (2usize, 8usize, 3 + (i % 3) as usize, 6 + (i % 5) as usize);
        let dq = 2 + (i % 5) as usize; // >= 2 so zero-fill cells exist
        let groups = [1, 2, 4][(i % 3) as usize];
        let mut tape = Tape::<f64>::new();
        let fl = feat(&mut tape, &mut rng, n, c, h, w);
        let fr = feat(&mut tape, &mut rng, n, c, h, w);
        let lv = tape.value(fl.id).to_vec();
        let rv = tape.value(fr.id).to_vec();
        let shape = [n, c, h, w];

        let corr = build_full_correlation_volume(&mut tape, &fl, &fr, dq).expect("corr");
        let oracle = oracle_volume(VolumeKind::Corr, &lv, &rv, shape, dq, 1).expect("oracle");
        for (a, b) in tape.value(corr.id).iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let gwc = build_gwc_volume(&mut tape, &fl, &fr, dq, groups).expect("gwc");
        let oracle = oracle_volume(VolumeKind::Gwc, &lv, &rv, shape, dq, groups).expect("oracle");
        for (a, b) in tape.value(gwc.id).iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let cat = crate::volume::build_concat_volume(&mut tape, &fl, &fr, dq).expect("cat");
        let oracle = oracle_volume(VolumeKind::Concat, &lv, &rv, shape, dq, 1).expect("oracle");
        for (a, b) in tape.value(cat.id).iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        instances += 3;
    }
    CheckResult::new(
        "oracle equivalence: builders == nested-loop oracle",
        worst < 1e-6,
        format!("max abs diff {worst:.3e} over {instances} volumes (tol 1e-6)"),
    )
}

struct OpCheck {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    gen: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>>,
    build: Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>>,
}

fn uniform_gen(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    rand_vec(rng, n)
}

/// Inputs bounded away from zero so the FD step cannot cross the ReLU kink.
fn kink_free_gen(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "conv2d stride-2",
            shapes: vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3], vec![4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), (2, 2), (1, 1), (1, 1))),
        },
        OpCheck {
            name: "conv2d dilation-2",
            shapes: vec![vec![1, 2, 7, 7], vec![3, 2, 3, 3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.conv2d(ids[0], ids[1], None, (1, 1), (2, 2), (2, 2))),
        },
        OpCheck {
            name: "conv3d stride-1",
            shapes: vec![vec![1, 2, 3, 4, 4], vec![2, 2, 3, 3, 3], vec![2]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.conv3d(ids[0], ids[1], Some(ids[2]), (1, 1, 1), (1, 1, 1))),
        },
        OpCheck {
            name: "conv3d stride-2",
            shapes: vec![vec![1, 2, 4, 4, 4], vec![3, 2, 3, 3, 3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.conv3d(ids[0], ids[1], None, (2, 2, 2), (1, 1, 1))),
        },
        OpCheck {
            name: "conv_transpose3d",
            shapes: vec![vec![1, 3, 2, 2, 2], vec![3, 2, 3, 3, 3], vec![2]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.conv_transpose3d(ids[0], ids[1], Some(ids[2]), 2, 1, 1)),
        },
        OpCheck {
            name: "batchnorm train",
            shapes: vec![vec![2, 3, 2, 4], vec![3], vec![3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| Ok(t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?.0)),
        },
        OpCheck {
            name: "batchnorm eval",
            shapes: vec![vec![2, 2, 3, 3], vec![2], vec![2]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| {
                t.batch_norm_eval(ids[0], ids[1], ids[2], &[0.2, -0.1], &[0.9, 1.4], 1e-5)
            }),
        },
        OpCheck {
            name: "relu",
            shapes: vec![vec![3, 7]],
            gen: Box::new(kink_free_gen),
            build: Box::new(|t, ids| Ok(t.relu(ids[0]))),
        },
        OpCheck {
            name: "add",
            shapes: vec![vec![2, 5], vec![2, 5]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.add(ids[0], ids[1])),
        },
        OpCheck {
            name: "concat axis-1",
            shapes: vec![vec![2, 3, 4], vec![2, 2, 4], vec![2, 1, 4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.concat(ids, 1)),
        },
        OpCheck {
            name: "mul_scalar",
            shapes: vec![vec![9]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| Ok(t.mul_scalar(ids[0], -1.75))),
        },
        OpCheck {
            name: "softmax",
            shapes: vec![vec![2, 5, 3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.softmax(ids[0], 1)),
        },
        OpCheck {
            name: "upsample_trilinear",
            shapes: vec![vec![1, 2, 2, 3, 4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.upsample_trilinear(ids[0], 2)),
        },
        OpCheck {
            name: "zero_pad_high",
            shapes: vec![vec![1, 2, 2, 3, 3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.zero_pad_high(ids[0], [2, 1, 1])),
        },
        OpCheck {
            name: "crop_high",
            shapes: vec![vec![1, 2, 4, 4, 4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.crop_high(ids[0], [2, 3, 4])),
        },
        OpCheck {
            name: "reshape",
            shapes: vec![vec![2, 3, 4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.reshape(ids[0], &[4, 6])),
        },
        OpCheck {
            name: "full correlation volume",
            shapes: vec![vec![2, 4, 3, 5], vec![2, 4, 3, 5]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.corr_volume(ids[0], ids[1], 3)),
        },
        OpCheck {
            name: "gwc volume",
            shapes: vec![vec![2, 4, 3, 5], vec![2, 4, 3, 5]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.gwc_volume(ids[0], ids[1], 3, 2)),
        },
        OpCheck {
            name: "concat volume",
            shapes: vec![vec![1, 3, 2, 5], vec![1, 3, 2, 5]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| t.concat_volume(ids[0], ids[1], 4)),
        },
        OpCheck {
            name: "soft argmin (softmax + expectation)",
            shapes: vec![vec![2, 5, 2, 3]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| {
                let p = t.softmax(ids[0], 1)?;
                t.disparity_expectation(p)
            }),
        },
        OpCheck {
            name: "masked smooth_l1",
            shapes: vec![vec![1, 3, 4]],
            gen: Box::new(uniform_gen),
            build: Box::new(|t, ids| {
                // targets offset so |pred - target| stays away from the
                // branch boundary at 1
                let target = vec![0.35; 12];
                let mut mask = vec![true; 12];
                mask[5] = false;
                t.masked_smooth_l1(ids[0], &target, &mask)
            }),
        },
    ]
}

/// Per-op central-finite-difference checks, `seeds` random instances each.
pub fn gradient_op_suite(seed: u64, seeds: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for check in op_checks() {
        let mut worst = 0.0f64;
        for s in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s.wrapping_mul(0x9E37_79B9)));
            let inputs: Vec<Vec<f64>> = check
                .shapes
                .iter()
                .map(|sh| (check.gen)(&mut rng, sh.iter().product()))
                .collect();
            let out_numel = {
                let mut tape = Tape::<f64>::new();
                let ids: Vec<TensorId> = check
                    .shapes
                    .iter()
                    .zip(&inputs)
                    .map(|(sh, d)| tape.leaf(sh, d.clone(), false).expect("leaf"))
                    .collect();
                let o = (check.build)(&mut tape, &ids).expect("forward");
                tape.numel(o)
            };
            let r = rand_vec(&mut rng, out_numel);

            let mut tape = Tape::<f64>::new();
            let ids: Vec<TensorId> = check
                .shapes
                .iter()
                .zip(&inputs)
                .map(|(sh, d)| tape.leaf(sh, d.clone(), true).expect("leaf"))
                .collect();
            let o = (check.build)(&mut tape, &ids).expect("forward");
            let loss = tape.dot_const(o, &r).expect("loss");
            tape.backward(loss).expect("backward");
            let analytic: Vec<f64> = ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.numel(id)])
                })
                .collect::<Vec<_>>()
                .concat();

            let flat: Vec<f64> = inputs.concat();
            let shapes = check.shapes.clone();
            let build = &check.build;
            let mut eval = |x: &[f64]| -> f64 {
                let mut tape = Tape::<f64>::new();
                let mut off = 0;
                let ids: Vec<TensorId> = shapes
                    .iter()
                    .map(|sh| {
                        let n: usize = sh.iter().product();
                        let id = tape.leaf(sh, x[off..off + n].to_vec(), false).expect("leaf");
                        off += n;
                        id
                    })
                    .collect();
                let o = build(&mut tape, &ids).expect("forward");
                dot4(tape.value(o), &r)
            };
            let numeric = finite_diff_grad(&mut eval, &flat, FD_STEP);
            worst = worst.max(max_rel_err(&analytic, &numeric, FD_FLOOR));
        }
        out.push(CheckResult::new(
            &format!("gradient: {}", check.name),
            worst < 1e-4,
            format!("max rel err {worst:.3e} over {seeds} seeds (tol 1e-4)"),
        ));
    }
    out
}

/// Configuration of the tiny end-to-end pipeline used by the gradient and
/// identity checks: 8x16 images, D_max 8, base channels 4.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        unary_channels: 8,
        gwc_groups: 2,
        concat_channels: 2,
        d_max: 8,
        base_3d_channels: 4,
        num_hourglasses: 3,
        blocks: [1, 1, 1, 1],
        use_gwc_volume: true,
        use_concat_volume: true,
        norm_mean: 0.5,
        norm_std: 0.5,
    }
}

fn tiny_inputs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, DisparityMap) {
    let left = rand_vec(rng, 3 * h * w);
    let right = rand_vec(rng, 3 * h * w);
    let gt_vals: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..7.0)).collect();
    (left, right, DisparityMap::dense(h, w, gt_vals))
}

/// End-to-end gradient spot check: the training loss of the tiny pipeline
/// against central finite differences at a handful of randomly chosen
/// parameter coordinates.
pub fn gradient_e2e_check(seed: u64, coords: usize) -> CheckResult {
    let (h, w) = (8usize, 16usize);
    let lambdas = [0.5, 0.5, 0.7, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let (left, right, gt_map) = tiny_inputs(&mut rng, h, w);

    let mut ps = ParamStore::<f64>::new();
    let model = StereoModel::new(tiny_config(), &mut ps, seed).expect("model");
    let gt = GtBatch::<f64>::from_maps(&[&gt_map]).expect("gt");

    let forward = |ps: &mut ParamStore<f64>, with_grad: bool| -> (Tape<f64>, Leaves, TensorId) {
        let mut tape = Tape::<f64>::new();
        let mut lv = Leaves::new(ps, with_grad);
        let l = tape.leaf(&[1, 3, h, w], left.clone(), false).expect("leaf");
        let r = tape.leaf(&[1, 3, h, w], right.clone(), false).expect("leaf");
        let preds = model
            .forward_train(&mut tape, ps, &mut lv, l, r, RunMode::train_frozen())
            .expect("forward");
        let loss = total_loss(&mut tape, &preds, &gt, &lambdas).expect("loss");
        (tape, lv, loss)
    };

    let (mut tape, lv, loss) = forward(&mut ps, true);
    tape.backward(loss).expect("backward");
    let used = lv.used();

    // sample trainable coordinates across distinct parameters
    let trainable: Vec<_> = used
        .iter()
        .filter(|(pid, _)| ps.slot(*pid).kind == SlotKind::Trainable)
        .collect();
    let mut worst = 0.0f64;
    let mut picked = Vec::new();
    for i in 0..coords {
        let (pid, tid) = *trainable[(i * 7919) % trainable.len()];
        let len = ps.slot(pid).data.len();
        let coord = (i * 104729) % len;
        let analytic = tape.grad(tid).map(|g| g[coord]).unwrap_or(0.0);

        let orig = ps.slot(pid).data[coord];
        ps.slot_mut(pid).data[coord] = orig + FD_STEP;
        let (tp, _, lp) = forward(&mut ps, false);
        let fp = tp.value(lp)[0];
        ps.slot_mut(pid).data[coord] = orig - FD_STEP;
        let (tm, _, lm) = forward(&mut ps, false);
        let fm = tm.value(lm)[0];
        ps.slot_mut(pid).data[coord] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max(max_rel_err(&[analytic], &[numeric], FD_FLOOR));
        picked.push(ps.slot(pid).name.clone());
    }
    CheckResult::new(
        "gradient: end-to-end tiny pipeline",
        worst < 1e-3,
        format!(
            "max rel err {worst:.3e} over {coords} parameter coordinates (tol 1e-3); \
             parameters: {}",
            picked.join(", ")
        ),
    )
}

/// Table-driven shape conformance at the full-scale configuration
/// (Nc 320, Ng 40, 64-channel volume, base 32, D_max 192).
pub fn shape_conformance_check() -> CheckResult {
    let cfg = NetworkConfig::full_scale();
    let (h, w) = (32usize, 64usize);
    let (hq, wq, dq) = (h / 4, w / 4, cfg.d_levels());
    let mut ps = ParamStore::<f32>::new();
    let model = match StereoModel::new(cfg, &mut ps, 0) {
        Ok(m) => m,
        Err(e) => return CheckResult::new("shape conformance", false, e.to_string()),
    };
    let mut tape = Tape::<f32>::new();
    let mut lv = Leaves::new(&ps, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ldata = rand_vec(&mut rng, 3 * h * w);
    let rdata = rand_vec(&mut rng, 3 * h * w);
    let l = tape.leaf_f64(&[1, 3, h, w], &ldata, false).expect("leaf");
    let r = tape.leaf_f64(&[1, 3, h, w], &rdata, false).expect("leaf");
    if let Err(e) = model.forward_train(&mut tape, &mut ps, &mut lv, l, r, RunMode::eval()) {
        return CheckResult::new("shape conformance", false, e.to_string());
    }

    let mut expected: Vec<(String, Vec<usize>)> = vec![
        ("unary_l".into(), vec![1, 320, hq, wq]),
        ("unary_r".into(), vec![1, 320, hq, wq]),
        ("volume_g".into(), vec![1, 40, dq, hq, wq]),
        ("volume_c".into(), vec![1, 24, dq, hq, wq]),
        ("volume".into(), vec![1, 64, dq, hq, wq]),
        ("pre.conv1".into(), vec![1, 32, dq, hq, wq]),
        ("pre.conv2".into(), vec![1, 32, dq, hq, wq]),
        ("pre.output".into(), vec![1, 32, dq, hq, wq]),
    ];
    for i in 1..=3 {
        let hg = format!("hourglass{i}");
        expected.extend([
            (format!("{hg}.conv1a"), vec![1, 64, dq / 2, hq / 2, wq / 2]),
            (format!("{hg}.conv1b"), vec![1, 64, dq / 2, hq / 2, wq / 2]),
            (format!("{hg}.conv2a"), vec![1, 128, dq / 4, hq / 4, wq / 4]),
            (format!("{hg}.conv2b"), vec![1, 128, dq / 4, hq / 4, wq / 4]),
            (format!("{hg}.deconv1"), vec![1, 64, dq / 2, hq / 2, wq / 2]),
            (format!("{hg}.shortcut1"), vec![1, 64, dq / 2, hq / 2, wq / 2]),
            (format!("{hg}.plus1"), vec![1, 64, dq / 2, hq / 2, wq / 2]),
            (format!("{hg}.deconv0"), vec![1, 32, dq, hq, wq]),
            (format!("{hg}.shortcut0"), vec![1, 32, dq, hq, wq]),
            (format!("{hg}.output"), vec![1, 32, dq, hq, wq]),
        ]);
    }
    for i in 0..4 {
        let om = format!("output{i}");
        expected.extend([
            (format!("{om}.conv1"), vec![1, 32, dq, hq, wq]),
            (format!("{om}.conv2"), vec![1, 1, dq, hq, wq]),
            (format!("{om}.score"), vec![1, 1, 4 * dq, h, w]),
            (format!("{om}.prob"), vec![1, 4 * dq, h, w]),
            (format!("{om}.disparity"), vec![1, h, w]),
        ]);
    }

    let mut failures = Vec::new();
    for (name, shape) in &expected {
        match tape.labeled_shape(name) {
            Some(s) if s == shape.as_slice() => {}
            Some(s) => failures.push(format!("{name}: got {s:?}, want {shape:?}")),
            None => failures.push(format!("{name}: missing")),
        }
    }
    let n = expected.len();
    CheckResult::new(
        "shape conformance (full-scale structure table)",
        failures.is_empty(),
        if failures.is_empty() {
            format!("all {n} structural rows match (D_max 192, Nc 320, Ng 40, base 32)")
        } else {
            failures.join("; ")
        },
    )
}

/// Inference equals the train graph's final head under eval statistics,
/// and touches no auxiliary-head parameters.
pub fn aux_head_identity_check(seed: u64) -> CheckResult {
    let mut ps = ParamStore::<f64>::new();
    let model = StereoModel::new(tiny_config(), &mut ps, seed).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAAA);
    let (h, w) = (16, 32);
    let left = rand_vec(&mut rng, 3 * h * w);
    let right = rand_vec(&mut rng, 3 * h * w);

    let mut t1 = Tape::<f64>::new();
    let mut lv1 = Leaves::new(&ps, false);
    let l = t1.leaf(&[1, 3, h, w], left.clone(), false).expect("leaf");
    let r = t1.leaf(&[1, 3, h, w], right.clone(), false).expect("leaf");
    let preds = model
        .forward_train(&mut t1, &mut ps, &mut lv1, l, r, RunMode::eval())
        .expect("train fwd");

    let mut t2 = Tape::<f64>::new();
    let mut lv2 = Leaves::new(&ps, false);
    let l = t2.leaf(&[1, 3, h, w], left, false).expect("leaf");
    let r = t2.leaf(&[1, 3, h, w], right, false).expect("leaf");
    let infer = model
        .forward_infer(&mut t2, &mut ps, &mut lv2, l, r)
        .expect("infer fwd");

    let exact = t1.value(preds[3]) == t2.value(infer);
    let aux_params: Vec<String> = lv2
        .used()
        .iter()
        .map(|(p, _)| ps.slot(*p).name.clone())
        .filter(|n| n.starts_with("output0") || n.starts_with("output1") || n.starts_with("output2"))
        .collect();
    let passed = exact && aux_params.is_empty();
    CheckResult::new(
        "aux-head removal: infer == train-graph final head",
        passed,
        if passed {
            format!(
                "bitwise equal over {} pixels; inference graph references {} of {} parameters, \
                 none from aux heads",
                h * w,
                lv2.used().len(),
                ps.len()
            )
        } else {
            format!("exact={exact}, aux params touched: {aux_params:?}")
        },
    )
}

/// Hand-evaluated loss and metric values: smooth-L1 branches, the
/// lambda-weighted total, and the D1 threshold rule.
pub fn loss_metric_values_check() -> CheckResult {
    let mut fails = Vec::new();
    for (x, want) in [(0.5, 0.125), (1.0, 0.5), (-1.0, 0.5), (-3.0, 2.5)] {
        if smooth_l1(x) != want {
            fails.push(format!("smooth_l1({x}) = {}, want {want}", smooth_l1(x)));
        }
    }

    // identical per-output losses scale by 0.5 + 0.5 + 0.7 + 1.0 = 2.7
    let gt_map = DisparityMap::dense(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let gt = GtBatch::<f64>::from_maps(&[&gt_map]).expect("gt");
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = gt.values.iter().map(|&v| v + 0.5).collect();
    let p = tape.leaf(&[1, 2, 3], data, false).expect("leaf");
    let preds = vec![p; 4];
    let lambdas = [0.5, 0.5, 0.7, 1.0];
    let loss = total_loss(&mut tape, &preds, &gt, &lambdas).expect("loss");
    let l = 0.125f64;
    let want = ((0.5 * l + 0.5 * l) + 0.7 * l) + 1.0 * l;
    if tape.value(loss)[0] != want {
        fails.push(format!("lambda total {} != {want}", tape.value(loss)[0]));
    }

    let gt1 = DisparityMap::dense(1, 1, vec![100.0]);
    let r1 = evaluate(&DisparityMap::dense(1, 1, vec![104.9]), &gt1).expect("eval");
    if r1.d1_all != 0.0 || r1.err_gt[2] != 100.0 {
        fails.push(format!("pixel (d*=100, pred=104.9): d1 {} >3px {}", r1.d1_all, r1.err_gt[2]));
    }
    let gt2 = DisparityMap::dense(1, 1, vec![10.0]);
    let r2 = evaluate(&DisparityMap::dense(1, 1, vec![14.0]), &gt2).expect("eval");
    if r2.d1_all != 100.0 {
        fails.push(format!("pixel (d*=10, pred=14): d1 {}", r2.d1_all));
    }

    CheckResult::new(
        "loss/metric hand-evaluated values",
        fails.is_empty(),
        if fails.is_empty() {
            "smooth-L1 branches, 2.7x lambda total and both D1 pixels exact".into()
        } else {
            fails.join("; ")
        },
    )
}

/// File-format round trips: PFM bitwise, disparity PNG conventions, and
/// checkpoint save -> load -> identical validation EPE.
pub fn roundtrip_suite(seed: u64) -> Vec<CheckResult> {
    let dir = std::env::temp_dir().join(format!("gwcstereo-verify-{seed}"));
    let _ = std::fs::create_dir_all(&dir);
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF11E);

    // PFM bitwise round trip including non-finite payloads
    {
        let mut data: Vec<f32> = (0..60).map(|_| f32::from_bits(rng.random::<u32>())).collect();
        data[0] = f32::INFINITY;
        let img = pfm::PfmImage {
            width: 6,
            height: 10,
            channels: 1,
            scale: -1.0,
            data,
        };
        let p = dir.join("rt.pfm");
        let ok = pfm::write_pfm(&p, &img).is_ok()
            && pfm::read_pfm(&p)
                .map(|b| {
                    b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                        == img.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                })
                .unwrap_or(false);
        out.push(CheckResult::new(
            "round trip: PFM write -> read bitwise",
            ok,
            "60 random bit patterns including +inf".into(),
        ));
    }

    // disparity PNG conventions
    {
        let mut map = DisparityMap::dense(1, 2, vec![1.0, 5.0]);
        map.valid[1] = false;
        let p = dir.join("rt.png");
        let ok = crate::io::kitti::write_disparity_png(&p, &map).is_ok()
            && crate::io::kitti::read_disparity_png(&p)
                .map(|b| b.values[0] == 1.0 && b.valid[0] && !b.valid[1])
                .unwrap_or(false);
        out.push(CheckResult::new(
            "round trip: disparity PNG raw 256 -> 1.0 px, raw 0 -> invalid",
            ok,
            "16-bit grayscale conventions".into(),
        ));
    }

    // checkpoint -> identical validation EPE
    {
        let mut ps = ParamStore::<f32>::new();
        let cfg = tiny_config();
        let model = StereoModel::new(cfg.clone(), &mut ps, seed).expect("model");
        let samples: Vec<_> = (0..2)
            .map(|i| {
                generate_rds(&SyntheticConfig {
                    height: 16,
                    width: 32,
                    d_max: 8,
                    dot_density: 0.6,
                    max_shapes: 3,
                    seed: rds::sample_seed(seed, i),
                })
                .expect("rds")
            })
            .collect();
        let (epe_before, _) = crate::train::validate(&model, &mut ps, &samples).expect("validate");
        let p = dir.join("model.ckpt");
        checkpoint::save_model(&p, &ps, &cfg).expect("save");
        let (model2, mut ps2) = checkpoint::load_model::<f32>(&p).expect("load");
        let (epe_after, _) = crate::train::validate(&model2, &mut ps2, &samples).expect("validate");
        out.push(CheckResult::new(
            "round trip: checkpoint reproduces validation EPE exactly",
            epe_before == epe_after,
            format!("EPE {epe_before} before vs {epe_after} after"),
        ));
    }
    out
}

/// Generator invariants: determinism, strict disparity bound and exact
/// photometric consistency at valid pixels.
pub fn rds_consistency_check(seed: u64) -> CheckResult {
    let cfg = SyntheticConfig {
        height: 48,
        width: 96,
        d_max: 24,
        dot_density: 0.5,
        max_shapes: 6,
        seed,
    };
    let a = match generate_rds(&cfg) {
        Ok(s) => s,
        Err(e) => return CheckResult::new("rds generator", false, e.to_string()),
    };
    let b = generate_rds(&cfg).expect("second draw");
    let deterministic = a.left == b.left && a.right == b.right && a.gt.values == b.gt.values;
    let in_range = a.gt.values.iter().all(|&v| (0.0..24.0).contains(&v));
    let mut consistent = 0usize;
    let mut valid = 0usize;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let i = y * cfg.width + x;
            if !a.gt.valid[i] {
                continue;
            }
            valid += 1;
            let d = a.gt.values[i] as usize;
            let j = y * cfg.width + (x - d);
            if a.left.data[i * 3..i * 3 + 3] == a.right.data[j * 3..j * 3 + 3] {
                consistent += 1;
            }
        }
    }
    let frac = consistent as f64 / valid.max(1) as f64;
    let passed = deterministic && in_range && frac >= 0.99;
    CheckResult::new(
        "rds generator: determinism, d* < d_max, photometric consistency",
        passed,
        format!(
            "deterministic={deterministic}, in-range={in_range}, consistent {consistent}/{valid} ({:.1}%)",
            100.0 * frac
        ),
    )
}

/// Transposed convolution against two independent routes: a direct naive
/// scatter evaluation, and the backward pass of the matching convolution.
pub fn deconv_adjoint_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC0);
    let (n, ci, co) = (1usize, 2usize, 3usize);
    let (d, h, w) = (2usize, 3usize, 2usize);
    let x = rand_vec(&mut rng, n * ci * d * h * w);
    let wgt = rand_vec(&mut rng, ci * co * 27);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);

    let mut tape = Tape::<f64>::new();
    let xid = tape.leaf(&[n, ci, d, h, w], x.clone(), false).expect("leaf");
    let wid = tape.leaf(&[ci, co, 3, 3, 3], wgt.clone(), false).expect("leaf");
    let deconv = tape
        .conv_transpose3d(xid, wid, None, 2, 1, 1)
        .expect("deconv");
    let got = tape.value(deconv).to_vec();

    // route 1: direct scatter definition
    let mut naive = vec![0.0f64; n * co * od * oh * ow];
    for ni in 0..n {
        for c_in in 0..ci {
            for c_out in 0..co {
                for zd in 0..d {
                    for zh in 0..h {
                        for zw in 0..w {
                            let xv = x[(((ni * ci + c_in) * d + zd) * h + zh) * w + zw];
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let odd = (zd * 2 + kd) as isize - 1;
                                        let ohh = (zh * 2 + kh) as isize - 1;
                                        let oww = (zw * 2 + kw) as isize - 1;
                                        if odd < 0
                                            || ohh < 0
                                            || oww < 0
                                            || odd >= od as isize
                                            || ohh >= oh as isize
                                            || oww >= ow as isize
                                        {
                                            continue;
                                        }
                                        let wv = wgt
                                            [(((c_in * co + c_out) * 3 + kd) * 3 + kh) * 3 + kw];
                                        naive[(((ni * co + c_out) * od + odd as usize) * oh
                                            + ohh as usize)
                                            * ow
                                            + oww as usize] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut worst_naive = 0.0f64;
    for (a, b) in got.iter().zip(&naive) {
        worst_naive = worst_naive.max((a - b).abs());
    }

    // route 2: backward pass of the matching convolution applied to x
    let mut t2 = Tape::<f64>::new();
    let z = t2
        .leaf(&[n, co, od, oh, ow], vec![0.0; n * co * od * oh * ow], true)
        .expect("leaf");
    // the conv weight layout [Co'=ci, Ci'=co, k, k, k] is the very buffer
    // the deconv uses
    let w2 = t2.leaf(&[ci, co, 3, 3, 3], wgt.clone(), false).expect("leaf");
    let conv = t2.conv3d(z, w2, None, (2, 2, 2), (1, 1, 1)).expect("conv");
    let loss = t2.dot_const(conv, &x).expect("dot");
    t2.backward(loss).expect("backward");
    let adjoint = t2.grad(z).expect("grad");
    let mut worst_adj = 0.0f64;
    for (a, b) in got.iter().zip(adjoint) {
        worst_adj = worst_adj.max((a - b).abs());
    }

    let passed = worst_naive < 1e-6 && worst_adj < 1e-6;
    CheckResult::new(
        "conv_transpose3d: naive scatter + conv backward identity",
        passed,
        format!("max abs diff: naive {worst_naive:.3e}, adjoint {worst_adj:.3e} (tol 1e-6)"),
    )
}

/// Every fast suite in order. The toy-convergence and sweep checks live in
/// the acceptance tests; they train models and take minutes.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut results = vec![
        degeneracy_suite(seed),
        group_mean_suite(seed),
        oracle_suite(seed),
    ];
    results.extend(gradient_op_suite(seed, 20));
    results.push(gradient_e2e_check(seed, 6));
    results.push(deconv_adjoint_check(seed));
    results.push(shape_conformance_check());
    results.push(aux_head_identity_check(seed));
    results.push(loss_metric_values_check());
    results.extend(roundtrip_suite(seed));
    results.push(rds_consistency_check(seed));
    results
}
