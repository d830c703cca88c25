//! Command-line interface: synthetic data generation, training, evaluation,
//! single-pair inference, the verification suites and the channel sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gwcstereo::config::{parse_run_config, parse_sweep_config, Precision, VolumeVariant};
use gwcstereo::io::images::{load_rgb, pad_top_right, round_up, RgbBuffer};
use gwcstereo::io::{generate_rds, kitti, manifest, pfm, sample_seed, write_gt_pfm, SyntheticConfig};
use gwcstereo::loss::{DisparityMap, MetricAccumulator, METRIC_CSV_HEADER};
use gwcstereo::model::StereoModel;
use gwcstereo::params::{Leaves, ParamStore};
use gwcstereo::tensor::{Scalar, Tape};
use gwcstereo::train::sweep::{run_sweep, sweep_csv};
use gwcstereo::train::{load_dataset, split_train_val, train};
use gwcstereo::verify::run_all;

#[derive(Parser)]
#[command(
    name = "gwcstereo",
    version,
    about = "Desk-scale stereo disparity estimation with group-wise correlation cost volumes"
)]
struct Cli {
    /// Seed for all randomness in the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic random-dot stereogram dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model from a config file and a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset manifest (metrics CSV to stdout).
    Eval(EvalArgs),
    /// Predict a disparity map for one rectified pair.
    Infer(InferArgs),
    /// Run the oracle, gradient and identity verification suites.
    Verify,
    /// Train the channel-reduction sweep and emit its CSV table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, ground truth and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Maximum disparity (exclusive) of the generated fields.
    #[arg(long, default_value_t = 32)]
    dmax: usize,
    /// Fraction of pixels carrying a colored dot.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Maximum number of rectangles/ellipses per disparity field.
    #[arg(long, default_value_t = 6)]
    max_shapes: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for best.ckpt and log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's cost-volume variant (cat, gwc, gwc-cat).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Output PFM disparity path.
    #[arg(long)]
    out: PathBuf,
    /// Optional 16-bit PNG disparity output.
    #[arg(long)]
    png16: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Config file with sweep_* keys and the shared training budget.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(&args, cli.seed),
        Command::Train(args) => do_train(&args, cli.seed),
        Command::Eval(args) => do_eval(&args),
        Command::Infer(args) => do_infer(&args),
        Command::Verify => do_verify(cli.seed),
        Command::Sweep(args) => do_sweep(&args, cli.seed),
    }
}

fn gen_data(args: &GenDataArgs, seed: u64) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut rows = Vec::new();
    for i in 0..args.count {
        let cfg = SyntheticConfig {
            height: args.height,
            width: args.width,
            d_max: args.dmax,
            dot_density: args.density,
            max_shapes: args.max_shapes,
            seed: sample_seed(seed, i as u64),
        };
        let sample = generate_rds(&cfg)?;
        let left = format!("left_{i:05}.png");
        let right = format!("right_{i:05}.png");
        let gt = format!("gt_{i:05}.pfm");
        gwcstereo::io::images::save_rgb(args.out.join(&left), &sample.left)?;
        gwcstereo::io::images::save_rgb(args.out.join(&right), &sample.right)?;
        write_gt_pfm(args.out.join(&gt), &sample.gt)?;
        rows.push((left, right, gt));
    }
    manifest::write_manifest(args.out.join("manifest.txt"), &rows)?;
    println!(
        "wrote {} samples ({}x{}, d_max {}) and manifest.txt to {}",
        args.count,
        args.height,
        args.width,
        args.dmax,
        args.out.display()
    );
    Ok(())
}

fn do_train(args: &TrainArgs, seed_flag: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(v) = &args.variant {
        cfg.net.set_variant(VolumeVariant::parse(v)?);
        cfg.validate()?;
    }
    if seed_flag != 0 {
        cfg.train.seed = seed_flag;
    }
    let entries = manifest::read_manifest(&args.data)?;
    if entries.is_empty() {
        bail!("manifest {} lists no samples", args.data.display());
    }
    let dataset = load_dataset(&entries, cfg.net.d_max)?;
    if dataset.skipped > 0 {
        eprintln!("skipped {} samples with under 10% valid pixels", dataset.skipped);
    }
    let (train_set, val_set) = split_train_val(dataset.samples);
    println!(
        "training variant {} on {} samples ({} validation), {} iterations",
        cfg.net.variant().name(),
        train_set.len(),
        val_set.len(),
        cfg.train.max_iters
    );
    let outcome = match cfg.train.precision {
        Precision::F32 => train::<f32>(&cfg, &train_set, &val_set, Some(&args.out))?,
        Precision::F64 => train::<f64>(&cfg, &train_set, &val_set, Some(&args.out))?,
    };
    println!(
        "best validation EPE {:.4} px at iteration {} ({} iterations run{})",
        outcome.best_val_epe,
        outcome.best_iteration,
        outcome.iterations_run,
        if outcome.early_stopped { ", early stop" } else { "" }
    );
    println!(
        "wrote {} and {}",
        args.out.join("best.ckpt").display(),
        args.out.join("log.csv").display()
    );
    Ok(())
}

/// Pads a pair to extents divisible by 16 (zeros on the top and the right),
/// runs the inference path, and crops the padding back off.
fn infer_pair<S: Scalar>(
    model: &StereoModel,
    ps: &mut ParamStore<S>,
    left: &RgbBuffer,
    right: &RgbBuffer,
) -> anyhow::Result<DisparityMap> {
    let (h, w) = (left.height, left.width);
    let (ph, pw) = (round_up(h, 16), round_up(w, 16));
    let left_p = pad_top_right(left, ph, pw);
    let right_p = pad_top_right(right, ph, pw);
    let mut tape = Tape::<S>::new();
    let mut lv = Leaves::new(ps, false);
    let l = tape.leaf(
        &[1, 3, ph, pw],
        left_p.to_chw(model.cfg.norm_mean, model.cfg.norm_std),
        false,
    )?;
    let r = tape.leaf(
        &[1, 3, ph, pw],
        right_p.to_chw(model.cfg.norm_mean, model.cfg.norm_std),
        false,
    )?;
    let pred = model.forward_infer(&mut tape, ps, &mut lv, l, r)?;
    let full = tape.value(pred);
    let top = ph - h;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v = full[(top + y) * pw + x];
            values.push(v.to_f64().unwrap_or(f64::NAN) as f32);
        }
    }
    Ok(DisparityMap::dense(h, w, values))
}

fn do_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (model, mut ps) = gwcstereo::checkpoint::load_model::<f32>(&args.ckpt)?;
    let entries = manifest::read_manifest(&args.data)?;
    let mut acc = MetricAccumulator::new();
    let mut skipped = 0usize;
    let mut used = 0usize;
    for entry in &entries {
        let (sample, passes) = gwcstereo::io::load_sample(entry, model.cfg.d_max)?;
        if !passes {
            skipped += 1;
            continue;
        }
        let pred = infer_pair(&model, &mut ps, &sample.left, &sample.right)?;
        acc.add(&pred, &sample.gt)?;
        used += 1;
    }
    let report = acc.report()?;
    println!("{METRIC_CSV_HEADER}");
    println!("{}", report.to_csv_row());
    eprintln!("evaluated {used} images, skipped {skipped} with under 10% valid pixels");
    Ok(())
}

fn do_infer(args: &InferArgs) -> anyhow::Result<()> {
    let (model, mut ps) = gwcstereo::checkpoint::load_model::<f32>(&args.ckpt)?;
    let left = load_rgb(&args.left)?;
    let right = load_rgb(&args.right)?;
    if left.height != right.height || left.width != right.width {
        bail!(
            "image size mismatch: left {}x{}, right {}x{}",
            left.height,
            left.width,
            right.height,
            right.width
        );
    }
    let pred = infer_pair(&model, &mut ps, &left, &right)?;
    pfm::write_pfm(
        &args.out,
        &pfm::PfmImage {
            width: pred.width,
            height: pred.height,
            channels: 1,
            scale: -1.0,
            data: pred.values.clone(),
        },
    )?;
    println!("wrote {}", args.out.display());
    if let Some(p) = &args.png16 {
        kitti::write_disparity_png(p, &pred)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn do_verify(seed: u64) -> anyhow::Result<()> {
    let results = run_all(seed);
    let mut failed = 0usize;
    for r in &results {
        println!(
            "{} {} - {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} checks run, {} failed", results.len(), failed);
    if failed > 0 {
        bail!("{failed} verification checks failed");
    }
    Ok(())
}

fn do_sweep(args: &SweepArgs, seed_flag: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let (mut cfg, settings) = parse_sweep_config(&text)?;
    if seed_flag != 0 {
        cfg.train.seed = seed_flag;
    }
    let rows = match cfg.train.precision {
        Precision::F32 => run_sweep::<f32>(&cfg, &settings)?,
        Precision::F64 => run_sweep::<f64>(&cfg, &settings)?,
    };
    let csv = sweep_csv(&rows);
    if let Some(parent) = Path::new(&args.out).parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, &csv)?;
    print!("{csv}");
    println!("wrote {}", args.out.display());
    Ok(())
}
