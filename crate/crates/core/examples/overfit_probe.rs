// capacity oracle: 1-sample overfit, EPE target < 0.5 px within 500 iters
use gwcstereo::config::{NetworkConfig, TrainConfig, RunConfig};
use gwcstereo::io::{generate_rds, sample_seed, SyntheticConfig};
use gwcstereo::train::train;

fn main() {
    let mut t = TrainConfig::desk();
    t.max_iters = 500;
    t.val_interval = 50;
    t.seed = 1;
    t.early_stop_epe = Some(0.5);
    t.lr_milestones = vec![];
    let cfg = RunConfig { net: NetworkConfig::desk(), train: t };
    let sample = generate_rds(&SyntheticConfig {
        height: 64, width: 128, d_max: 32, dot_density: 0.5, max_shapes: 6,
        seed: sample_seed(11, 0),
    }).unwrap();
    let tr = vec![sample.clone()];
    let va = vec![sample];
    let t0 = std::time::Instant::now();
    let out = train::<f32>(&cfg, &tr, &va, None).unwrap();
    for r in &out.log {
        println!("iter {:4}  loss {:.4}  val_epe {:.4}", r.iteration, r.train_loss, r.val_epe);
    }
    println!("done in {:.1}s; best {:.4} at iter {}; early_stopped={}",
        t0.elapsed().as_secs_f64(), out.best_val_epe, out.best_iteration, out.early_stopped);
}
