// criterion-8 rehearsal: desk-scale gwc+cat, 200 train / 20 val RDS samples
use gwcstereo::config::{NetworkConfig, TrainConfig, RunConfig};
use gwcstereo::io::{generate_rds, sample_seed, SyntheticConfig};
use gwcstereo::train::train;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let density: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let iters: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let mut t = TrainConfig::desk();
    t.seed = seed;
    t.early_stop_epe = Some(1.0);
    t.max_iters = iters;
    let cfg = RunConfig { net: NetworkConfig::desk(), train: t };
    let gen = |salt: u64, n: usize| -> Vec<_> {
        (0..n).map(|i| generate_rds(&SyntheticConfig {
            height: 64, width: 128, d_max: 32, dot_density: density, max_shapes: 6,
            seed: sample_seed(1000 + salt, i as u64),
        }).unwrap()).collect()
    };
    let tr = gen(0, 200);
    let va = gen(1, 20);
    let t0 = std::time::Instant::now();
    match train::<f32>(&cfg, &tr, &va, None) {
        Ok(out) => {
            for r in &out.log {
                println!("iter {:4}  lr {:.6}  loss {:.4}  val_epe {:.4}  val_d1 {:.2}",
                    r.iteration, r.lr, r.train_loss, r.val_epe, r.val_d1);
            }
            println!("SEED {seed}: best {:.4} at iter {} after {:.1}s (early_stopped={})",
                out.best_val_epe, out.best_iteration, t0.elapsed().as_secs_f64(), out.early_stopped);
        }
        Err(e) => println!("SEED {seed}: FAILED: {e}"),
    }
}
