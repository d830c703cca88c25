// throughput probe: desk-scale iterations/sec
use gwcstereo::config::{NetworkConfig, TrainConfig, RunConfig};
use gwcstereo::io::{generate_rds, sample_seed, SyntheticConfig};
use gwcstereo::train::train;

fn main() {
    let cfg = RunConfig { net: NetworkConfig::desk(), train: {
        let mut t = TrainConfig::desk();
        t.max_iters = 12;
        t.val_interval = 12;
        t.seed = 1;
        t
    }};
    let samples: Vec<_> = (0..8).map(|i| generate_rds(&SyntheticConfig {
        height: 64, width: 128, d_max: 32, dot_density: 0.5, max_shapes: 6,
        seed: sample_seed(7, i),
    }).unwrap()).collect();
    let (tr, va) = (samples[..6].to_vec(), samples[6..].to_vec());
    let t0 = std::time::Instant::now();
    let out = train::<f32>(&cfg, &tr, &va, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("12 iters in {:.2}s -> {:.3}s/iter; val_epe {:.3}; params {}",
        dt, dt / 12.0, out.best_val_epe, out.trainable_params);
}
