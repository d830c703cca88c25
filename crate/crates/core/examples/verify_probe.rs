fn main() {
    let t0 = std::time::Instant::now();
    let results = gwcstereo::verify::run_all(17);
    let mut fails = 0;
    for r in &results {
        println!("{} {} - {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed { fails += 1; }
    }
    println!("{} checks, {} failed, {:.1}s", results.len(), fails, t0.elapsed().as_secs_f64());
}
