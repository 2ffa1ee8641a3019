use std::time::Instant;
fn main() {
    let cfg = routemark::config::ExperimentConfig::default();
    let features = routemark::features::PerceptualFeatures::build(&cfg.train.features, 32).unwrap();
    let mut system = routemark::system::System::build(&cfg).unwrap();
    let oc = routemark::optim::AdamWConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() };
    let mut ob = routemark::optim::AdamW::new(oc);
    let mut oe = routemark::optim::AdamW::new(oc);
    // warmup
    for step in 0..3 {
        routemark::training::train_step(&mut system, &mut ob, &mut oe, &features, &cfg, step).unwrap();
    }
    let t0 = Instant::now();
    let n = 30;
    for step in 3..3+n {
        routemark::training::train_step(&mut system, &mut ob, &mut oe, &features, &cfg, step).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{} steps in {:.2}s => {:.1} ms/step => 3000 steps ~ {:.1} min", n, dt, dt/n as f64*1000.0, dt/n as f64*3000.0/60.0);
}
