use std::time::Instant;
fn main() {
    let mut cfg = routemark::config::ExperimentConfig::default();
    let args: Vec<String> = std::env::args().collect();
    // args: [steps] [gain] [lambda] [augment] [seed]
    if args.len() > 1 { cfg.train.steps = args[1].parse().unwrap(); }
    if args.len() > 2 { cfg.train.features.gain = args[2].parse().unwrap(); }
    if args.len() > 3 { cfg.train.lambda = args[3].parse().unwrap(); }
    if args.len() > 4 { cfg.train.augment = args[4].parse().unwrap(); }
    if args.len() > 5 { cfg.seed = args[5].parse().unwrap(); }
    cfg.train.early_stop.enabled = false;
    let features = routemark::features::PerceptualFeatures::build(&cfg.train.features, 32).unwrap();
    let mut system = routemark::system::System::build(&cfg).unwrap();
    let oc = routemark::optim::AdamWConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() };
    let mut ob = routemark::optim::AdamW::new(oc);
    let mut oe = routemark::optim::AdamW::new(oc);
    let t0 = Instant::now();
    for step in 0..cfg.train.steps {
        let r = routemark::training::train_step(&mut system, &mut ob, &mut oe, &features, &cfg, step).unwrap();
        if (step + 1) % 100 == 0 {
            let stats = routemark::system::evaluate_clean(&system, 32, 999).unwrap();
            println!("step {:4}  l_imp {:8.4}  l_ver {:8.4}  batch_acc {:.3}  batch_psnr {:5.1}  | eval acc {:.4} psnr {:5.2}  [{:.0}s]",
                step + 1, r.l_imp, r.l_ver, r.bit_acc, r.psnr, stats.bit_acc, stats.mean_psnr, t0.elapsed().as_secs_f64());
        }
    }
}
