use routemark::optim::ParamRef;
fn main() {
    let mut cfg = routemark::config::ExperimentConfig::default();
    cfg.train.augment = false;
    cfg.train.early_stop.enabled = false;
    let features = routemark::features::PerceptualFeatures::build(&cfg.train.features, 32).unwrap();
    let mut system = routemark::system::System::build(&cfg).unwrap();
    let oc = routemark::optim::AdamWConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() };
    let mut ob = routemark::optim::AdamW::new(oc);
    let mut oe = routemark::optim::AdamW::new(oc);
    let b_norm = |sys: &routemark::system::System| -> f32 {
        let mut s = 0.0f32; let mut n = 0usize;
        for i in 0..sys.bank.store.len() {
            let name = sys.bank.store.name(ParamRef(i)).to_string();
            if name.ends_with(".b") {
                let t = sys.bank.store.get(ParamRef(i));
                s += t.data().iter().map(|x| x*x).sum::<f32>();
                n += t.numel();
            }
        }
        (s / n as f32).sqrt()
    };
    for step in 0..400 {
        routemark::training::train_step(&mut system, &mut ob, &mut oe, &features, &cfg, step).unwrap();
        if (step + 1) % 50 == 0 {
            // logits spread on fresh images
            let mut rng = routemark::rng::stream(7, 3, step as u64);
            let key = routemark::key::sample_key(16, step as u64);
            let input = routemark::generator::GeneratorInput::sample(&system.backbone.cfg, &mut rng);
            let img = system.render_marked(&key, &input).unwrap();
            let logits = system.extractor.extract_logits(&img).unwrap();
            let lmean = logits.iter().sum::<f32>() / 16.0;
            let lstd = (logits.iter().map(|x| (x-lmean)*(x-lmean)).sum::<f32>() / 16.0).sqrt();
            println!("step {:3}  B_rms {:.5}  logit_mean {:+.3} logit_std {:.3}", step+1, b_norm(&system), lmean, lstd);
        }
    }
}
