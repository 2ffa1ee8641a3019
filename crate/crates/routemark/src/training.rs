//! Joint training of the adapter bank and extractor.
//!
//! Each step samples one key for the batch (one key per generation
//! session), renders clean/marked pairs from shared latents, applies a
//! random augmentation inside the verifiability loss only, and minimizes
//! `L_ver + lambda * L_imp` over the bank and extractor. The backbone is
//! frozen: its weights enter every tape as constants, so it can receive
//! no gradient by construction. Expectation over keys is realized by
//! per-batch key resampling (Monte-Carlo estimation).
//!
//! All randomness is derived from (seed, purpose, step/sample index), so
//! batch elements can run on worker threads while results reduce in index
//! order, and a resumed run reproduces an uninterrupted one bit-exactly.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::distort::{apply_traced, DistortError, Distortion};
use crate::features::PerceptualFeatures;
use crate::generator::{forward_clean, forward_marked, GeneratorInput};
use crate::key::sample_key_with;
use crate::optim::{accumulate_grad, AdamW, AdamWConfig, Gradients};
use crate::rng::{derive_seed, stream, TAG_AUG, TAG_DATA, TAG_EVAL, TAG_KEY};
use crate::system::{evaluate_clean, System, SystemError};
use crate::tape::{stable_sigmoid, Tape};
use crate::tensor::{EngineError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step}: {source}")]
    Step { step: usize, source: EngineError },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One appended training-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_imp: f32,
    pub l_ver: f32,
    /// Un-augmented decode accuracy of this batch against its key.
    pub bit_acc: f64,
    /// Mean per-sample PSNR(marked, clean) of this batch.
    pub psnr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,l_imp,l_ver,bit_acc,psnr";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.4},{:.3}", self.step, self.l_imp, self.l_ver, self.bit_acc, self.psnr)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub final_step: usize,
    pub early_stopped: bool,
}

pub struct TrainOutput {
    pub system: System,
    pub opt_bank: AdamW,
    pub opt_ext: AdamW,
    pub outcome: TrainOutcome,
}

/// Stable mean binary cross-entropy between logits and key bits.
pub fn loss_ver_value(logits: &[f32], key: &crate::key::WatermarkKey) -> f32 {
    assert_eq!(logits.len(), key.len(), "logit/key length mismatch");
    let s: f32 = logits
        .iter()
        .zip(key.bits())
        .map(|(&u, &b)| u.max(0.0) - f32::from(b) * u + (-u.abs()).exp().ln_1p())
        .sum();
    s / logits.len() as f32
}

/// Uniform draw over the augmentation schedule: identity, crop 10-50%,
/// rotate +-25 deg, resize 0.3-0.7x, brightness 1-2x, JPEG proxy q in
/// {50, 80}, Gaussian noise sigma <= 0.05.
pub fn sample_augmentation<R: Rng>(rng: &mut R) -> Distortion {
    match rng.gen_range(0..7u32) {
        0 => Distortion::Identity,
        1 => Distortion::Crop { area_fraction: rng.gen_range(0.1..=0.5) },
        2 => Distortion::Rotate { degrees: rng.gen_range(-25.0..=25.0) },
        3 => Distortion::Resize { scale: rng.gen_range(0.3..=0.7) },
        4 => Distortion::Brightness { factor: rng.gen_range(1.0..=2.0) },
        5 => Distortion::JpegProxy { quality: if rng.gen::<bool>() { 50 } else { 80 } },
        _ => Distortion::GaussianNoise { sigma: rng.gen_range(0.0..=0.05) },
    }
}

struct SamplePlan {
    input: GeneratorInput,
    distortion: Distortion,
    noise_seed: u64,
}

struct SampleResult {
    l_ver: f32,
    l_imp: f32,
    mse: f32,
    clean_matches: usize,
    bank_grads: Vec<(usize, Tensor)>,
    ext_grads: Vec<(usize, Tensor)>,
}

/// One optimization step. Gradients exist only for the extractor and the
/// markers on the sampled routing path; everything else is untouched.
pub fn train_step(
    system: &mut System,
    opt_bank: &mut AdamW,
    opt_ext: &mut AdamW,
    features: &PerceptualFeatures,
    cfg: &ExperimentConfig,
    step: usize,
) -> Result<StepRecord, TrainError> {
    let tcfg = &cfg.train;
    let m = system.key_bits();
    let mut key_rng = stream(cfg.seed, TAG_KEY, step as u64);
    let key = sample_key_with(m, &mut key_rng);
    let path = system.path_for_key(&key).map_err(SystemError::from)?;
    let key_f: Vec<f32> = key.bits().iter().map(|&b| f32::from(b)).collect();

    let plans: Vec<SamplePlan> = (0..tcfg.batch_size)
        .map(|i| {
            let idx = (step * tcfg.batch_size + i) as u64;
            let mut data_rng = stream(cfg.seed, TAG_DATA, idx);
            let input = GeneratorInput::sample(&system.backbone.cfg, &mut data_rng);
            let distortion = if tcfg.augment && step >= tcfg.aug_warmup_steps {
                let mut aug_rng = stream(cfg.seed, TAG_AUG, idx);
                sample_augmentation(&mut aug_rng)
            } else {
                Distortion::Identity
            };
            SamplePlan { input, distortion, noise_seed: derive_seed(cfg.seed, TAG_AUG, idx ^ 0xa11ce) }
        })
        .collect();

    let backbone = &system.backbone;
    let bank = &system.bank;
    let extractor = &system.extractor;
    let lambda = tcfg.lambda;

    let per_sample: Vec<Result<SampleResult, EngineError>> = plans
        .par_iter()
        .map(|plan| {
            let mut tape = Tape::new();
            let clean = forward_clean(backbone, &mut tape, &plan.input)?;
            let (marked, bank_traced) =
                forward_marked(backbone, &mut tape, bank, &path, &plan.input, true)?;
            let mut noise_rng = stream(plan.noise_seed, TAG_AUG, 1);
            let augmented = apply_traced(&mut tape, marked, &plan.distortion, &mut noise_rng)
                .map_err(|e| match e {
                    DistortError::Engine(e) => e,
                    DistortError::OutOfRange(s) => EngineError::Invalid(s),
                })?;
            let (logits, ext_traced) = extractor.forward_traced(&mut tape, augmented, true)?;
            let l_ver = tape.bce_with_logits(logits, &key_f)?;
            let l_imp = features.loss_traced(&mut tape, marked, clean)?;
            let weighted = tape.scale(l_imp, lambda)?;
            let loss = tape.add(l_ver, weighted)?;

            // Side observations, not attached to the loss: un-augmented
            // decode and the raw pixel MSE.
            let (clean_logits, _) = extractor.forward_traced(&mut tape, marked, false)?;
            let clean_matches = tape
                .value(clean_logits)
                .data()
                .iter()
                .zip(key.bits())
                .filter(|(&u, &b)| u8::from(stable_sigmoid(u) >= 0.5) == b)
                .count();
            let pix_mse = tape.mse(marked, clean)?;
            let mse = tape.value(pix_mse).data()[0];

            tape.backward(loss)?;

            let mut bank_grads = Vec::with_capacity(bank_traced.entries.len());
            for &(slot, var) in &bank_traced.entries {
                if let Some(g) = tape.grad(var) {
                    bank_grads.push((slot, g.clone()));
                }
            }
            let mut ext_grads = Vec::with_capacity(ext_traced.entries.len());
            for &(slot, var) in &ext_traced.entries {
                if let Some(g) = tape.grad(var) {
                    ext_grads.push((slot, g.clone()));
                }
            }
            Ok(SampleResult {
                l_ver: tape.value(l_ver).data()[0],
                l_imp: tape.value(l_imp).data()[0],
                mse,
                clean_matches,
                bank_grads,
                ext_grads,
            })
        })
        .collect();

    let batch = tcfg.batch_size as f32;
    let mut bank_grads = Gradients::new();
    let mut ext_grads = Gradients::new();
    let (mut l_ver, mut l_imp, mut bits, mut psnr_sum) = (0.0f32, 0.0f32, 0usize, 0.0f64);
    for r in per_sample {
        let r = r.map_err(|source| TrainError::Step { step, source })?;
        l_ver += r.l_ver / batch;
        l_imp += r.l_imp / batch;
        bits += r.clean_matches;
        psnr_sum += if r.mse > 0.0 { (10.0 * (1.0 / f64::from(r.mse)).log10()).min(100.0) } else { 100.0 };
        for (slot, g) in &r.bank_grads {
            accumulate_grad(&mut bank_grads, *slot, g, batch);
        }
        for (slot, g) in &r.ext_grads {
            accumulate_grad(&mut ext_grads, *slot, g, batch);
        }
    }
    opt_bank.step(&mut system.bank.store, &bank_grads).map_err(|source| TrainError::Step { step, source })?;
    opt_ext.step(&mut system.extractor.store, &ext_grads).map_err(|source| TrainError::Step { step, source })?;

    Ok(StepRecord {
        step,
        l_imp,
        l_ver,
        bit_acc: bits as f64 / (f64::from(batch) * m as f64),
        psnr: psnr_sum / f64::from(batch),
    })
}

fn optimizer_pair(cfg: &ExperimentConfig) -> (AdamW, AdamW) {
    let oc = AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: 1e-8,
    };
    (AdamW::new(oc), AdamW::new(oc))
}

pub fn checkpoint_path(out_dir: &Path) -> std::path::PathBuf {
    out_dir.join("checkpoint.rmk")
}

pub fn train_log_path(out_dir: &Path) -> std::path::PathBuf {
    out_dir.join("train_log.csv")
}

fn write_log(out_dir: &Path, records: &[StepRecord]) -> Result<(), TrainError> {
    let mut text = String::from(TRAIN_LOG_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(train_log_path(out_dir), text)?;
    Ok(())
}

fn run_loop(
    mut system: System,
    mut opt_bank: AdamW,
    mut opt_ext: AdamW,
    start_step: usize,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let features = PerceptualFeatures::build(&cfg.train.features, cfg.backbone.image_size)?;
    let mut outcome = TrainOutcome::default();
    outcome.final_step = start_step;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let es = &cfg.train.early_stop;
    for step in start_step..cfg.train.steps {
        let record = train_step(&mut system, &mut opt_bank, &mut opt_ext, &features, cfg, step)?;
        outcome.records.push(record);
        let done = step + 1;
        outcome.final_step = done;
        if let Some(dir) = out_dir {
            if cfg.train.checkpoint_interval > 0 && done % cfg.train.checkpoint_interval == 0 {
                system.save(&checkpoint_path(dir), done as u64, Some(&opt_bank), Some(&opt_ext))?;
            }
        }
        if es.enabled && done >= es.min_steps && done % es.eval_interval == 0 {
            let stats =
                evaluate_clean(&system, es.eval_samples, derive_seed(cfg.seed, TAG_EVAL, done as u64))?;
            if stats.bit_acc >= f64::from(es.bit_acc) && stats.mean_psnr >= f64::from(es.psnr) {
                outcome.early_stopped = true;
                break;
            }
        }
    }
    if let Some(dir) = out_dir {
        system.save(&checkpoint_path(dir), outcome.final_step as u64, Some(&opt_bank), Some(&opt_ext))?;
        write_log(dir, &outcome.records)?;
    }
    Ok(TrainOutput { system, opt_bank, opt_ext, outcome })
}

/// Trains a fresh system under the given experiment config.
pub fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutput, TrainError> {
    let system = System::build(cfg)?;
    let (opt_bank, opt_ext) = optimizer_pair(cfg);
    run_loop(system, opt_bank, opt_ext, 0, cfg, out_dir)
}

/// Resumes training from a checkpoint written by [`train`]; with the same
/// config and seed this reproduces the uninterrupted run bit-exactly.
pub fn train_resumed(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let container = crate::checkpoint::Container::load(checkpoint).map_err(SystemError::from)?;
    let (system, step) = System::from_container(&container, cfg)?;
    let (mut opt_bank, mut opt_ext) = optimizer_pair(cfg);
    System::load_optimizers(&container, &mut opt_bank, &mut opt_ext)?;
    run_loop(system, opt_bank, opt_ext, step as usize, cfg, out_dir)
}
