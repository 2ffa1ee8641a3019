//! Robustness battery: parametric distortions, averaging removal/forgery,
//! white-box PGD on the extractor, a blur-denoise regeneration proxy, the
//! block-perturbation flip probe, and the full-knowledge retraining
//! experiment.

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::distort::{apply_distortion, Distortion};
use crate::extractor::Extractor;
use crate::generator::GeneratorInput;
use crate::key::WatermarkKey;
use crate::metrics::{mse, psnr, ssim};
use crate::rng::{derive_seed, stream, TAG_ATTACK, TAG_PROBE};
use crate::system::System;
use crate::tape::Tape;
use crate::tensor::{EngineError, Tensor};
use crate::training::{train, TrainError, TrainOutput};
use crate::verify::{detect_decoded, DetectionReport, VerifyError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Distort(#[from] crate::distort::DistortError),
    #[error(transparent)]
    System(#[from] crate::system::SystemError),
    #[error("{0}")]
    Insufficient(String),
    #[error("pgd epsilon must be positive, got {0}")]
    BadEpsilon(f32),
}

// -- White-box PGD removal ---------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PgdConfig {
    /// MSE budget relative to the reference image.
    pub epsilon: f32,
    pub steps: usize,
    /// Per-step RMS perturbation; defaults to 2 sqrt(eps) / steps.
    pub step_size: Option<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub image: Tensor,
    /// Removal loss after each iteration.
    pub loss_trace: Vec<f32>,
    pub report: DetectionReport,
    /// True when the verifier no longer declares the watermark.
    pub success: bool,
    pub final_mse: f64,
}

/// Removal loss value (1/M) sum (p_i - 1/2)^2 for given logits.
pub fn removal_loss(logits: &[f32]) -> f32 {
    let m = logits.len() as f32;
    logits
        .iter()
        .map(|&u| {
            let p = crate::tape::stable_sigmoid(u);
            (p - 0.5) * (p - 0.5)
        })
        .sum::<f32>()
        / m
}

/// Gradient descent on the removal loss with an L2 (MSE-ball) projection
/// and pixel clamping. Uses true gradients, normalized to a fixed RMS step.
pub fn pgd_removal(
    extractor: &Extractor,
    reference: &Tensor,
    key: &WatermarkKey,
    target_fpr: f64,
    cfg: &PgdConfig,
) -> Result<PgdResult, AttackError> {
    if cfg.epsilon <= 0.0 {
        return Err(AttackError::BadEpsilon(cfg.epsilon));
    }
    let eps = f64::from(cfg.epsilon);
    let step_rms = f64::from(cfg.step_size.unwrap_or(2.0 * cfg.epsilon.sqrt() / cfg.steps.max(1) as f32));
    let n = reference.numel() as f64;
    let m = extractor.key_bits() as f32;
    let mut x = reference.clone();
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x_id = tape.param(x.clone())?;
        let (logits, _) = extractor.forward_traced(&mut tape, x_id, false)?;
        let probs = tape.sigmoid(logits)?;
        let half = tape.constant(Tensor::full(&[extractor.key_bits()], 0.5))?;
        let diff = tape.sub(probs, half)?;
        let ss = tape.sum_squares(diff)?;
        let loss = tape.scale(ss, 1.0 / m)?;
        trace.push(tape.value(loss).data()[0]);
        tape.backward(loss)?;
        let Some(g) = tape.grad(x_id) else { break };
        let gnorm: f64 = g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            break;
        }
        // Descend with per-pixel RMS magnitude `step_rms`, then project
        // back into the MSE ball and the pixel box.
        let scale = (step_rms * n.sqrt() / gnorm) as f32;
        for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
            *xv -= scale * gv;
        }
        let cur_mse: f64 = x
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum::<f64>()
            / n;
        if cur_mse > eps {
            let shrink = ((eps / cur_mse).sqrt() * (1.0 - 1e-5)) as f32;
            for (xv, rv) in x.data_mut().iter_mut().zip(reference.data()) {
                *xv = rv + (*xv - rv) * shrink;
            }
        }
        for v in x.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    let decoded = extractor.extract_key(&x)?;
    let report = detect_decoded(&decoded, key, target_fpr)?;
    let final_mse = mse(&x, reference)?;
    Ok(PgdResult { image: x, loss_trace: trace, success: !report.watermarked, report, final_mse })
}

/// MSE bound equivalent to a PSNR floor: eps = 10^(-psnr/10).
pub fn psnr_to_mse_bound(psnr_db: f64) -> f64 {
    assert!(psnr_db > 0.0, "psnr bound must be positive");
    10f64.powf(-psnr_db / 10.0)
}

// -- Averaging attacks --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingMode {
    Removal,
    Forgery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingAccess {
    /// Paired clean generations are available.
    GreyBox,
    /// Only watermarked outputs; the content estimate is the global mean.
    BlackBox,
}

/// Estimates the additive watermark pattern from k watermarked images.
pub fn estimate_watermark(
    watermarked: &[Tensor],
    clean_paired: Option<&[Tensor]>,
    access: AveragingAccess,
) -> Result<Tensor, AttackError> {
    if watermarked.len() < 2 {
        return Err(AttackError::Insufficient(format!(
            "averaging needs k >= 2 images, got {}",
            watermarked.len()
        )));
    }
    let shape = watermarked[0].shape().to_vec();
    let numel = watermarked[0].numel();
    let mut mean_wm = vec![0.0f64; numel];
    for img in watermarked {
        if img.shape() != shape.as_slice() {
            return Err(AttackError::Insufficient("averaging images differ in shape".into()));
        }
        for (m, &v) in mean_wm.iter_mut().zip(img.data()) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean_wm {
        *m /= watermarked.len() as f64;
    }
    match access {
        AveragingAccess::GreyBox => {
            let clean = clean_paired.ok_or_else(|| {
                AttackError::Insufficient("grey-box averaging needs paired clean images".into())
            })?;
            if clean.len() != watermarked.len() {
                return Err(AttackError::Insufficient(format!(
                    "grey-box pairing mismatch: {} watermarked vs {} clean",
                    watermarked.len(),
                    clean.len()
                )));
            }
            let mut mean_clean = vec![0.0f64; numel];
            for img in clean {
                for (m, &v) in mean_clean.iter_mut().zip(img.data()) {
                    *m += f64::from(v);
                }
            }
            for m in &mut mean_clean {
                *m /= clean.len() as f64;
            }
            let est: Vec<f32> =
                mean_wm.iter().zip(&mean_clean).map(|(w, c)| (w - c) as f32).collect();
            Ok(Tensor::new(shape, est)?)
        }
        AveragingAccess::BlackBox => {
            // Subtract the per-channel global mean pixel; image content is
            // assumed to average out over diverse prompts.
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            let mut channel_mean = vec![0.0f64; c];
            for ci in 0..c {
                channel_mean[ci] =
                    mean_wm[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
            let est: Vec<f32> = mean_wm
                .iter()
                .enumerate()
                .map(|(i, w)| (w - channel_mean[i / hw]) as f32)
                .collect();
            Ok(Tensor::new(shape, est)?)
        }
    }
}

/// Applies the estimate: removal subtracts it from watermarked targets,
/// forgery adds it to clean targets. Outputs are clamped to [0,1].
pub fn averaging_attack(
    targets: &[Tensor],
    estimate: &Tensor,
    mode: AveragingMode,
) -> Result<Vec<Tensor>, AttackError> {
    let sign = match mode {
        AveragingMode::Removal => -1.0f32,
        AveragingMode::Forgery => 1.0f32,
    };
    targets
        .iter()
        .map(|t| {
            if t.shape() != estimate.shape() {
                return Err(AttackError::Insufficient("target/estimate shape mismatch".into()));
            }
            let data = t
                .data()
                .iter()
                .zip(estimate.data())
                .map(|(x, w)| (x + sign * w).clamp(0.0, 1.0))
                .collect();
            Ok(Tensor::new(t.shape().to_vec(), data)?)
        })
        .collect()
}

// -- Regeneration proxy --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegenStrength {
    Off,
    Weak,
    Medium,
    Strong,
}

impl RegenStrength {
    fn params(self) -> Option<(f32, f32)> {
        match self {
            RegenStrength::Off => None,
            RegenStrength::Weak => Some((0.02, 0.5)),
            RegenStrength::Medium => Some((0.05, 0.9)),
            RegenStrength::Strong => Some((0.10, 1.4)),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RegenStrength::Off => "off",
            RegenStrength::Weak => "weak",
            RegenStrength::Medium => "medium",
            RegenStrength::Strong => "strong",
        }
    }
}

/// Stand-in for diffusion regeneration: inject Gaussian noise, then
/// denoise with a Gaussian blur. Deterministic per seed.
pub fn regeneration_proxy(image: &Tensor, strength: RegenStrength, seed: u64) -> Result<Tensor, AttackError> {
    let Some((sigma_noise, sigma_blur)) = strength.params() else {
        return Ok(image.clone());
    };
    let noisy = apply_distortion(image, &Distortion::GaussianNoise { sigma: sigma_noise }, seed)?;
    Ok(apply_distortion(&noisy, &Distortion::Blur { sigma: sigma_blur }, seed)?)
}

// -- Flip probe -----------------------------------------------------------------

/// Row-major L x M matrix of bit-flip frequencies over the prompt set.
#[derive(Debug, Clone)]
pub struct FlipMatrix {
    pub units: usize,
    pub key_bits: usize,
    pub prompts: usize,
    freq: Vec<f32>,
}

impl FlipMatrix {
    pub fn frequency(&self, unit: usize, bit: usize) -> f32 {
        self.freq[unit * self.key_bits + bit]
    }

    /// For each bit, how many distinct blocks flipped it at least once.
    pub fn blocks_flipping_each_bit(&self) -> Vec<usize> {
        (0..self.key_bits)
            .map(|j| (0..self.units).filter(|&b| self.frequency(b, j) > 0.0).count())
            .collect()
    }

    /// CSV grid: header bit0..bitM-1, one row per routed unit.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit");
        for j in 0..self.key_bits {
            s.push_str(&format!(",bit{j}"));
        }
        s.push('\n');
        for b in 0..self.units {
            s.push_str(&b.to_string());
            for j in 0..self.key_bits {
                s.push_str(&format!(",{:.4}", self.frequency(b, j)));
            }
            s.push('\n');
        }
        s
    }
}

fn randomized_like<R: Rng>(t: &Tensor, rng: &mut R) -> Tensor {
    // Scale-matched random replacement: same shape, std equal to the RMS
    // of the original values (fallback to the adapter init scale).
    let rms = (t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()
        / t.numel().max(1) as f64)
        .sqrt() as f32;
    let std = if rms > 0.0 { rms } else { 0.02 };
    Tensor::randn(t.shape(), std, rng)
}

/// Block-perturbation probe over a chosen set of routed units: randomize
/// the active adapter of one unit at a time, re-render with the unchanged
/// routing path, and record which decoded bits flip relative to the key.
/// Adapter weights are restored bit-exactly afterwards.
pub fn flip_probe_units(
    system: &mut System,
    key: &WatermarkKey,
    prompts: &[GeneratorInput],
    units: &[usize],
    seed: u64,
) -> Result<FlipMatrix, AttackError> {
    let m = system.key_bits();
    let path = system.path_for_key(key).map_err(crate::system::SystemError::from)?;
    let mut counts = vec![0u32; units.len() * m];
    for (pi, input) in prompts.iter().enumerate() {
        for (row, &unit) in units.iter().enumerate() {
            let slot = system.bank.slot(unit, path.indices()[unit]);
            let saved_a = system.bank.store.get(slot.a).clone();
            let saved_b = system.bank.store.get(slot.b).clone();
            let mut rng = stream(seed, TAG_PROBE, (pi * units.len() + row) as u64);
            *system.bank.store.get_mut(slot.a) = randomized_like(&saved_a, &mut rng);
            *system.bank.store.get_mut(slot.b) = randomized_like(&saved_b, &mut rng);

            let image = crate::generator::render_marked(&system.backbone, &system.bank, &path, input)?;
            let decoded = system.extractor.extract_key(&image)?;

            *system.bank.store.get_mut(slot.a) = saved_a;
            *system.bank.store.get_mut(slot.b) = saved_b;

            for (j, (&db, &kb)) in decoded.bits().iter().zip(key.bits()).enumerate() {
                if db != kb {
                    counts[row * m + j] += 1;
                }
            }
        }
    }
    let denom = prompts.len().max(1) as f32;
    Ok(FlipMatrix {
        units: units.len(),
        key_bits: m,
        prompts: prompts.len(),
        freq: counts.iter().map(|&c| c as f32 / denom).collect(),
    })
}

/// Probes every routed unit.
pub fn flip_probe(
    system: &mut System,
    key: &WatermarkKey,
    prompts: &[GeneratorInput],
    seed: u64,
) -> Result<FlipMatrix, AttackError> {
    let units: Vec<usize> = (0..system.bank.units()).collect();
    flip_probe_units(system, key, prompts, &units, seed)
}

/// Randomizes the active adapters of every routed unit simultaneously and
/// returns the mean bit accuracy over the prompts (weights restored).
pub fn full_randomization_accuracy(
    system: &mut System,
    key: &WatermarkKey,
    prompts: &[GeneratorInput],
    seed: u64,
) -> Result<f64, AttackError> {
    let m = system.key_bits();
    let path = system.path_for_key(key).map_err(crate::system::SystemError::from)?;
    let saved: Vec<(crate::optim::ParamRef, Tensor)> = (0..system.bank.units())
        .flat_map(|u| {
            let s = system.bank.slot(u, path.indices()[u]);
            [(s.a, system.bank.store.get(s.a).clone()), (s.b, system.bank.store.get(s.b).clone())]
        })
        .collect();
    let mut rng = stream(seed, TAG_PROBE, u64::MAX);
    for (r, _) in &saved {
        let t = system.bank.store.get(*r).clone();
        *system.bank.store.get_mut(*r) = randomized_like(&t, &mut rng);
    }
    let mut acc = 0.0f64;
    let result = (|| -> Result<(), AttackError> {
        for input in prompts {
            let image = crate::generator::render_marked(&system.backbone, &system.bank, &path, input)?;
            let decoded = system.extractor.extract_key(&image)?;
            let matches = m - decoded.hamming_distance(key).map_err(VerifyError::from)?;
            acc += matches as f64 / m as f64;
        }
        Ok(())
    })();
    for (r, t) in saved {
        *system.bank.store.get_mut(r) = t;
    }
    result?;
    Ok(acc / prompts.len().max(1) as f64)
}

// -- Full-knowledge retraining ----------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CrossExtractionReport {
    /// Defender extractor on attacker-generated images.
    pub defender_on_attacker: f64,
    /// Attacker extractor on defender-generated images.
    pub attacker_on_defender: f64,
    pub defender_control: f64,
    pub attacker_control: f64,
}

fn accuracy_of(
    extractor: &Extractor,
    producer: &System,
    probes: usize,
    seed: u64,
) -> Result<f64, AttackError> {
    let m = producer.key_bits();
    let mut acc = 0.0f64;
    for i in 0..probes {
        let mut rng = stream(seed, TAG_ATTACK, i as u64);
        let key = crate::key::sample_key_with(m, &mut rng);
        let input = GeneratorInput::sample(&producer.backbone.cfg, &mut rng);
        let image = producer.render_marked(&key, &input)?;
        let decoded = extractor.extract_key(&image)?;
        let matches = m - decoded.hamming_distance(&key).map_err(VerifyError::from)?;
        acc += matches as f64 / m as f64;
    }
    Ok(acc / probes.max(1) as f64)
}

/// Trains an independent system under `attacker_cfg` (different seed /
/// data stream) and cross-evaluates both extractors.
pub fn full_knowledge_attack(
    defender: &System,
    attacker_cfg: &ExperimentConfig,
    probes: usize,
    seed: u64,
) -> Result<(TrainOutput, CrossExtractionReport), TrainError> {
    let attacker = train(attacker_cfg, None)?;
    let report = cross_extraction_report(defender, &attacker.system, probes, seed)
        .map_err(|e| TrainError::Engine(EngineError::Invalid(e.to_string())))?;
    Ok((attacker, report))
}

pub fn cross_extraction_report(
    defender: &System,
    attacker: &System,
    probes: usize,
    seed: u64,
) -> Result<CrossExtractionReport, AttackError> {
    Ok(CrossExtractionReport {
        defender_on_attacker: accuracy_of(&defender.extractor, attacker, probes, derive_seed(seed, 1, 0))?,
        attacker_on_defender: accuracy_of(&attacker.extractor, defender, probes, derive_seed(seed, 2, 0))?,
        defender_control: accuracy_of(&defender.extractor, defender, probes, derive_seed(seed, 3, 0))?,
        attacker_control: accuracy_of(&attacker.extractor, attacker, probes, derive_seed(seed, 4, 0))?,
    })
}

// -- Battery runner -----------------------------------------------------------------

/// One result row of the attack battery CSV.
#[derive(Debug, Clone)]
pub struct AttackRow {
    pub attack: String,
    pub params: String,
    pub bit_acc: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub detect_rate: f64,
}

pub const ATTACK_CSV_HEADER: &str = "attack,params,bit_acc,psnr,ssim,detect_rate";

impl AttackRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.3},{:.4},{:.4}",
            self.attack, self.params, self.bit_acc, self.psnr, self.ssim, self.detect_rate
        )
    }
}

/// Renders fresh watermarked probes, attacks each with `transform`, and
/// aggregates accuracy/quality/detection statistics.
pub fn evaluate_transform(
    system: &System,
    name: &str,
    params: &str,
    images: usize,
    target_fpr: f64,
    seed: u64,
    mut transform: impl FnMut(&Tensor, u64) -> Result<Tensor, AttackError>,
) -> Result<AttackRow, AttackError> {
    let m = system.key_bits();
    let (mut acc, mut psnr_sum, mut ssim_sum, mut detected) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for i in 0..images {
        let mut rng = stream(seed, TAG_ATTACK, i as u64);
        let key = crate::key::sample_key_with(m, &mut rng);
        let input = GeneratorInput::sample(&system.backbone.cfg, &mut rng);
        let marked = system.render_marked(&key, &input)?;
        let attacked = transform(&marked, derive_seed(seed, TAG_ATTACK, i as u64))?;
        let decoded = system.extractor.extract_key(&attacked)?;
        let report = detect_decoded(&decoded, &key, target_fpr)?;
        acc += report.bit_accuracy;
        psnr_sum += psnr(&attacked, &marked)?;
        ssim_sum += ssim(&attacked, &marked)?;
        if report.watermarked {
            detected += 1;
        }
    }
    let n = images.max(1) as f64;
    Ok(AttackRow {
        attack: name.to_string(),
        params: params.to_string(),
        bit_acc: acc / n,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        detect_rate: detected as f64 / n,
    })
}

/// Mean bit accuracy of the system under a single distortion.
pub fn accuracy_under_distortion(
    system: &System,
    distortion: &Distortion,
    images: usize,
    seed: u64,
) -> Result<f64, AttackError> {
    let row = evaluate_transform(
        system,
        "distortion",
        &distortion.label(),
        images,
        0.01,
        seed,
        |img, s| Ok(apply_distortion(img, distortion, s)?),
    )?;
    Ok(row.bit_acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[3, 16, 16], 0.2, &mut rng);
        for v in t.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        t
    }

    #[test]
    fn psnr_bound_formula() {
        assert!((psnr_to_mse_bound(10.0) - 0.1).abs() < 1e-12);
        assert!((psnr_to_mse_bound(20.0) - 0.01).abs() < 1e-12);
        assert!((psnr_to_mse_bound(30.0) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn removal_loss_bounds() {
        // All probabilities at 1/2 minimize the loss at exactly 0.
        assert_eq!(removal_loss(&[0.0, 0.0, 0.0]), 0.0);
        // Saturated logits approach the 0.25 supremum.
        let l = removal_loss(&[100.0, -100.0]);
        assert!(l <= 0.25 && l > 0.2499);
    }

    #[test]
    fn grey_box_estimate_of_identical_sets_is_zero_and_removal_is_identity() {
        let imgs: Vec<Tensor> = (0..4).map(img).collect();
        let est = estimate_watermark(&imgs, Some(&imgs), AveragingAccess::GreyBox).unwrap();
        assert!(est.data().iter().all(|&v| v == 0.0));
        let out = averaging_attack(&imgs, &est, AveragingMode::Removal).unwrap();
        for (o, i) in out.iter().zip(&imgs) {
            assert_eq!(o.data(), i.data());
        }
    }

    #[test]
    fn averaging_estimator_converges_on_a_planted_pattern() {
        // Plant a constant additive watermark on random content; the
        // grey-box estimate converges at the Monte-Carlo rate.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pattern = Tensor::randn(&[3, 16, 16], 0.02, &mut rng);
        let make = |k: usize, base: u64| -> (Vec<Tensor>, Vec<Tensor>) {
            let clean: Vec<Tensor> = (0..k).map(|i| img(base + i as u64)).collect();
            let wm = clean
                .iter()
                .map(|c| {
                    let data = c
                        .data()
                        .iter()
                        .zip(pattern.data())
                        .map(|(x, w)| x + w) // no clamp: keeps the planted model exact
                        .collect();
                    Tensor::new(c.shape().to_vec(), data).unwrap()
                })
                .collect();
            (wm, clean)
        };
        let mut errs = Vec::new();
        for &k in &[10usize, 100, 1000] {
            let (wm, clean) = make(k, 10_000 + k as u64);
            // Black-box-style stress: estimate from noisy pairings (clean
            // images of OTHER draws), still unbiased for the pattern.
            let (_, other_clean) = make(k, 50_000 + k as u64);
            let est = estimate_watermark(&wm, Some(&other_clean), AveragingAccess::GreyBox).unwrap();
            let err: f64 = est
                .data()
                .iter()
                .zip(pattern.data())
                .map(|(e, p)| {
                    let d = f64::from(*e) - f64::from(*p);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "errors not decreasing: {errs:?}");
        // O(1/sqrt(k)) rate: two decades of k gives about one decade of error.
        assert!(errs[2] < errs[0] / 3.0, "convergence slower than 1/sqrt(k): {errs:?}");
    }

    #[test]
    fn insufficient_averaging_inputs_are_rejected() {
        let one = vec![img(1)];
        assert!(matches!(
            estimate_watermark(&one, None, AveragingAccess::BlackBox),
            Err(AttackError::Insufficient(_))
        ));
        let two: Vec<Tensor> = (0..2).map(img).collect();
        assert!(matches!(
            estimate_watermark(&two, None, AveragingAccess::GreyBox),
            Err(AttackError::Insufficient(_))
        ));
        let unpaired = vec![img(7)];
        assert!(matches!(
            estimate_watermark(&two, Some(&unpaired), AveragingAccess::GreyBox),
            Err(AttackError::Insufficient(_))
        ));
    }

    #[test]
    fn regeneration_off_is_identity_and_strength_orders_damage() {
        let a = img(3);
        let off = regeneration_proxy(&a, RegenStrength::Off, 1).unwrap();
        assert_eq!(off.data(), a.data());
        let weak = regeneration_proxy(&a, RegenStrength::Weak, 1).unwrap();
        let strong = regeneration_proxy(&a, RegenStrength::Strong, 1).unwrap();
        let d = |x: &Tensor| -> f64 { mse(x, &a).unwrap() };
        assert!(d(&weak) > 0.0 && d(&strong) > d(&weak));
    }
}
