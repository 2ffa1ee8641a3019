//! Watermark extractor: strided conv trunk, global average pool, linear
//! head emitting M logits. Inputs of any spatial size are bilinearly
//! resized to the training resolution first; that resize is the canonical
//! path, so extraction commutes with pre-resizing.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::generator::LEAKY_SLOPE;
use crate::key::WatermarkKey;
use crate::optim::{ParamRef, ParamStore};
use crate::rng::{stream, TAG_EXTRACTOR_INIT};
use crate::tape::{stable_sigmoid, Tape, VarId};
use crate::tensor::{resize_bilinear_plan, EngineError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Logit count M.
    pub key_bits: usize,
    /// Training resolution; other sizes are resized to this.
    pub input_size: usize,
    /// Channel widths of the stride-2 conv trunk.
    pub conv_channels: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { key_bits: 16, input_size: 32, conv_channels: vec![16, 32, 64, 64] }
    }
}

/// Sigmoid probabilities of the extracted bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftKey {
    pub probabilities: Vec<f32>,
}

impl SoftKey {
    /// Rounds at 0.5; a tie (probability exactly 0.5) rounds to 1.
    pub fn round(&self) -> WatermarkKey {
        let bits = self.probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect();
        WatermarkKey::from_bits(bits).expect("probabilities are non-empty")
    }
}

struct ConvLayer {
    w: ParamRef,
    b: ParamRef,
}

pub struct Extractor {
    pub cfg: ExtractorConfig,
    pub store: ParamStore,
    layers: Vec<ConvLayer>,
    head_w: ParamRef,
    head_b: ParamRef,
}

/// Builds a fresh extractor with deterministic He-initialized weights.
pub fn build_extractor(cfg: &ExtractorConfig, seed: u64) -> Result<Extractor, EngineError> {
    if cfg.key_bits == 0 {
        return Err(EngineError::Invalid("extractor needs at least one key bit".into()));
    }
    if cfg.conv_channels.is_empty() {
        return Err(EngineError::Invalid("extractor needs at least one conv layer".into()));
    }
    if cfg.input_size >> cfg.conv_channels.len() == 0 {
        return Err(EngineError::Invalid(format!(
            "{} stride-2 layers collapse a {} input to nothing",
            cfg.conv_channels.len(),
            cfg.input_size
        )));
    }
    let mut rng = stream(seed, TAG_EXTRACTOR_INIT, 0);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut in_ch = 3usize;
    for (i, &out_ch) in cfg.conv_channels.iter().enumerate() {
        let fan_in = (in_ch * 9) as f32;
        let w = store.add(
            format!("ext.conv{i}.w"),
            Tensor::randn(&[out_ch, in_ch, 3, 3], (2.0 / fan_in).sqrt(), &mut rng),
        );
        let b = store.add(format!("ext.conv{i}.b"), Tensor::zeros(&[out_ch]));
        layers.push(ConvLayer { w, b });
        in_ch = out_ch;
    }
    let head_w = store.add(
        "ext.head.w",
        Tensor::randn(&[cfg.key_bits, in_ch], (1.0 / in_ch as f32).sqrt() * 0.1, &mut rng),
    );
    let head_b = store.add("ext.head.b", Tensor::zeros(&[cfg.key_bits]));
    Ok(Extractor { cfg: cfg.clone(), store, layers, head_w, head_b })
}

impl Extractor {
    pub fn key_bits(&self) -> usize {
        self.cfg.key_bits
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Traced forward pass. `trainable` decides whether the weights enter
    /// the tape as parameters (training) or constants (inference, PGD).
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        image: VarId,
        trainable: bool,
    ) -> Result<(VarId, crate::generator::TracedParams), EngineError> {
        let shape = tape.value(image).shape().to_vec();
        let (h, w) = match shape.as_slice() {
            [3, h, w] => (*h, *w),
            s => {
                return Err(EngineError::ShapeMismatch {
                    op: "extract",
                    detail: format!("expected (3,H,W) image, got {s:?}"),
                })
            }
        };
        let mut traced = crate::generator::TracedParams::default();
        let mut leaf = |tape: &mut Tape, r: ParamRef, store: &ParamStore| -> Result<VarId, EngineError> {
            let t = store.get(r).clone();
            if trainable {
                let id = tape.param(t)?;
                traced.push(r, id);
                Ok(id)
            } else {
                tape.constant(t)
            }
        };

        let s = self.cfg.input_size;
        let mut x = image;
        if (h, w) != (s, s) {
            x = tape.warp(x, Arc::new(resize_bilinear_plan(h, w, s, s)))?;
        }
        for layer in &self.layers {
            let w_id = leaf(tape, layer.w, &self.store)?;
            let b_id = leaf(tape, layer.b, &self.store)?;
            x = tape.conv2d(x, w_id, Some(b_id), 2, 1)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let pooled = tape.spatial_mean(x)?; // (C)
        let feat = tape.reshape(pooled, vec![self.cfg.conv_channels[self.layers.len() - 1], 1])?;
        let hw = leaf(tape, self.head_w, &self.store)?;
        let hb = leaf(tape, self.head_b, &self.store)?;
        let logits = tape.matmul(hw, feat)?; // (M,1)
        let hb2 = tape.reshape(hb, vec![self.cfg.key_bits, 1])?;
        let logits = tape.add(logits, hb2)?;
        let logits = tape.reshape(logits, vec![self.cfg.key_bits])?;
        Ok((logits, traced))
    }

    /// M logits for an image in [0,1]; rejects non-finite input.
    pub fn extract_logits(&self, image: &Tensor) -> Result<Vec<f32>, EngineError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone())?;
        let (logits, _) = self.forward_traced(&mut tape, x, false)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn extract_soft(&self, image: &Tensor) -> Result<SoftKey, EngineError> {
        let probabilities = self.extract_logits(image)?.iter().map(|&u| stable_sigmoid(u)).collect();
        Ok(SoftKey { probabilities })
    }

    /// round(sigmoid(logits)), ties toward 1.
    pub fn extract_key(&self, image: &Tensor) -> Result<WatermarkKey, EngineError> {
        Ok(self.extract_soft(image)?.round())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::sample_key;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[3, size, size], 0.25, &mut rng);
        for v in t.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        t
    }

    #[test]
    fn extraction_is_deterministic() {
        let ext = build_extractor(&ExtractorConfig::default(), 3).unwrap();
        let img = random_image(1, 32);
        assert_eq!(ext.extract_logits(&img).unwrap(), ext.extract_logits(&img).unwrap());
    }

    #[test]
    fn logit_count_matches_configured_m() {
        for m in [16usize, 28] {
            let cfg = ExtractorConfig { key_bits: m, ..Default::default() };
            let ext = build_extractor(&cfg, 5).unwrap();
            assert_eq!(ext.extract_logits(&random_image(2, 32)).unwrap().len(), m);
        }
    }

    #[test]
    fn untrained_extractor_sits_at_chance_level() {
        let ext = build_extractor(&ExtractorConfig::default(), 9).unwrap();
        let mut total = 0.0f64;
        let trials = 200;
        for i in 0..trials {
            let img = random_image(1000 + i, 32);
            let decoded = ext.extract_key(&img).unwrap();
            let target = sample_key(16, 5000 + i);
            let matches = decoded
                .bits()
                .iter()
                .zip(target.bits())
                .filter(|(a, b)| a == b)
                .count();
            total += matches as f64 / 16.0;
        }
        let mean = total / f64::from(trials as u32);
        assert!((0.4..=0.6).contains(&mean), "chance-level accuracy was {mean}");
    }

    #[test]
    fn tie_probabilities_round_to_one() {
        let soft = SoftKey { probabilities: vec![0.5, 0.49999, 0.50001] };
        assert_eq!(soft.round().bits(), &[1, 0, 1]);
    }

    #[test]
    fn saturated_logits_round_as_expected() {
        let probs: Vec<f32> = [10.0f32, -10.0].iter().map(|&u| stable_sigmoid(u)).collect();
        let soft = SoftKey { probabilities: probs };
        assert_eq!(soft.round().bits(), &[1, 0]);
    }

    #[test]
    fn raising_a_logit_never_flips_a_bit_downward() {
        let base = vec![-0.3f32, 0.0, 0.7];
        let bits_of = |logits: &[f32]| -> Vec<u8> {
            logits.iter().map(|&u| u8::from(stable_sigmoid(u) >= 0.5)).collect()
        };
        let before = bits_of(&base);
        for i in 0..base.len() {
            for bump in [0.1f32, 1.0, 10.0] {
                let mut l = base.clone();
                l[i] += bump;
                let after = bits_of(&l);
                assert!(after[i] >= before[i]);
                for j in 0..base.len() {
                    if j != i {
                        assert_eq!(after[j], before[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_invariance_contract() {
        let ext = build_extractor(&ExtractorConfig::default(), 13).unwrap();
        let big = random_image(4, 64);
        // Pre-resizing through the same canonical plan must be identical.
        let plan = resize_bilinear_plan(64, 64, 32, 32);
        let pre = plan.apply(&big).unwrap();
        assert_eq!(ext.extract_logits(&big).unwrap(), ext.extract_logits(&pre).unwrap());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let ext = build_extractor(&ExtractorConfig::default(), 3).unwrap();
        let mut img = random_image(1, 32);
        img.data_mut()[0] = f32::NAN;
        assert!(ext.extract_logits(&img).is_err());
    }
}
