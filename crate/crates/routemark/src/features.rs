//! Fixed perceptual feature extractors for the imperceptibility loss.
//!
//! The default spec is three frozen random-weight 3x3 conv extractors at
//! scales 1x, 1/2x and 1/4x with equal weights 1/3. Weights are scaled so
//! that, for uncorrelated pixel perturbations, the total loss is roughly
//! `gain^2 * MSE(x_marked, x_clean)` independent of resolution; `gain` is
//! the single knob balancing imperceptibility against verifiability.
//!
//! The loss convention is a squared L2 norm summed over feature elements
//! and averaged over the batch by the caller; with the identity feature
//! it reduces to pixel-count times the mean squared pixel difference.

use serde::{Deserialize, Serialize};

use crate::rng::{stream, TAG_FEATURES};
use crate::tape::{Tape, VarId};
use crate::tensor::{EngineError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// phi = identity; loss is the summed squared pixel difference.
    Identity,
    /// Three random conv extractors at scales 1x, 1/2x, 1/4x.
    RandomMultiScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub channels: usize,
    pub gain: f32,
    pub seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { kind: FeatureKind::RandomMultiScale, channels: 8, gain: 8.0, seed: 1 }
    }
}

struct ScaleExtractor {
    /// Number of 2x average-poolings before the conv.
    pools: usize,
    weight: Tensor,
}

/// The frozen feature stack phi_k with weights w_k.
pub struct PerceptualFeatures {
    extractors: Vec<ScaleExtractor>,
    weights: Vec<f32>,
    identity: bool,
}

impl PerceptualFeatures {
    /// Builds the stack for a given training resolution.
    pub fn build(spec: &FeatureSpec, image_size: usize) -> Result<Self, EngineError> {
        match spec.kind {
            FeatureKind::Identity => {
                Ok(Self { extractors: Vec::new(), weights: vec![1.0], identity: true })
            }
            FeatureKind::RandomMultiScale => {
                if spec.channels == 0 {
                    return Err(EngineError::Invalid("feature channels must be positive".into()));
                }
                if image_size % 4 != 0 {
                    return Err(EngineError::Invalid(format!(
                        "multi-scale features need an image size divisible by 4, got {image_size}"
                    )));
                }
                let mut rng = stream(spec.seed, TAG_FEATURES, 0);
                let fan_in = 27.0f32; // 3 channels x 3x3 kernel
                let mut extractors = Vec::new();
                for pools in 0..3usize {
                    let side = image_size >> pools;
                    let numel = (spec.channels * side * side) as f32;
                    let std = spec.gain / (fan_in * numel).sqrt();
                    extractors.push(ScaleExtractor {
                        pools,
                        weight: Tensor::randn(&[spec.channels, 3, 3, 3], std, &mut rng),
                    });
                }
                Ok(Self { extractors, weights: vec![1.0 / 3.0; 3], identity: false })
            }
        }
    }

    fn feature_of(&self, tape: &mut Tape, x: VarId, k: usize) -> Result<VarId, EngineError> {
        let e = &self.extractors[k];
        let mut h = x;
        for _ in 0..e.pools {
            h = tape.avgpool2x(h)?;
        }
        let w = tape.constant(e.weight.clone())?;
        tape.conv2d(h, w, None, 1, 1)
    }

    /// Sum_k w_k ||phi_k(marked) - phi_k(clean)||^2 as a tape scalar.
    pub fn loss_traced(&self, tape: &mut Tape, marked: VarId, clean: VarId) -> Result<VarId, EngineError> {
        if self.identity {
            let d = tape.sub(marked, clean)?;
            return tape.sum_squares(d);
        }
        let mut total: Option<VarId> = None;
        for k in 0..self.extractors.len() {
            let fm = self.feature_of(tape, marked, k)?;
            let fc = self.feature_of(tape, clean, k)?;
            let d = tape.sub(fm, fc)?;
            let sq = tape.sum_squares(d)?;
            let term = tape.scale(sq, self.weights[k])?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one extractor"))
    }

    /// Eval-mode loss between two plain images.
    pub fn loss_value(&self, marked: &Tensor, clean: &Tensor) -> Result<f32, EngineError> {
        let mut tape = Tape::new();
        let m = tape.constant(marked.clone())?;
        let c = tape.constant(clean.clone())?;
        let l = self.loss_traced(&mut tape, m, c)?;
        Ok(tape.value(l).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[3, 32, 32], 0.2, &mut rng);
        for v in t.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        t
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let f = PerceptualFeatures::build(&FeatureSpec::default(), 32).unwrap();
        let a = img(1);
        assert_eq!(f.loss_value(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn identity_feature_reduces_to_summed_squared_difference() {
        let f = PerceptualFeatures::build(
            &FeatureSpec { kind: FeatureKind::Identity, ..Default::default() },
            32,
        )
        .unwrap();
        let a = img(2);
        let b = img(3);
        let got = f.loss_value(&a, &b).unwrap();
        let mse: f32 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / a.numel() as f32;
        let want = mse * a.numel() as f32;
        assert!((got - want).abs() / want < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn default_spec_matches_naive_recomputation() {
        // Independent recomputation with plain loops over the same frozen
        // weights: pool twice, conv, sum of squared differences.
        let spec = FeatureSpec::default();
        let f = PerceptualFeatures::build(&spec, 32).unwrap();
        let a = img(4);
        let b = img(5);
        let got = f.loss_value(&a, &b).unwrap();

        let mut want = 0.0f64;
        for (k, e) in f.extractors.iter().enumerate() {
            let pool = |t: &Tensor, times: usize| {
                let mut cur = t.clone();
                for _ in 0..times {
                    cur = crate::tensor::avgpool2x_forward(&cur).unwrap();
                }
                cur
            };
            let fa = crate::tensor::conv2d_forward(&pool(&a, e.pools), &e.weight, None, 1, 1).unwrap();
            let fb = crate::tensor::conv2d_forward(&pool(&b, e.pools), &e.weight, None, 1, 1).unwrap();
            let ss: f64 = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(x, y)| f64::from(x - y) * f64::from(x - y))
                .sum();
            want += f64::from(f.weights[k]) * ss;
        }
        let rel = (f64::from(got) - want).abs() / want.max(1e-12);
        assert!(rel < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn loss_tracks_perturbation_size() {
        let f = PerceptualFeatures::build(&FeatureSpec::default(), 32).unwrap();
        let a = img(6);
        let mut small = a.clone();
        let mut big = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        for ((s, b), n) in small.data_mut().iter_mut().zip(big.data_mut()).zip(noise.data()) {
            *s += 0.01 * n;
            *b += 0.05 * n;
        }
        let ls = f.loss_value(&small, &a).unwrap();
        let lb = f.loss_value(&big, &a).unwrap();
        assert!(lb > ls && ls > 0.0);
    }
}
