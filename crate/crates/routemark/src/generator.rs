//! Frozen convolutional decoder backbone, the bank of low-rank adapters,
//! and the key-routed forward pass.
//!
//! The backbone maps a Gaussian latent plus a class embedding through a
//! stem projection and a chain of residual blocks (the first few upsample
//! 2x) to an RGB image squashed into [0,1]. Backbone weights are frozen;
//! only the adapter bank is trainable. A routed block computes
//! `out = u + conv2(lrelu(conv1(u))) + alpha * B(A(u))` where `u` is the
//! block's working input (after upsampling) and (A, B) is the adapter
//! selected by the routing path. With B initialized to zero every marked
//! output starts exactly at the clean output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::key::RoutingPath;
use crate::optim::{ParamRef, ParamStore};
use crate::rng::{stream, TAG_BACKBONE_INIT, TAG_BANK_INIT};
use crate::tape::{Tape, VarId};
use crate::tensor::{EngineError, Tensor};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Number of residual blocks.
    pub blocks: usize,
    /// Feature channels throughout the trunk.
    pub channels: usize,
    /// Spatial size the stem projects to.
    pub base_size: usize,
    /// Output image side; must be base_size * 2^k with k <= blocks.
    pub image_size: usize,
    /// Latent dimension d_q.
    pub latent_dim: usize,
    /// Number of condition classes (prompt stand-in).
    pub num_classes: usize,
    /// Class embedding width.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            channels: 16,
            base_size: 4,
            image_size: 32,
            latent_dim: 16,
            num_classes: 16,
            embed_dim: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<usize, EngineError> {
        if self.blocks == 0 || self.channels == 0 || self.latent_dim == 0 || self.num_classes == 0 {
            return Err(EngineError::Invalid("backbone config has a zero dimension".into()));
        }
        if self.image_size < self.base_size || !self.image_size.is_multiple_of(self.base_size) {
            return Err(EngineError::Invalid(format!(
                "image size {} is not a 2^k multiple of base size {}",
                self.image_size, self.base_size
            )));
        }
        let ratio = self.image_size / self.base_size;
        if !ratio.is_power_of_two() {
            return Err(EngineError::Invalid(format!(
                "image/base ratio {ratio} is not a power of two"
            )));
        }
        let ups = ratio.trailing_zeros() as usize;
        if ups > self.blocks {
            return Err(EngineError::Invalid(format!(
                "{ups} upsamplings needed but only {} blocks", self.blocks
            )));
        }
        Ok(ups)
    }
}

/// Latent + class id pair fed to the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorInput {
    pub latent: Vec<f32>,
    pub class_id: usize,
}

impl GeneratorInput {
    pub fn sample<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let latent = (0..cfg.latent_dim)
            .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        let class_id = rng.gen_range(0..cfg.num_classes);
        Self { latent, class_id }
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub upsample: bool,
}

/// The frozen generator backbone.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub class_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn he_conv<R: Rng>(oc: usize, ic: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (ic * k * k) as f32;
    Tensor::randn(&[oc, ic, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Builds a backbone with deterministic frozen random weights.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone, EngineError> {
    let ups = cfg.validate()?;
    let mut rng = stream(seed, TAG_BACKBONE_INIT, 0);
    let c = cfg.channels;
    let in_dim = cfg.latent_dim + cfg.embed_dim;
    let out_dim = c * cfg.base_size * cfg.base_size;
    let stem_w = Tensor::randn(&[out_dim, in_dim], (2.0 / in_dim as f32).sqrt(), &mut rng);
    let stem_b = Tensor::zeros(&[out_dim]);
    let class_embed = Tensor::randn(&[cfg.num_classes, cfg.embed_dim], 1.0, &mut rng);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        blocks.push(BlockWeights {
            w1: he_conv(c, c, 3, &mut rng),
            b1: Tensor::zeros(&[c]),
            // Damped second conv keeps the residual chain stable.
            w2: {
                let mut t = he_conv(c, c, 3, &mut rng);
                for v in t.data_mut() {
                    *v *= 0.5;
                }
                t
            },
            b2: Tensor::zeros(&[c]),
            upsample: i < ups,
        });
    }
    let head_w = he_conv(3, c, 3, &mut rng);
    let head_b = Tensor::zeros(&[3]);
    Ok(Backbone { cfg: *cfg, stem_w, stem_b, class_embed, blocks, head_w, head_b })
}

impl Backbone {
    /// Checksum over every frozen tensor; training must not change it.
    pub fn checksum(&self) -> u64 {
        let mut h = self.stem_w.bit_checksum();
        h = h.rotate_left(9) ^ self.stem_b.bit_checksum();
        h = h.rotate_left(9) ^ self.class_embed.bit_checksum();
        for b in &self.blocks {
            for t in [&b.w1, &b.b1, &b.w2, &b.b2] {
                h = h.rotate_left(9) ^ t.bit_checksum();
            }
        }
        h = h.rotate_left(9) ^ self.head_w.bit_checksum();
        h.rotate_left(9) ^ self.head_b.bit_checksum()
    }

    pub fn stem_input(&self, input: &GeneratorInput) -> Result<Tensor, EngineError> {
        if input.latent.len() != self.cfg.latent_dim {
            return Err(EngineError::ShapeMismatch {
                op: "stem_input",
                detail: format!("latent {} vs d_q {}", input.latent.len(), self.cfg.latent_dim),
            });
        }
        if input.class_id >= self.cfg.num_classes {
            return Err(EngineError::Invalid(format!(
                "class id {} out of range [0, {})",
                input.class_id, self.cfg.num_classes
            )));
        }
        let e = self.cfg.embed_dim;
        let emb = &self.class_embed.data()[input.class_id * e..(input.class_id + 1) * e];
        let mut v = Vec::with_capacity(self.cfg.latent_dim + e);
        v.extend_from_slice(&input.latent);
        v.extend_from_slice(emb);
        Ok(Tensor::from_vec(v))
    }
}

// -- Marker bank ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyLayoutConfig {
    /// Adapters per routed unit (P); must be a power of two.
    pub paths: usize,
    /// Adapter rank r.
    pub rank: usize,
    /// Fixed adapter output scale.
    pub alpha: f32,
    /// Route each of the two block convolutions independently (doubles L).
    pub per_conv: bool,
    /// Routed block indices; empty means every backbone block.
    pub routed_blocks: Vec<usize>,
}

impl Default for KeyLayoutConfig {
    fn default() -> Self {
        Self { paths: 4, rank: 8, alpha: 1.0, per_conv: false, routed_blocks: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MarkerSlot {
    pub a: ParamRef,
    pub b: ParamRef,
}

/// The L x P collection of trainable low-rank adapters.
#[derive(Debug, Clone)]
pub struct MarkerBank {
    pub layout: KeyLayoutConfig,
    pub routed_blocks: Vec<usize>,
    pub store: ParamStore,
    /// markers[unit][path]
    markers: Vec<Vec<MarkerSlot>>,
}

impl MarkerBank {
    /// Routed units L (blocks, or 2x blocks in per-conv mode).
    pub fn units(&self) -> usize {
        self.markers.len()
    }

    /// Key capacity M = L * log2(P).
    pub fn key_bits(&self) -> usize {
        self.units() * (self.layout.paths.trailing_zeros() as usize)
    }

    pub fn slot(&self, unit: usize, path: usize) -> MarkerSlot {
        self.markers[unit][path]
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Units attached to a backbone block: one, or two in per-conv mode.
    pub fn units_for_block(&self, block_pos: usize) -> (usize, Option<usize>) {
        if self.layout.per_conv {
            (2 * block_pos, Some(2 * block_pos + 1))
        } else {
            (block_pos, None)
        }
    }
}

/// Creates the bank for a backbone: A ~ N(0, 0.02^2), B = 0, so routing
/// starts exactly at the clean output.
pub fn build_marker_bank(
    backbone: &BackboneConfig,
    layout: &KeyLayoutConfig,
    seed: u64,
) -> Result<MarkerBank, EngineError> {
    if !layout.paths.is_power_of_two() || layout.paths < 2 {
        return Err(EngineError::Invalid(format!(
            "paths per block {} must be a power of two >= 2",
            layout.paths
        )));
    }
    if layout.rank == 0 {
        return Err(EngineError::Invalid("adapter rank must be positive".into()));
    }
    let routed_blocks = if layout.routed_blocks.is_empty() {
        (0..backbone.blocks).collect::<Vec<_>>()
    } else {
        let mut v = layout.routed_blocks.clone();
        v.sort_unstable();
        v.dedup();
        if v.iter().any(|&b| b >= backbone.blocks) {
            return Err(EngineError::Invalid(format!(
                "routed block out of range for {} blocks",
                backbone.blocks
            )));
        }
        v
    };
    let mut rng = stream(seed, TAG_BANK_INIT, 0);
    let mut store = ParamStore::new();
    let c = backbone.channels;
    let r = layout.rank;
    let units_per_block = if layout.per_conv { 2 } else { 1 };
    let mut markers = Vec::new();
    for &block in &routed_blocks {
        for sub in 0..units_per_block {
            let mut paths = Vec::with_capacity(layout.paths);
            for p in 0..layout.paths {
                let a = store.add(
                    format!("bank.b{block}.u{sub}.p{p}.a"),
                    Tensor::randn(&[r, c, 1, 1], 0.02, &mut rng),
                );
                let b = store.add(format!("bank.b{block}.u{sub}.p{p}.b"), Tensor::zeros(&[c, r, 1, 1]));
                paths.push(MarkerSlot { a, b });
            }
            markers.push(paths);
        }
    }
    let mut layout = layout.clone();
    layout.routed_blocks = routed_blocks.clone();
    Ok(MarkerBank { layout, routed_blocks, store, markers })
}

// -- Routed forward pass --------------------------------------------------

/// Store-slot to tape-leaf mapping for the trainable leaves of one tape.
#[derive(Debug, Default, Clone)]
pub struct TracedParams {
    pub entries: Vec<(usize, VarId)>,
}

impl TracedParams {
    pub fn push(&mut self, slot: ParamRef, id: VarId) {
        self.entries.push((slot.0, id));
    }
}

struct MarkerCtx<'a> {
    bank: &'a MarkerBank,
    path: &'a RoutingPath,
    trainable: bool,
    traced: TracedParams,
}

impl MarkerCtx<'_> {
    /// alpha * B(A(u)) for the active adapter of `unit`.
    fn contribution(&mut self, tape: &mut Tape, unit: usize, u: VarId) -> Result<VarId, EngineError> {
        let slot = self.bank.slot(unit, self.path.indices()[unit]);
        let a_t = self.bank.store.get(slot.a).clone();
        let b_t = self.bank.store.get(slot.b).clone();
        let (a_id, b_id) = if self.trainable {
            let a_id = tape.param(a_t)?;
            let b_id = tape.param(b_t)?;
            self.traced.push(slot.a, a_id);
            self.traced.push(slot.b, b_id);
            (a_id, b_id)
        } else {
            (tape.constant(a_t)?, tape.constant(b_t)?)
        };
        let low = tape.conv2d(u, a_id, None, 1, 0)?;
        let back = tape.conv2d(low, b_id, None, 1, 0)?;
        tape.scale(back, self.bank.layout.alpha)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl(
    backbone: &Backbone,
    tape: &mut Tape,
    input: &GeneratorInput,
    mut marker: Option<&mut MarkerCtx<'_>>,
) -> Result<VarId, EngineError> {
    let cfg = &backbone.cfg;
    let stem_in = backbone.stem_input(input)?;
    let x = tape.constant(stem_in.reshaped(vec![cfg.latent_dim + cfg.embed_dim, 1])?)?;
    let w = tape.constant(backbone.stem_w.clone())?;
    let b = tape.constant(backbone.stem_b.reshaped(vec![cfg.channels * cfg.base_size * cfg.base_size, 1])?)?;
    let proj = tape.matmul(w, x)?;
    let proj = tape.add(proj, b)?;
    let mut h = tape.reshape(proj, vec![cfg.channels, cfg.base_size, cfg.base_size])?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;

    for (pos, block) in backbone.blocks.iter().enumerate() {
        let u = if block.upsample { tape.upsample2x(h)? } else { h };
        let w1 = tape.constant(block.w1.clone())?;
        let b1 = tape.constant(block.b1.clone())?;
        let w2 = tape.constant(block.w2.clone())?;
        let b2 = tape.constant(block.b2.clone())?;

        let routed_pos = marker
            .as_ref()
            .and_then(|m| m.bank.routed_blocks.iter().position(|&rb| rb == pos));

        let mut c1 = tape.conv2d(u, w1, Some(b1), 1, 1)?;
        if let (Some(m), Some(rp)) = (marker.as_deref_mut(), routed_pos) {
            if m.bank.layout.per_conv {
                let (u1, _) = m.bank.units_for_block(rp);
                let add = m.contribution(tape, u1, u)?;
                c1 = tape.add(c1, add)?;
            }
        }
        let a1 = tape.leaky_relu(c1, LEAKY_SLOPE)?;
        let mut c2 = tape.conv2d(a1, w2, Some(b2), 1, 1)?;
        if let (Some(m), Some(rp)) = (marker.as_deref_mut(), routed_pos) {
            if m.bank.layout.per_conv {
                let (_, u2) = m.bank.units_for_block(rp);
                let add = m.contribution(tape, u2.unwrap(), a1)?;
                c2 = tape.add(c2, add)?;
            }
        }
        let mut out = tape.add(u, c2)?;
        if let (Some(m), Some(rp)) = (marker.as_deref_mut(), routed_pos) {
            if !m.bank.layout.per_conv {
                let (unit, _) = m.bank.units_for_block(rp);
                let add = m.contribution(tape, unit, u)?;
                out = tape.add(out, add)?;
            }
        }
        h = out;
    }

    let hw = tape.constant(backbone.head_w.clone())?;
    let hb = tape.constant(backbone.head_b.clone())?;
    let logits = tape.conv2d(h, hw, Some(hb), 1, 1)?;
    tape.sigmoid(logits)
}

/// Clean forward pass: x = G(q, t), no adapter contribution.
pub fn forward_clean(
    backbone: &Backbone,
    tape: &mut Tape,
    input: &GeneratorInput,
) -> Result<VarId, EngineError> {
    forward_impl(backbone, tape, input, None)
}

/// Routed forward pass: exactly one adapter active per routed unit, fixed
/// for the whole pass. Returns the traced bank leaves when `trainable`.
pub fn forward_marked(
    backbone: &Backbone,
    tape: &mut Tape,
    bank: &MarkerBank,
    path: &RoutingPath,
    input: &GeneratorInput,
    trainable: bool,
) -> Result<(VarId, TracedParams), EngineError> {
    if path.len() != bank.units() {
        return Err(EngineError::ShapeMismatch {
            op: "forward_marked",
            detail: format!("path has {} entries, bank has {} units", path.len(), bank.units()),
        });
    }
    if path.paths_per_block() != bank.layout.paths {
        return Err(EngineError::ShapeMismatch {
            op: "forward_marked",
            detail: format!(
                "path P={} vs bank P={}",
                path.paths_per_block(),
                bank.layout.paths
            ),
        });
    }
    let mut ctx = MarkerCtx { bank, path, trainable, traced: TracedParams::default() };
    let out = forward_impl(backbone, tape, input, Some(&mut ctx))?;
    Ok((out, ctx.traced))
}

/// Convenience eval-mode render of the clean image.
pub fn render_clean(backbone: &Backbone, input: &GeneratorInput) -> Result<Tensor, EngineError> {
    let mut tape = Tape::new();
    let id = forward_clean(backbone, &mut tape, input)?;
    Ok(tape.value(id).clone())
}

/// Convenience eval-mode render of the marked image.
pub fn render_marked(
    backbone: &Backbone,
    bank: &MarkerBank,
    path: &RoutingPath,
    input: &GeneratorInput,
) -> Result<Tensor, EngineError> {
    let mut tape = Tape::new();
    let (id, _) = forward_marked(backbone, &mut tape, bank, path, input, false)?;
    Ok(tape.value(id).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::{encode_routing, sample_key};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_setup() -> (Backbone, MarkerBank) {
        let cfg = BackboneConfig::default();
        let backbone = build_backbone(&cfg, 11).unwrap();
        let bank = build_marker_bank(&cfg, &KeyLayoutConfig::default(), 12).unwrap();
        (backbone, bank)
    }

    fn sample_path(bank: &MarkerBank, seed: u64) -> crate::key::RoutingPath {
        let key = sample_key(bank.key_bits(), seed);
        encode_routing(&key, bank.units(), bank.layout.paths).unwrap()
    }

    #[test]
    fn backbone_build_is_seed_deterministic() {
        let cfg = BackboneConfig::default();
        let a = build_backbone(&cfg, 5).unwrap();
        let b = build_backbone(&cfg, 5).unwrap();
        let c = build_backbone(&cfg, 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn default_config_produces_rgb_32x32_in_unit_range() {
        let (backbone, _) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let img = render_clean(&backbone, &input).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn different_latents_give_different_images() {
        let (backbone, _) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let b = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let ia = render_clean(&backbone, &a).unwrap();
        let ib = render_clean(&backbone, &b).unwrap();
        let mad: f32 =
            ia.data().iter().zip(ib.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / ia.numel() as f32;
        assert!(mad > 0.0, "generator is degenerate");
    }

    #[test]
    fn zero_b_marked_forward_is_bit_exact_clean() {
        let (backbone, bank) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let clean = render_clean(&backbone, &input).unwrap();
        for seed in 0..3 {
            let path = sample_path(&bank, seed);
            let marked = render_marked(&backbone, &bank, &path, &input).unwrap();
            assert_eq!(marked.data(), clean.data(), "B=0 must reproduce the clean image");
        }
    }

    #[test]
    fn alpha_zero_marked_forward_is_bit_exact_clean() {
        let cfg = BackboneConfig::default();
        let backbone = build_backbone(&cfg, 21).unwrap();
        let layout = KeyLayoutConfig { alpha: 0.0, ..Default::default() };
        let mut bank = build_marker_bank(&cfg, &layout, 22).unwrap();
        // Give B nonzero content; alpha = 0 must still cancel it.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..bank.store.len() {
            let t = bank.store.get_mut(crate::optim::ParamRef(i));
            *t = Tensor::randn(t.shape(), 0.05, &mut rng);
        }
        let input = GeneratorInput::sample(&cfg, &mut rng);
        let clean = render_clean(&backbone, &input).unwrap();
        let path = sample_path(&bank, 1);
        let marked = render_marked(&backbone, &bank, &path, &input).unwrap();
        assert_eq!(marked.data(), clean.data());
    }

    #[test]
    fn repeated_marked_render_is_bit_identical() {
        let (backbone, bank) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let path = sample_path(&bank, 7);
        let a = render_marked(&backbone, &bank, &path, &input).unwrap();
        let b = render_marked(&backbone, &bank, &path, &input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn modifying_a_marker_only_affects_paths_that_use_it() {
        let (backbone, mut bank) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = GeneratorInput::sample(&backbone.cfg, &mut rng);

        // Two paths: one uses adapter (unit 3, path 2), the other does not.
        let mut idx_hit = vec![0usize; bank.units()];
        idx_hit[3] = 2;
        let hit = crate::key::RoutingPath::new(idx_hit, bank.layout.paths).unwrap();
        let miss =
            crate::key::RoutingPath::new(vec![1usize; bank.units()], bank.layout.paths).unwrap();

        let before_hit = render_marked(&backbone, &bank, &hit, &input).unwrap();
        let before_miss = render_marked(&backbone, &bank, &miss, &input).unwrap();

        let slot = bank.slot(3, 2);
        *bank.store.get_mut(slot.b) = Tensor::randn(&[16, 8, 1, 1], 0.1, &mut rng);

        let after_hit = render_marked(&backbone, &bank, &hit, &input).unwrap();
        let after_miss = render_marked(&backbone, &bank, &miss, &input).unwrap();
        assert_ne!(before_hit.data(), after_hit.data());
        assert_eq!(before_miss.data(), after_miss.data());
    }

    #[test]
    fn single_block_dense_equivalence_oracle() {
        // 1 block, 1 channel, 2x2, no upsampling: forward_marked must match
        // a hand-computed dense evaluation of u + conv2(lrelu(conv1(u))) +
        // alpha * B A u with 1x1 adapters.
        let cfg = BackboneConfig {
            blocks: 1,
            channels: 1,
            base_size: 2,
            image_size: 2,
            latent_dim: 2,
            num_classes: 2,
            embed_dim: 1,
        };
        let backbone = build_backbone(&cfg, 31).unwrap();
        let layout = KeyLayoutConfig { paths: 2, rank: 1, alpha: 0.7, ..Default::default() };
        let mut bank = build_marker_bank(&cfg, &layout, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let slot = bank.slot(0, 1);
        *bank.store.get_mut(slot.a) = Tensor::new(vec![1, 1, 1, 1], vec![0.6]).unwrap();
        *bank.store.get_mut(slot.b) = Tensor::new(vec![1, 1, 1, 1], vec![-0.9]).unwrap();

        let input = GeneratorInput::sample(&cfg, &mut rng);
        let path = crate::key::RoutingPath::new(vec![1], 2).unwrap();
        let got = render_marked(&backbone, &bank, &path, &input).unwrap();

        // Dense recomputation with plain loops.
        let stem_in = backbone.stem_input(&input).unwrap();
        let mut u = [0.0f32; 4];
        for (i, uv) in u.iter_mut().enumerate() {
            let mut s = backbone.stem_b.data()[i];
            for (j, &x) in stem_in.data().iter().enumerate() {
                s += backbone.stem_w.data()[i * stem_in.numel() + j] * x;
            }
            *uv = if s >= 0.0 { s } else { LEAKY_SLOPE * s };
        }
        let conv = |w: &Tensor, b: f32, src: &[f32; 4]| -> [f32; 4] {
            let mut out = [0.0f32; 4];
            for y in 0..2i32 {
                for x in 0..2i32 {
                    let mut s = b;
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let iy = y + ky - 1;
                            let ix = x + kx - 1;
                            if (0..2).contains(&iy) && (0..2).contains(&ix) {
                                s += w.data()[(ky * 3 + kx) as usize]
                                    * src[(iy * 2 + ix) as usize];
                            }
                        }
                    }
                    out[(y * 2 + x) as usize] = s;
                }
            }
            out
        };
        let block = &backbone.blocks[0];
        let c1 = conv(&block.w1, block.b1.data()[0], &u);
        let mut a1 = [0.0f32; 4];
        for (av, cv) in a1.iter_mut().zip(&c1) {
            *av = if *cv >= 0.0 { *cv } else { LEAKY_SLOPE * cv };
        }
        let c2 = conv(&block.w2, block.b2.data()[0], &a1);
        let mut out_feat = [0.0f32; 4];
        for i in 0..4 {
            out_feat[i] = u[i] + c2[i] + 0.7 * (-0.9) * 0.6 * u[i];
        }
        let head = conv(&backbone.head_w, backbone.head_b.data()[0], &out_feat);
        for (i, hv) in head.iter().enumerate() {
            let want = 1.0 / (1.0 + (-hv).exp());
            let g = got.data()[i];
            let rel = (g - want).abs() / want.abs().max(1e-6);
            assert!(rel < 1e-5, "pixel {i}: {g} vs {want}");
        }
    }

    #[test]
    fn per_conv_layout_doubles_units() {
        let cfg = BackboneConfig::default();
        let layout = KeyLayoutConfig { per_conv: true, ..Default::default() };
        let bank = build_marker_bank(&cfg, &layout, 1).unwrap();
        assert_eq!(bank.units(), 16);
        assert_eq!(bank.key_bits(), 32);
    }

    #[test]
    fn paper_scale_layout_yields_28_bits() {
        let cfg = BackboneConfig { blocks: 14, ..Default::default() };
        let bank = build_marker_bank(&cfg, &KeyLayoutConfig::default(), 1).unwrap();
        assert_eq!(bank.key_bits(), 28);
        let cfg8 = KeyLayoutConfig { paths: 8, ..Default::default() };
        let bank8 = build_marker_bank(&BackboneConfig::default(), &cfg8, 1).unwrap();
        assert_eq!(bank8.key_bits(), 24);
    }

    #[test]
    fn path_bank_mismatch_is_rejected() {
        let (backbone, bank) = default_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = GeneratorInput::sample(&backbone.cfg, &mut rng);
        let short = crate::key::RoutingPath::new(vec![0; 3], 4).unwrap();
        assert!(render_marked(&backbone, &bank, &short, &input).is_err());
        let wrong_p = crate::key::RoutingPath::new(vec![0; 8], 8).unwrap();
        assert!(render_marked(&backbone, &bank, &wrong_p, &input).is_err());
    }
}
