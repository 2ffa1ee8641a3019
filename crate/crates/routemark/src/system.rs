//! A trained (or training) watermarking system: frozen backbone, adapter
//! bank and extractor, with bit-exact checkpoint round-trips.

use std::path::Path;

use crate::checkpoint::{CheckpointError, Container};
use crate::config::ExperimentConfig;
use crate::extractor::{build_extractor, Extractor, ExtractorConfig};
use crate::generator::{
    build_backbone, build_marker_bank, render_clean, render_marked, Backbone, GeneratorInput,
    MarkerBank,
};
use crate::key::{encode_routing, KeyError, RoutingPath, WatermarkKey};
use crate::metrics::psnr;
use crate::optim::{AdamW, ParamRef};
use crate::rng::{stream, TAG_EVAL};
use crate::tensor::{EngineError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint belongs to a different configuration (hash {found:#018x}, expected {expected:#018x})")]
    ConfigHashMismatch { found: u64, expected: u64 },
}

pub struct System {
    pub backbone: Backbone,
    pub bank: MarkerBank,
    pub extractor: Extractor,
    pub config_hash: u64,
}

impl System {
    /// Builds a fresh system from a validated experiment config.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, SystemError> {
        cfg.validate()?;
        let backbone = build_backbone(&cfg.backbone, cfg.seed)?;
        let bank = build_marker_bank(&cfg.backbone, &cfg.key, cfg.seed)?;
        let ext_cfg = ExtractorConfig {
            key_bits: bank.key_bits(),
            input_size: cfg.backbone.image_size,
            conv_channels: cfg.extractor_channels.clone(),
        };
        let extractor = build_extractor(&ext_cfg, cfg.seed)?;
        Ok(Self { backbone, bank, extractor, config_hash: cfg.config_hash() })
    }

    pub fn key_bits(&self) -> usize {
        self.bank.key_bits()
    }

    pub fn path_for_key(&self, key: &WatermarkKey) -> Result<RoutingPath, KeyError> {
        encode_routing(key, self.bank.units(), self.bank.layout.paths)
    }

    pub fn render_clean(&self, input: &GeneratorInput) -> Result<Tensor, EngineError> {
        render_clean(&self.backbone, input)
    }

    pub fn render_marked(
        &self,
        key: &WatermarkKey,
        input: &GeneratorInput,
    ) -> Result<Tensor, SystemError> {
        let path = self.path_for_key(key)?;
        Ok(render_marked(&self.backbone, &self.bank, &path, input)?)
    }

    /// Clean and marked render of the same (latent, class) pair.
    pub fn render_pair(
        &self,
        key: &WatermarkKey,
        input: &GeneratorInput,
    ) -> Result<(Tensor, Tensor), SystemError> {
        Ok((self.render_clean(input)?, self.render_marked(key, input)?))
    }

    // -- checkpointing ----------------------------------------------------

    fn backbone_entries(&self, c: &mut Container) {
        let b = &self.backbone;
        c.insert_tensor("backbone.stem.w", &b.stem_w);
        c.insert_tensor("backbone.stem.b", &b.stem_b);
        c.insert_tensor("backbone.class_embed", &b.class_embed);
        for (i, blk) in b.blocks.iter().enumerate() {
            c.insert_tensor(format!("backbone.block{i}.w1"), &blk.w1);
            c.insert_tensor(format!("backbone.block{i}.b1"), &blk.b1);
            c.insert_tensor(format!("backbone.block{i}.w2"), &blk.w2);
            c.insert_tensor(format!("backbone.block{i}.b2"), &blk.b2);
        }
        c.insert_tensor("backbone.head.w", &b.head_w);
        c.insert_tensor("backbone.head.b", &b.head_b);
    }

    /// Serializes the whole system plus optional optimizer state.
    pub fn to_container(
        &self,
        step: u64,
        opt_bank: Option<&AdamW>,
        opt_ext: Option<&AdamW>,
    ) -> Container {
        let mut c = Container::new();
        c.insert_u64("meta.step", step);
        c.insert_u64("meta.config_hash", self.config_hash);

        let bc = &self.backbone.cfg;
        c.insert_u64s(
            "cfg.backbone",
            &[
                bc.blocks as u64,
                bc.channels as u64,
                bc.base_size as u64,
                bc.image_size as u64,
                bc.latent_dim as u64,
                bc.num_classes as u64,
                bc.embed_dim as u64,
            ],
        );
        let kl = &self.bank.layout;
        c.insert_u64s(
            "cfg.key",
            &[kl.paths as u64, kl.rank as u64, u64::from(kl.per_conv)],
        );
        c.insert_tensor("cfg.key.alpha", &Tensor::scalar(kl.alpha));
        c.insert_u64s(
            "cfg.key.routed_blocks",
            &self.bank.routed_blocks.iter().map(|&b| b as u64).collect::<Vec<_>>(),
        );
        let ec = &self.extractor.cfg;
        c.insert_u64s("cfg.ext", &[ec.key_bits as u64, ec.input_size as u64]);
        c.insert_u64s(
            "cfg.ext.conv_channels",
            &ec.conv_channels.iter().map(|&x| x as u64).collect::<Vec<_>>(),
        );

        self.backbone_entries(&mut c);
        for (_, name, t) in self.bank.store.iter() {
            c.insert_tensor(name, t);
        }
        for (_, name, t) in self.extractor.store.iter() {
            c.insert_tensor(name, t);
        }
        if let Some(opt) = opt_bank {
            insert_optimizer(&mut c, "opt.bank", opt, self.bank.store.len());
        }
        if let Some(opt) = opt_ext {
            insert_optimizer(&mut c, "opt.ext", opt, self.extractor.store.len());
        }
        c
    }

    pub fn save(
        &self,
        path: &Path,
        step: u64,
        opt_bank: Option<&AdamW>,
        opt_ext: Option<&AdamW>,
    ) -> Result<(), SystemError> {
        Ok(self.to_container(step, opt_bank, opt_ext).save(path)?)
    }

    /// Restores a system from a container. The caller supplies the config
    /// whose hash must match unless `allow_hash_mismatch`.
    pub fn from_container(c: &Container, cfg: &ExperimentConfig) -> Result<(Self, u64), SystemError> {
        let found = c.u64("meta.config_hash")?;
        let expected = cfg.config_hash();
        if found != expected {
            return Err(SystemError::ConfigHashMismatch { found, expected });
        }
        let mut sys = Self::build(cfg)?;
        // Overwrite every tensor by name; structure comes from the config.
        let b = &mut sys.backbone;
        b.stem_w = c.tensor("backbone.stem.w")?;
        b.stem_b = c.tensor("backbone.stem.b")?;
        b.class_embed = c.tensor("backbone.class_embed")?;
        for (i, blk) in b.blocks.iter_mut().enumerate() {
            blk.w1 = c.tensor(&format!("backbone.block{i}.w1"))?;
            blk.b1 = c.tensor(&format!("backbone.block{i}.b1"))?;
            blk.w2 = c.tensor(&format!("backbone.block{i}.w2"))?;
            blk.b2 = c.tensor(&format!("backbone.block{i}.b2"))?;
        }
        b.head_w = c.tensor("backbone.head.w")?;
        b.head_b = c.tensor("backbone.head.b")?;
        for i in 0..sys.bank.store.len() {
            let name = sys.bank.store.name(ParamRef(i)).to_string();
            *sys.bank.store.get_mut(ParamRef(i)) = c.tensor(&name)?;
        }
        for i in 0..sys.extractor.store.len() {
            let name = sys.extractor.store.name(ParamRef(i)).to_string();
            *sys.extractor.store.get_mut(ParamRef(i)) = c.tensor(&name)?;
        }
        let step = c.u64("meta.step")?;
        Ok((sys, step))
    }

    pub fn load(path: &Path, cfg: &ExperimentConfig) -> Result<(Self, u64), SystemError> {
        let c = Container::load(path)?;
        Self::from_container(&c, cfg)
    }

    /// Restores optimizer state saved next to the parameters, if present.
    pub fn load_optimizers(
        c: &Container,
        opt_bank: &mut AdamW,
        opt_ext: &mut AdamW,
    ) -> Result<(), SystemError> {
        restore_optimizer(c, "opt.bank", opt_bank)?;
        restore_optimizer(c, "opt.ext", opt_ext)?;
        Ok(())
    }
}

fn insert_optimizer(c: &mut Container, prefix: &str, opt: &AdamW, slots: usize) {
    let mut ts = Vec::with_capacity(slots);
    for slot in 0..slots {
        match opt.slot_state(slot) {
            Some((m, v, t)) => {
                c.insert_tensor(format!("{prefix}.{slot}.m"), m);
                c.insert_tensor(format!("{prefix}.{slot}.v"), v);
                ts.push(t);
            }
            None => ts.push(0),
        }
    }
    c.insert_u64s(format!("{prefix}.t"), &ts);
}

fn restore_optimizer(c: &Container, prefix: &str, opt: &mut AdamW) -> Result<(), CheckpointError> {
    let name = format!("{prefix}.t");
    if !c.contains(&name) {
        return Ok(()); // checkpoint without optimizer state
    }
    let ts = c.u64s(&name)?.to_vec();
    for (slot, &t) in ts.iter().enumerate() {
        if t > 0 {
            let m = c.tensor(&format!("{prefix}.{slot}.m"))?;
            let v = c.tensor(&format!("{prefix}.{slot}.v"))?;
            opt.restore_slot(slot, m, v, t);
        }
    }
    Ok(())
}

/// Clean-image quality and decodability of a system, measured on fresh
/// probe pairs (new key, latent and class per probe).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub bit_acc: f64,
    pub mean_psnr: f64,
}

pub fn evaluate_clean(system: &System, probes: usize, seed: u64) -> Result<EvalStats, SystemError> {
    let m = system.key_bits();
    let mut acc = 0.0f64;
    let mut psnr_sum = 0.0f64;
    for i in 0..probes {
        let mut rng = stream(seed, TAG_EVAL, i as u64);
        let key = crate::key::sample_key_with(m, &mut rng);
        let input = GeneratorInput::sample(&system.backbone.cfg, &mut rng);
        let (clean, marked) = system.render_pair(&key, &input)?;
        let decoded = system.extractor.extract_key(&marked)?;
        let matches = decoded.hamming_distance(&key).map(|d| m - d)?;
        acc += matches as f64 / m as f64;
        psnr_sum += psnr(&marked, &clean)?;
    }
    Ok(EvalStats { bit_acc: acc / probes as f64, mean_psnr: psnr_sum / probes as f64 })
}
