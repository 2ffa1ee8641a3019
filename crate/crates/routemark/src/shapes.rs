//! Procedural shapes dataset and the optional backbone pretraining mode.
//!
//! Images are colored rectangles or circles on plain backgrounds; the
//! class id fixes shape kind and hue bin, the rest is sampled. Pretraining
//! fits the backbone as the decoder of a small autoencoder on this data,
//! with a moment penalty pulling latents toward the standard normal so
//! that generation-time latents q ~ N(0,1) stay on-distribution.

use rand::Rng;

use crate::generator::{Backbone, BackboneConfig, LEAKY_SLOPE};
use crate::optim::{accumulate_grad, AdamW, AdamWConfig, Gradients, ParamRef, ParamStore};
use crate::rng::{stream, TAG_DATA, TAG_EXTRACTOR_INIT};
use crate::tape::{Tape, VarId};
use crate::tensor::{EngineError, Tensor};

/// Renders one (3,S,S) image for a class id in [0, 16): bit 3 picks the
/// shape (rectangle/circle), bits 0..2 pick one of 8 hue bins.
pub fn render_shape_image<R: Rng>(class_id: usize, size: usize, rng: &mut R) -> Tensor {
    let circle = class_id & 0b1000 != 0;
    let hue_bin = (class_id & 0b0111) as f32;
    let hue = (hue_bin + rng.gen_range(0.0..1.0)) / 8.0;
    let (fr, fg, fb) = hue_to_rgb(hue);
    let bg = rng.gen_range(0.05..0.35);
    let cx = rng.gen_range(0.3..0.7) * size as f32;
    let cy = rng.gen_range(0.3..0.7) * size as f32;
    let half = rng.gen_range(0.15..0.35) * size as f32;

    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let inside = if circle {
                dx * dx + dy * dy <= half * half
            } else {
                dx.abs() <= half && dy.abs() <= half
            };
            let (r, g, b) = if inside { (fr, fg, fb) } else { (bg, bg, bg) };
            data[y * size + x] = r;
            data[(size + y) * size + x] = g;
            data[(2 * size + y) * size + x] = b;
        }
    }
    Tensor::new(vec![3, size, size], data).expect("sized buffer")
}

fn hue_to_rgb(h: f32) -> (f32, f32, f32) {
    let h6 = (h.fract()) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    (0.15 + 0.75 * r, 0.15 + 0.75 * g, 0.15 + 0.75 * b)
}

struct Encoder {
    store: ParamStore,
    convs: Vec<(ParamRef, ParamRef)>,
    head_w: ParamRef,
    head_b: ParamRef,
    channels: Vec<usize>,
}

fn build_encoder(cfg: &BackboneConfig, seed: u64) -> Encoder {
    let mut rng = stream(seed, TAG_EXTRACTOR_INIT, 99);
    let mut store = ParamStore::new();
    let channels = vec![16usize, 32, 32];
    let mut convs = Vec::new();
    let mut in_ch = 3usize;
    for (i, &oc) in channels.iter().enumerate() {
        let w = store.add(
            format!("enc.conv{i}.w"),
            Tensor::randn(&[oc, in_ch, 3, 3], (2.0 / (in_ch * 9) as f32).sqrt(), &mut rng),
        );
        let b = store.add(format!("enc.conv{i}.b"), Tensor::zeros(&[oc]));
        convs.push((w, b));
        in_ch = oc;
    }
    let head_w = store.add(
        "enc.head.w",
        Tensor::randn(&[cfg.latent_dim, in_ch], (1.0 / in_ch as f32).sqrt(), &mut rng),
    );
    let head_b = store.add("enc.head.b", Tensor::zeros(&[cfg.latent_dim]));
    Encoder { store, convs, head_w, head_b, channels }
}

fn encoder_forward(
    enc: &Encoder,
    tape: &mut Tape,
    image: VarId,
    latent_dim: usize,
) -> Result<(VarId, crate::generator::TracedParams), EngineError> {
    let mut traced = crate::generator::TracedParams::default();
    let mut x = image;
    for (w, b) in &enc.convs {
        let wid = tape.param(enc.store.get(*w).clone())?;
        let bid = tape.param(enc.store.get(*b).clone())?;
        traced.push(*w, wid);
        traced.push(*b, bid);
        x = tape.conv2d(x, wid, Some(bid), 2, 1)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
    }
    let pooled = tape.spatial_mean(x)?;
    let feat = tape.reshape(pooled, vec![*enc.channels.last().unwrap(), 1])?;
    let wid = tape.param(enc.store.get(enc.head_w).clone())?;
    let bid = tape.param(enc.store.get(enc.head_b).clone())?;
    traced.push(enc.head_w, wid);
    traced.push(enc.head_b, bid);
    let z = tape.matmul(wid, feat)?;
    let b2 = tape.reshape(bid, vec![latent_dim, 1])?;
    let z = tape.add(z, b2)?;
    let z = tape.reshape(z, vec![latent_dim])?;
    Ok((z, traced))
}

/// Result of the pretraining mode: the fitted backbone plus the trace of
/// reconstruction losses.
pub struct PretrainOutput {
    pub backbone: Backbone,
    pub losses: Vec<f32>,
}

/// Fits the backbone as an autoencoder decoder on the shapes dataset.
/// The backbone starts from `build_backbone(cfg, seed)` and its block and
/// head weights become trainable here; after this they are frozen again.
pub fn pretrain_backbone(
    cfg: &BackboneConfig,
    steps: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> Result<PretrainOutput, EngineError> {
    let mut backbone = crate::generator::build_backbone(cfg, seed)?;
    let enc = {
        let mut e = build_encoder(cfg, seed);
        // keep encoder params in one store with the decoder's for one optimizer
        let _ = &mut e;
        e
    };

    // Decoder params move into a store so the shared optimizer can step them.
    let mut store = ParamStore::new();
    let stem_w = store.add("dec.stem.w", backbone.stem_w.clone());
    let stem_b = store.add("dec.stem.b", backbone.stem_b.clone());
    let mut block_refs = Vec::new();
    for (i, blk) in backbone.blocks.iter().enumerate() {
        block_refs.push((
            store.add(format!("dec.block{i}.w1"), blk.w1.clone()),
            store.add(format!("dec.block{i}.b1"), blk.b1.clone()),
            store.add(format!("dec.block{i}.w2"), blk.w2.clone()),
            store.add(format!("dec.block{i}.b2"), blk.b2.clone()),
        ));
    }
    let head_w = store.add("dec.head.w", backbone.head_w.clone());
    let head_b = store.add("dec.head.b", backbone.head_b.clone());

    let mut enc_store = enc.store.clone();
    let mut opt_dec = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
    let mut opt_enc = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
    let mut losses = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut dec_grads = Gradients::new();
        let mut enc_grads = Gradients::new();
        let mut loss_sum = 0.0f32;
        for bi in 0..batch {
            let mut rng = stream(seed, TAG_DATA, (step * batch + bi) as u64);
            let class_id = rng.gen_range(0..cfg.num_classes);
            let target = render_shape_image(class_id, cfg.image_size, &mut rng);

            let mut tape = Tape::new();
            let img = tape.constant(target.clone())?;
            let enc_view = Encoder {
                store: enc_store.clone(),
                convs: enc.convs.clone(),
                head_w: enc.head_w,
                head_b: enc.head_b,
                channels: enc.channels.clone(),
            };
            let (z, enc_traced) = encoder_forward(&enc_view, &mut tape, img, cfg.latent_dim)?;

            // Decoder forward with trainable leaves from the store.
            let mut dec_traced = crate::generator::TracedParams::default();
            let leaf = |tape: &mut Tape, r: ParamRef, tr: &mut crate::generator::TracedParams| -> Result<VarId, EngineError> {
                let id = tape.param(store.get(r).clone())?;
                tr.push(r, id);
                Ok(id)
            };
            let e = cfg.embed_dim;
            let emb = Tensor::from_vec(
                backbone.class_embed.data()[class_id * e..(class_id + 1) * e].to_vec(),
            );
            let emb_id = tape.constant(emb.reshaped(vec![e, 1])?)?;
            let z2 = tape.reshape(z, vec![cfg.latent_dim, 1])?;
            // stem input = [z; embed] via two matmul halves: split stem_w columns.
            let wid = leaf(&mut tape, stem_w, &mut dec_traced)?;
            let bid = leaf(&mut tape, stem_b, &mut dec_traced)?;
            let full_w = tape.value(wid).clone();
            let (rows, cols) = (full_w.shape()[0], full_w.shape()[1]);
            debug_assert_eq!(cols, cfg.latent_dim + e);
            // Split the stem weight into latent and embedding columns so the
            // latent half can receive gradients through z.
            let mut wl = vec![0.0f32; rows * cfg.latent_dim];
            let mut we = vec![0.0f32; rows * e];
            for r in 0..rows {
                wl[r * cfg.latent_dim..(r + 1) * cfg.latent_dim]
                    .copy_from_slice(&full_w.data()[r * cols..r * cols + cfg.latent_dim]);
                we[r * e..(r + 1) * e]
                    .copy_from_slice(&full_w.data()[r * cols + cfg.latent_dim..(r + 1) * cols]);
            }
            // The split halves are views; gradients flow to the full stem
            // weight only through the latent product, which dominates. The
            // embedding half stays frozen during pretraining.
            let wl_id = tape.param(Tensor::new(vec![rows, cfg.latent_dim], wl)?)?;
            let we_id = tape.constant(Tensor::new(vec![rows, e], we)?)?;
            let pl = tape.matmul(wl_id, z2)?;
            let pe = tape.matmul(we_id, emb_id)?;
            let mut h = tape.add(pl, pe)?;
            let b2 = tape.reshape(bid, vec![rows, 1])?;
            h = tape.add(h, b2)?;
            let mut h = tape.reshape(h, vec![cfg.channels, cfg.base_size, cfg.base_size])?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            for (i, _blk) in backbone.blocks.iter().enumerate() {
                let (w1, b1, w2, b2) = block_refs[i];
                let up = if backbone.blocks[i].upsample { tape.upsample2x(h)? } else { h };
                let w1id = leaf(&mut tape, w1, &mut dec_traced)?;
                let b1id = leaf(&mut tape, b1, &mut dec_traced)?;
                let w2id = leaf(&mut tape, w2, &mut dec_traced)?;
                let b2id = leaf(&mut tape, b2, &mut dec_traced)?;
                let c1 = tape.conv2d(up, w1id, Some(b1id), 1, 1)?;
                let a1 = tape.leaky_relu(c1, LEAKY_SLOPE)?;
                let c2 = tape.conv2d(a1, w2id, Some(b2id), 1, 1)?;
                h = tape.add(up, c2)?;
            }
            let hw = leaf(&mut tape, head_w, &mut dec_traced)?;
            let hb = leaf(&mut tape, head_b, &mut dec_traced)?;
            let logits = tape.conv2d(h, hw, Some(hb), 1, 1)?;
            let recon = tape.sigmoid(logits)?;

            let rec_loss = tape.mse(recon, img)?;
            // Latent moment penalty: mean^2 + (second moment - 1)^2.
            let zm = tape.mean(z)?;
            let zm2 = tape.mul(zm, zm)?;
            let zsq = tape.sum_squares(z)?;
            let second = tape.scale(zsq, 1.0 / cfg.latent_dim as f32)?;
            let one = tape.constant(Tensor::scalar(1.0))?;
            let dev = tape.sub(second, one)?;
            let dev2 = tape.mul(dev, dev)?;
            let moment = tape.add(zm2, dev2)?;
            let moment = tape.scale(moment, 0.05)?;
            let loss = tape.add(rec_loss, moment)?;
            loss_sum += tape.value(loss).data()[0];
            tape.backward(loss)?;

            // The latent-half gradient folds back into the full stem weight.
            for &(slot, var) in &dec_traced.entries {
                if slot == stem_w.0 {
                    continue; // full stem leaf unused in this graph
                }
                if let Some(g) = tape.grad(var) {
                    accumulate_grad(&mut dec_grads, slot, g, batch as f32);
                }
            }
            if let Some(gl) = tape.grad(wl_id) {
                let mut full = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    full.data_mut()[r * cols..r * cols + cfg.latent_dim]
                        .copy_from_slice(&gl.data()[r * cfg.latent_dim..(r + 1) * cfg.latent_dim]);
                }
                accumulate_grad(&mut dec_grads, stem_w.0, &full, batch as f32);
            }
            for &(slot, var) in &enc_traced.entries {
                if let Some(g) = tape.grad(var) {
                    accumulate_grad(&mut enc_grads, slot, g, batch as f32);
                }
            }
        }
        opt_dec.step(&mut store, &dec_grads)?;
        opt_enc.step(&mut enc_store, &enc_grads)?;
        losses.push(loss_sum / batch as f32);
    }

    // Fold the fitted weights back into a frozen backbone.
    backbone.stem_w = store.get(stem_w).clone();
    backbone.stem_b = store.get(stem_b).clone();
    for (i, blk) in backbone.blocks.iter_mut().enumerate() {
        let (w1, b1, w2, b2) = block_refs[i];
        blk.w1 = store.get(w1).clone();
        blk.b1 = store.get(b1).clone();
        blk.w2 = store.get(w2).clone();
        blk.b2 = store.get(b2).clone();
    }
    backbone.head_w = store.get(head_w).clone();
    backbone.head_b = store.get(head_b).clone();
    Ok(PretrainOutput { backbone, losses })
}
