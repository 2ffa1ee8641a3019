//! Central finite-difference verification of the tape's analytic gradients.
//!
//! The difference quotients are taken against an independent f64 re-walk
//! of the recorded graph (naive loops, no shared kernel code), so the
//! check is not limited by f32 rounding in the loss and stays meaningful
//! at tolerance 1e-3 with an absolute floor of 1e-6.

use std::collections::HashMap;

use crate::tape::{Op, Tape, VarId};

/// Evaluates the value of `target` in f64, with selected leaves replaced
/// by perturbed copies.
pub fn eval_f64(tape: &Tape, overrides: &HashMap<usize, Vec<f64>>, target: VarId) -> Vec<f64> {
    let mut vals: Vec<Option<Vec<f64>>> = vec![None; target.0 + 1];
    for id in 0..=target.0 {
        let v = match tape.op(VarId(id)) {
            Op::Leaf { .. } => overrides
                .get(&id)
                .cloned()
                .unwrap_or_else(|| tape.values[id].data().iter().map(|&x| f64::from(x)).collect()),
            Op::Add(a, b) => zip2(&vals, *a, *b, |x, y| x + y),
            Op::Sub(a, b) => zip2(&vals, *a, *b, |x, y| x - y),
            Op::Mul(a, b) => zip2(&vals, *a, *b, |x, y| x * y),
            Op::Scale(a, f) => vals[a.0].as_ref().unwrap().iter().map(|x| x * f64::from(*f)).collect(),
            Op::Matmul(a, b) => {
                let (m, k) = (tape.values[a.0].shape()[0], tape.values[a.0].shape()[1]);
                let n = tape.values[b.0].shape()[1];
                let av = vals[a.0].as_ref().unwrap();
                let bv = vals[b.0].as_ref().unwrap();
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += av[i * k + p] * bv[p * n + j];
                        }
                        out[i * n + j] = s;
                    }
                }
                out
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = tape.values[x.0].shape();
                let ws = tape.values[w.0].shape();
                let (ic, h, wd) = (xs[0], xs[1], xs[2]);
                let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = tape.values[id].shape();
                let (oh, ow) = (os[1], os[2]);
                let xv = vals[x.0].as_ref().unwrap();
                let wv = vals[w.0].as_ref().unwrap();
                let bv = b.map(|bid| vals[bid.0].as_ref().unwrap().clone());
                let mut out = vec![0.0f64; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bv.as_ref().map_or(0.0, |bb| bb[o]);
                            for i in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                            s += xv[(i * h + iy as usize) * wd + ix as usize]
                                                * wv[((o * ic + i) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                out
            }
            Op::Upsample2x(a) => {
                let s = tape.values[a.0].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let av = vals[a.0].as_ref().unwrap();
                let mut out = vec![0.0f64; c * 4 * h * w];
                for ci in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[(ci * 2 * h + y) * 2 * w + x] = av[(ci * h + y / 2) * w + x / 2];
                        }
                    }
                }
                out
            }
            Op::AvgPool2x(a) => {
                let s = tape.values[a.0].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let av = vals[a.0].as_ref().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0f64; c * oh * ow];
                for ci in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let base = (ci * h + 2 * y) * w + 2 * x;
                            out[(ci * oh + y) * ow + x] =
                                0.25 * (av[base] + av[base + 1] + av[base + w] + av[base + w + 1]);
                        }
                    }
                }
                out
            }
            Op::LeakyRelu(a, slope) => vals[a.0]
                .as_ref()
                .unwrap()
                .iter()
                .map(|&x| if x >= 0.0 { x } else { f64::from(*slope) * x })
                .collect(),
            Op::Sigmoid(a) => vals[a.0]
                .as_ref()
                .unwrap()
                .iter()
                .map(|&x| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) })
                .collect(),
            Op::Mean(a) => {
                let av = vals[a.0].as_ref().unwrap();
                vec![av.iter().sum::<f64>() / av.len() as f64]
            }
            Op::SpatialMean(a) => {
                let s = tape.values[a.0].shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let av = vals[a.0].as_ref().unwrap();
                (0..c).map(|ci| av[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
            }
            Op::Mse(a, b) => {
                let av = vals[a.0].as_ref().unwrap();
                let bv = vals[b.0].as_ref().unwrap();
                let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
                vec![s / av.len() as f64]
            }
            Op::SumSquares(a) => {
                vec![vals[a.0].as_ref().unwrap().iter().map(|x| x * x).sum()]
            }
            Op::BceWithLogits { logits, targets } => {
                let uv = vals[logits.0].as_ref().unwrap();
                let s: f64 = uv
                    .iter()
                    .zip(targets.iter())
                    .map(|(&u, &t)| u.max(0.0) - f64::from(t) * u + (-u.abs()).exp().ln_1p())
                    .sum();
                vec![s / targets.len() as f64]
            }
            Op::Warp { x, plan } => {
                let s = tape.values[x.0].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (plan.out_h, plan.out_w);
                let xv = vals[x.0].as_ref().unwrap();
                let mut out = vec![0.0f64; c * oh * ow];
                // Re-derive the map from the f32 plan's taps; the taps ARE
                // the linear operator, only the arithmetic is upcast.
                let f32_plan_applied = |ci: usize, out: &mut [f64]| {
                    let src = &xv[ci * h * w..(ci + 1) * h * w];
                    for (dst, sidx, wt) in plan_taps(plan) {
                        out[dst] += f64::from(wt) * src[sidx];
                    }
                };
                for ci in 0..c {
                    let (lo, hi) = (ci * oh * ow, (ci + 1) * oh * ow);
                    f32_plan_applied(ci, &mut out[lo..hi]);
                }
                out
            }
            Op::Clamp01(a) => vals[a.0].as_ref().unwrap().iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            Op::Reshape(a) | Op::StraightThrough(a) => vals[a.0].as_ref().unwrap().clone(),
        };
        vals[id] = Some(v);
    }
    vals[target.0].take().unwrap()
}

fn zip2(vals: &[Option<Vec<f64>>], a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    vals[a.0]
        .as_ref()
        .unwrap()
        .iter()
        .zip(vals[b.0].as_ref().unwrap())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn plan_taps(plan: &crate::tensor::WarpPlan) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
    plan.taps_iter().map(|&(d, s, w)| (d as usize, s as usize, w))
}

/// Worst element found by [`check_tape_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (leaf, element, analytic, numeric)
}

/// Verifies every element of every listed leaf's gradient against central
/// differences. Pass rule per element: |analytic - numeric| <
/// abs_floor + rel_tol * max(|analytic|, |numeric|).
pub fn check_tape_gradients(
    tape: &mut Tape,
    loss: VarId,
    leaves: &[VarId],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckSummary, String> {
    tape.backward(loss).map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    let mut worst = None;
    for &leaf in leaves {
        let analytic: Vec<f64> = match tape.grad(leaf) {
            Some(g) => g.data().iter().map(|&x| f64::from(x)).collect(),
            None => vec![0.0; tape.value(leaf).numel()],
        };
        let base: Vec<f64> = tape.value(leaf).data().iter().map(|&x| f64::from(x)).collect();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut overrides = HashMap::new();
            overrides.insert(leaf.0, plus);
            let fp = eval_f64(tape, &overrides, loss)[0];
            overrides.insert(leaf.0, minus);
            let fm = eval_f64(tape, &overrides, loss)[0];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let tol = abs_floor + rel_tol * a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            let scaled = err / tol.max(f64::MIN_POSITIVE);
            checked += 1;
            if scaled > max_err {
                max_err = scaled;
                worst = Some((leaf.0, i, a, numeric));
            }
            if err > tol {
                return Err(format!(
                    "gradient mismatch at leaf {} element {i}: analytic {a:.6e}, numeric {numeric:.6e}",
                    leaf.0
                ));
            }
        }
    }
    Ok(GradCheckSummary { checked, max_err, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rotate_plan, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn check(build: impl Fn(&mut Tape) -> (VarId, Vec<VarId>)) {
        let mut tape = Tape::new();
        let (loss, leaves) = build(&mut tape);
        check_tape_gradients(&mut tape, loss, &leaves, 1e-3, 1e-3, 1e-6).unwrap();
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(&[3], 0.5, &mut rng);
        let r = Tensor::randn(&[3, 5, 5], 1.0, &mut rng);
        check(move |tape| {
            let x = tape.param(x0.clone()).unwrap();
            let w = tape.param(w0.clone()).unwrap();
            let b = tape.param(b0.clone()).unwrap();
            let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
            let rc = tape.constant(r.clone()).unwrap();
            let yr = tape.mul(y, rc).unwrap();
            let m = tape.mean(yr).unwrap();
            let loss = tape.scale(m, 75.0).unwrap();
            (loss, vec![x, w, b])
        });
    }

    #[test]
    fn warp_and_activation_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(&[1, 6, 6], 1.0, &mut rng);
        let r = Tensor::randn(&[1, 6, 6], 1.0, &mut rng);
        check(move |tape| {
            let x = tape.param(x0.clone()).unwrap();
            let w = tape.warp(x, Arc::new(rotate_plan(6, 6, 17.0))).unwrap();
            let a = tape.leaky_relu(w, 0.2).unwrap();
            let s = tape.sigmoid(a).unwrap();
            let rc = tape.constant(r.clone()).unwrap();
            let m = tape.mul(s, rc).unwrap();
            let mm = tape.mean(m).unwrap();
            let loss = tape.scale(mm, 36.0).unwrap();
            (loss, vec![x])
        });
    }

    #[test]
    fn reduction_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let b0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
        check(move |tape| {
            let a = tape.param(a0.clone()).unwrap();
            let b = tape.param(b0.clone()).unwrap();
            let d = tape.mse(a, b).unwrap();
            let s = tape.sub(a, b).unwrap();
            let sq = tape.sum_squares(s).unwrap();
            let loss = tape.add(d, sq).unwrap();
            (loss, vec![a, b])
        });
    }
}
