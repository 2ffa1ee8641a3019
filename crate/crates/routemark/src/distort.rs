//! Image distortion battery: geometric and photometric transforms, a JPEG
//! proxy (blockwise DCT quantization) and Gaussian noise/blur.
//!
//! Each distortion has one implementation, recorded on a tape. Training
//! applies them inside the verifiability loss with gradients (bilinear
//! warps are exact linear maps, clamps pass subgradients, the JPEG proxy
//! is straight-through); the attack harness applies the same ops to
//! constant leaves and keeps the value.

use std::sync::Arc;

use rand::Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::{
    blur_plans, crop_resize_plan, resize_bilinear_plan, rotate_plan, EngineError, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum DistortError {
    #[error("distortion parameter out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One member of the distortion battery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distortion {
    Identity,
    /// Centered removal of this fraction of the image area, resized back.
    Crop { area_fraction: f32 },
    /// Rotation about the center, bilinear, reflect padding.
    Rotate { degrees: f32 },
    /// Bilinear downscale to `scale` then back up.
    Resize { scale: f32 },
    /// clamp(factor * x).
    Brightness { factor: f32 },
    /// Per-channel 8x8 DCT with the standard luminance table at `quality`.
    JpegProxy { quality: u8 },
    /// Additive Gaussian noise, clamped.
    GaussianNoise { sigma: f32 },
    /// Gaussian blur with the given sigma.
    Blur { sigma: f32 },
}

impl Distortion {
    pub fn validate(&self) -> Result<(), DistortError> {
        let bad = |msg: String| Err(DistortError::OutOfRange(msg));
        match *self {
            Distortion::Identity => Ok(()),
            Distortion::Crop { area_fraction } => {
                if (0.0..=0.9).contains(&area_fraction) {
                    Ok(())
                } else {
                    bad(format!("crop area fraction {area_fraction} not in [0, 0.9]"))
                }
            }
            Distortion::Rotate { degrees } => {
                if (-360.0..=360.0).contains(&degrees) {
                    Ok(())
                } else {
                    bad(format!("rotation {degrees} deg not in [-360, 360]"))
                }
            }
            Distortion::Resize { scale } => {
                if (0.1..=1.0).contains(&scale) {
                    Ok(())
                } else {
                    bad(format!("resize scale {scale} not in [0.1, 1]"))
                }
            }
            Distortion::Brightness { factor } => {
                if (0.1..=4.0).contains(&factor) {
                    Ok(())
                } else {
                    bad(format!("brightness factor {factor} not in [0.1, 4]"))
                }
            }
            Distortion::JpegProxy { quality } => {
                if (1..=100).contains(&quality) {
                    Ok(())
                } else {
                    bad(format!("jpeg quality {quality} not in [1, 100]"))
                }
            }
            Distortion::GaussianNoise { sigma } => {
                if (0.0..=0.5).contains(&sigma) {
                    Ok(())
                } else {
                    bad(format!("noise sigma {sigma} not in [0, 0.5]"))
                }
            }
            Distortion::Blur { sigma } => {
                if (0.0..=5.0).contains(&sigma) {
                    Ok(())
                } else {
                    bad(format!("blur sigma {sigma} not in [0, 5]"))
                }
            }
        }
    }

    /// Short token used in CSV rows, e.g. `crop(0.50)` or `jpeg(q=50)`.
    pub fn label(&self) -> String {
        match *self {
            Distortion::Identity => "identity".into(),
            Distortion::Crop { area_fraction } => format!("crop({area_fraction:.2})"),
            Distortion::Rotate { degrees } => format!("rotate({degrees:.1})"),
            Distortion::Resize { scale } => format!("resize({scale:.2})"),
            Distortion::Brightness { factor } => format!("brightness({factor:.2})"),
            Distortion::JpegProxy { quality } => format!("jpeg(q={quality})"),
            Distortion::GaussianNoise { sigma } => format!("noise({sigma:.3})"),
            Distortion::Blur { sigma } => format!("blur({sigma:.2})"),
        }
    }
}

/// Records the distortion on a tape. The input must be a (C,H,W) image in
/// [0,1]. Stochastic kinds draw from `rng`.
pub fn apply_traced<R: Rng>(
    tape: &mut Tape,
    x: VarId,
    d: &Distortion,
    rng: &mut R,
) -> Result<VarId, DistortError> {
    d.validate()?;
    let shape = tape.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let out = match *d {
        Distortion::Identity => x,
        Distortion::Crop { area_fraction } => {
            tape.warp(x, Arc::new(crop_resize_plan(h, w, area_fraction)))?
        }
        Distortion::Rotate { degrees } => tape.warp(x, Arc::new(rotate_plan(h, w, degrees)))?,
        Distortion::Resize { scale } => {
            let dh = ((h as f32 * scale).round() as usize).max(1);
            let dw = ((w as f32 * scale).round() as usize).max(1);
            let down = tape.warp(x, Arc::new(resize_bilinear_plan(h, w, dh, dw)))?;
            tape.warp(down, Arc::new(resize_bilinear_plan(dh, dw, h, w)))?
        }
        Distortion::Brightness { factor } => {
            let scaled = tape.scale(x, factor)?;
            tape.clamp01(scaled)?
        }
        Distortion::JpegProxy { quality } => {
            let y = jpeg_proxy(tape.value(x), quality)?;
            tape.straight_through(x, y)?
        }
        Distortion::GaussianNoise { sigma } => {
            let noise = Tensor::randn(&shape, sigma, rng);
            let n = tape.constant(noise)?;
            let sum = tape.add(x, n)?;
            tape.clamp01(sum)?
        }
        Distortion::Blur { sigma } => {
            if sigma == 0.0 {
                x
            } else {
                let (rows, cols) = blur_plans(h, w, sigma);
                let a = tape.warp(x, Arc::new(rows))?;
                tape.warp(a, Arc::new(cols))?
            }
        }
    };
    Ok(out)
}

/// Applies the distortion to a plain image; same computation as the traced
/// path, minus gradients.
pub fn apply_distortion(image: &Tensor, d: &Distortion, seed: u64) -> Result<Tensor, DistortError> {
    let mut rng = crate::rng::stream(seed, crate::rng::TAG_ATTACK, 0);
    let mut tape = Tape::new();
    let x = tape.constant(image.clone())?;
    let out = apply_traced(&mut tape, x, d, &mut rng)?;
    Ok(tape.value(out).clone())
}

// -- JPEG proxy ---------------------------------------------------------

/// Base luminance quantization table (quality 50), zig-zag-free row order.
const BASE_LUMA_TABLE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Scales the base table for a quality in [1,100] (IJG convention).
pub fn luminance_quant_table(quality: u8) -> [f32; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0f32; 64];
    for (t, &b) in table.iter_mut().zip(&BASE_LUMA_TABLE) {
        *t = (((b * s as f32) + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    table
}

fn dct8_matrix() -> [[f32; 8]; 8] {
    let mut c = [[0.0f32; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let su = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = su * ((2.0 * x as f32 + 1.0) * u as f32 * std::f32::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Per-channel blockwise DCT quantization round trip. Sizes that are not
/// multiples of 8 are reflect-padded, processed, then cropped back.
pub fn jpeg_proxy(image: &Tensor, quality: u8) -> Result<Tensor, EngineError> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(EngineError::ShapeMismatch {
                op: "jpeg_proxy",
                detail: format!("expected (C,H,W), got {s:?}"),
            })
        }
    };
    let table = luminance_quant_table(quality);
    let dct = dct8_matrix();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;

    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        j as usize
    };

    let mut out = vec![0.0f32; c * h * w];
    let mut padded = vec![0.0f32; ph * pw];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        // Shift to JPEG levels and pad.
        for y in 0..ph {
            for x in 0..pw {
                let sy = reflect(y as isize, h);
                let sx = reflect(x as isize, w);
                padded[y * pw + x] = plane[sy * w + sx] * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [[0.0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = padded[(by + y) * pw + bx + x];
                    }
                }
                // coeffs = C * block * C^T
                let mut tmp = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for y in 0..8 {
                            s += dct[u][y] * block[y][x];
                        }
                        tmp[u][x] = s;
                    }
                }
                let mut coef = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for x in 0..8 {
                            s += tmp[u][x] * dct[v][x];
                        }
                        coef[u][v] = s;
                    }
                }
                // Quantize / dequantize.
                for u in 0..8 {
                    for v in 0..8 {
                        let q = table[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
                // block = C^T * coef * C
                for y in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for u in 0..8 {
                            s += dct[u][y] * coef[u][v];
                        }
                        tmp[y][v] = s;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut s = 0.0;
                        for v in 0..8 {
                            s += tmp[y][v] * dct[v][x];
                        }
                        block[y][x] = s;
                    }
                }
                for (y, row) in block.iter().enumerate() {
                    for (x, v) in row.iter().enumerate() {
                        padded[(by + y) * pw + bx + x] = *v;
                    }
                }
            }
        }
        let out_plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out_plane[y * w + x] = ((padded[y * pw + x] + 128.0) / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image() -> Tensor {
        // Smooth gradient, values well inside [0,1].
        let mut data = vec![0.0f32; 3 * 32 * 32];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    data[(c * 32 + y) * 32 + x] =
                        0.1 + 0.7 * (x as f32 + y as f32) / 62.0 + 0.05 * c as f32;
                }
            }
        }
        Tensor::new(vec![3, 32, 32], data).unwrap()
    }

    fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.numel() as f32
    }

    #[test]
    fn brightness_factor_one_is_identity() {
        let img = ramp_image();
        let out = apply_distortion(&img, &Distortion::Brightness { factor: 1.0 }, 0).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn rotating_a_full_turn_recovers_the_input() {
        let img = ramp_image();
        let out = apply_distortion(&img, &Distortion::Rotate { degrees: 360.0 }, 0).unwrap();
        assert!(mean_abs_diff(&out, &img) < 1e-3);
    }

    #[test]
    fn jpeg_quality_100_is_near_lossless_on_smooth_gradients() {
        let img = ramp_image();
        let out = apply_distortion(&img, &Distortion::JpegProxy { quality: 100 }, 0).unwrap();
        assert!(mean_abs_diff(&out, &img) < 0.01);
    }

    #[test]
    fn jpeg_quality_50_actually_compresses() {
        let img = ramp_image();
        let q50 = apply_distortion(&img, &Distortion::JpegProxy { quality: 50 }, 0).unwrap();
        let q100 = apply_distortion(&img, &Distortion::JpegProxy { quality: 100 }, 0).unwrap();
        assert!(mean_abs_diff(&q50, &img) > mean_abs_diff(&q100, &img));
    }

    #[test]
    fn noise_is_seed_deterministic_and_clamped() {
        let img = ramp_image();
        let d = Distortion::GaussianNoise { sigma: 0.05 };
        let a = apply_distortion(&img, &d, 3).unwrap();
        let b = apply_distortion(&img, &d, 3).unwrap();
        let c = apply_distortion(&img, &d, 4).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_distortions_stay_in_range() {
        let img = ramp_image();
        let battery = [
            Distortion::Crop { area_fraction: 0.5 },
            Distortion::Rotate { degrees: 25.0 },
            Distortion::Resize { scale: 0.3 },
            Distortion::Brightness { factor: 2.0 },
            Distortion::JpegProxy { quality: 50 },
            Distortion::GaussianNoise { sigma: 0.05 },
            Distortion::Blur { sigma: 1.0 },
        ];
        for d in battery {
            let out = apply_distortion(&img, &d, 9).unwrap();
            assert_eq!(out.shape(), img.shape(), "{}", d.label());
            assert!(
                out.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{} left the unit range",
                d.label()
            );
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let img = ramp_image();
        for d in [
            Distortion::Crop { area_fraction: 0.95 },
            Distortion::Brightness { factor: 5.0 },
            Distortion::JpegProxy { quality: 0 },
            Distortion::GaussianNoise { sigma: 0.9 },
        ] {
            assert!(apply_distortion(&img, &d, 0).is_err(), "{} should be rejected", d.label());
        }
    }
}
