//! Dense row-major f32 tensors and the raw kernels behind the tape ops.
//!
//! Everything is explicit-shape and CPU-only. Convolution kernels keep the
//! innermost loop contiguous over the output row so the compiler can
//! vectorize them; that is what makes desk-scale training budgets hold.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, EngineError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn scalar_value(&self) -> Option<f32> {
        if self.is_scalar() { Some(self.data[0]) } else { None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, EngineError> {
        Tensor::new(shape, self.data.clone())
    }

    /// FNV-1a over the raw bit pattern; used for frozen-weight checksums.
    pub fn bit_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        for &d in &self.shape {
            for b in (d as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }
}

fn dim3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), EngineError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(EngineError::ShapeMismatch { op, detail: format!("expected (C,H,W), got {s:?}") }),
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Direct convolution, zero padding. `x: (IC,H,W)`, `weight: (OC,IC,KH,KW)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, EngineError> {
    let (ic, h, w) = dim3(x, "conv2d")?;
    let (oc, wic, kh, kw) = match weight.shape() {
        [oc, wic, kh, kw] => (*oc, *wic, *kh, *kw),
        s => {
            return Err(EngineError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected weight (OC,IC,KH,KW), got {s:?}"),
            })
        }
    };
    if wic != ic {
        return Err(EngineError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {ic} vs weight channels {wic}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(EngineError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?} vs OC {oc}", b.shape()),
            });
        }
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(EngineError::Invalid(format!(
            "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
        )));
    }
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut out = vec![0.0f32; oc * oh * ow];

    let xd = x.data();
    let wd = weight.data();
    for o in 0..oc {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = bias {
            out_plane.fill(b.data()[o]);
        }
        for i in 0..ic {
            let x_plane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((o * ic + i) * kh + ky) * kw + kx];
                    accumulate_shifted(out_plane, x_plane, wv, h, w, oh, ow, ky, kx, stride, pad);
                }
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

/// out[oy, ox0..ox1] += wv * x[oy*s+ky-pad, ox*s+kx-pad]; bounds precomputed
/// so the stride-1 inner loop is a contiguous axpy.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out_plane: &mut [f32],
    x_plane: &[f32],
    wv: f32,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (ox0, ox1) = valid_out_range(w, ow, kx, stride, pad);
    if ox0 >= ox1 {
        return;
    }
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let iy = iy as usize;
        let ix0 = (ox0 * stride + kx) as isize - pad as isize;
        debug_assert!(ix0 >= 0);
        let ix0 = ix0 as usize;
        let out_row = &mut out_plane[oy * ow + ox0..oy * ow + ox1];
        if stride == 1 {
            let x_row = &x_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
            for (ov, xv) in out_row.iter_mut().zip(x_row) {
                *ov += wv * xv;
            }
        } else {
            for (j, ov) in out_row.iter_mut().enumerate() {
                *ov += wv * x_plane[iy * w + ix0 + j * stride];
            }
        }
    }
}

/// Output columns ox with 0 <= ox*stride + kx - pad < w.
#[inline]
fn valid_out_range(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_excl = (w + pad - kx + stride - 1) / stride; // first ox past the end
    (lo.min(ow), hi_excl.min(ow))
}

/// Gradient of conv2d wrt its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor, EngineError> {
    let (oc, oh, ow) = dim3(grad_out, "conv2d_backward_input")?;
    let (woc, ic, kh, kw) = match weight.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => {
            return Err(EngineError::ShapeMismatch {
                op: "conv2d_backward_input",
                detail: format!("weight shape {s:?}"),
            })
        }
    };
    debug_assert_eq!(oc, woc);
    let (h, w) = (input_shape[1], input_shape[2]);
    let mut gin = vec![0.0f32; ic * h * w];
    let gd = grad_out.data();
    let wd = weight.data();
    for o in 0..oc {
        let g_plane = &gd[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ic {
            let gin_plane = &mut gin[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((o * ic + i) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_out_range(w, ow, kx, stride, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let ix0 = ox0 * stride + kx - pad;
                        let g_row = &g_plane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let gin_row = &mut gin_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            for (gi, gv) in gin_row.iter_mut().zip(g_row) {
                                *gi += wv * gv;
                            }
                        } else {
                            for (j, gv) in g_row.iter().enumerate() {
                                gin_plane[iy * w + ix0 + j * stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Gradient of conv2d wrt its weight.
pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    x: &Tensor,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor, EngineError> {
    let (oc, oh, ow) = dim3(grad_out, "conv2d_backward_weight")?;
    let (ic, h, w) = dim3(x, "conv2d_backward_weight")?;
    let (kh, kw) = (weight_shape[2], weight_shape[3]);
    let mut gw = vec![0.0f32; oc * ic * kh * kw];
    let gd = grad_out.data();
    let xd = x.data();
    for o in 0..oc {
        let g_plane = &gd[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ic {
            let x_plane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let (ox0, ox1) = valid_out_range(w, ow, kx, stride, pad);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let ix0 = ox0 * stride + kx - pad;
                        let g_row = &g_plane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let x_row = &x_plane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            let mut s = 0.0f32;
                            for (gv, xv) in g_row.iter().zip(x_row) {
                                s += gv * xv;
                            }
                            acc += s;
                        } else {
                            for (j, gv) in g_row.iter().enumerate() {
                                acc += gv * x_plane[iy * w + ix0 + j * stride];
                            }
                        }
                    }
                    gw[((o * ic + i) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(weight_shape.to_vec(), gw)
}

/// Gradient of conv2d wrt its bias: per-channel sum of the output gradient.
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Result<Tensor, EngineError> {
    let (oc, oh, ow) = dim3(grad_out, "conv2d_backward_bias")?;
    let gd = grad_out.data();
    let gb = (0..oc)
        .map(|o| gd[o * oh * ow..(o + 1) * oh * ow].iter().sum())
        .collect();
    Tensor::new(vec![oc], gb)
}

/// `a: (M,K)` times `b: (K,N)`.
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                detail: format!("left operand must be 2-D, got {s:?}"),
            })
        }
    };
    let (kb, n) = match b.shape() {
        [kb, n] => (*kb, *n),
        s => {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                detail: format!("right operand must be 2-D, got {s:?}"),
            })
        }
    };
    if k != kb {
        return Err(EngineError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims {k} vs {kb}"),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let b_row = &bd[p * n..(p + 1) * n];
            for (ov, bv) in out_row.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of matmul: `ga = g @ b^T`, `gb = a^T @ g`.
pub fn matmul_backward(
    grad_out: &Tensor,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor), EngineError> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let gd = grad_out.data();
    let ad = a.data();
    let bd = b.data();
    let mut ga = vec![0.0f32; m * k];
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &bd[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (gv, bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            ga[i * k + p] = s;
        }
    }
    let mut gb = vec![0.0f32; k * n];
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (gbv, gv) in gb_row.iter_mut().zip(g_row) {
                *gbv += av * gv;
            }
        }
    }
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

/// Nearest-neighbour 2x upsampling of a (C,H,W) tensor.
pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor, EngineError> {
    let (c, h, w) = dim3(x, "upsample2x")?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let xd = x.data();
    for ci in 0..c {
        for y in 0..h {
            let src = &xd[ci * h * w + y * w..ci * h * w + (y + 1) * w];
            for dy in 0..2 {
                let row = &mut out[ci * oh * ow + (2 * y + dy) * ow..ci * oh * ow + (2 * y + dy + 1) * ow];
                for (xcol, &v) in src.iter().enumerate() {
                    row[2 * xcol] = v;
                    row[2 * xcol + 1] = v;
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor, EngineError> {
    let (c, oh, ow) = dim3(grad_out, "upsample2x_backward")?;
    let (h, w) = (oh / 2, ow / 2);
    let mut gin = vec![0.0f32; c * h * w];
    let gd = grad_out.data();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += gd[ci * oh * ow + (2 * y + dy) * ow + 2 * x + dx];
                    }
                }
                gin[ci * h * w + y * w + x] = s;
            }
        }
    }
    Tensor::new(vec![c, h, w], gin)
}

/// 2x average pooling of a (C,H,W) tensor with even H and W.
pub fn avgpool2x_forward(x: &Tensor) -> Result<Tensor, EngineError> {
    let (c, h, w) = dim3(x, "avgpool2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(EngineError::Invalid(format!("avgpool2x needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let xd = x.data();
    for ci in 0..c {
        for y in 0..oh {
            for x2 in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * x2;
                out[ci * oh * ow + y * ow + x2] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avgpool2x_backward(grad_out: &Tensor) -> Result<Tensor, EngineError> {
    let (c, oh, ow) = dim3(grad_out, "avgpool2x_backward")?;
    let (h, w) = (oh * 2, ow * 2);
    let mut gin = vec![0.0f32; c * h * w];
    let gd = grad_out.data();
    for ci in 0..c {
        for y in 0..oh {
            for x2 in 0..ow {
                let g = 0.25 * gd[ci * oh * ow + y * ow + x2];
                let base = ci * h * w + 2 * y * w + 2 * x2;
                gin[base] += g;
                gin[base + 1] += g;
                gin[base + w] += g;
                gin[base + w + 1] += g;
            }
        }
    }
    Tensor::new(vec![c, h, w], gin)
}

/// A sparse linear map on the spatial grid, applied per channel. Covers
/// bilinear resize, rotation, centered crop-and-resize and separable blur;
/// the transpose is exact, which keeps gradient checks honest.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// (dst, src, weight) triples; dst in the output grid, src in the input grid.
    taps: Vec<(u32, u32, f32)>,
}

impl WarpPlan {
    /// Read-only view of the (dst, src, weight) taps.
    pub fn taps_iter(&self) -> std::slice::Iter<'_, (u32, u32, f32)> {
        self.taps.iter()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, EngineError> {
        let (c, h, w) = dim3(x, "warp")?;
        if h != self.in_h || w != self.in_w {
            return Err(EngineError::ShapeMismatch {
                op: "warp",
                detail: format!("plan expects {}x{}, got {h}x{w}", self.in_h, self.in_w),
            });
        }
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![0.0f32; c * oh * ow];
        let xd = x.data();
        for ci in 0..c {
            let src_plane = &xd[ci * h * w..(ci + 1) * h * w];
            let dst_plane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for &(dst, src, wt) in &self.taps {
                dst_plane[dst as usize] += wt * src_plane[src as usize];
            }
        }
        Tensor::new(vec![c, oh, ow], out)
    }

    pub fn apply_transpose(&self, grad_out: &Tensor) -> Result<Tensor, EngineError> {
        let (c, oh, ow) = dim3(grad_out, "warp_transpose")?;
        if oh != self.out_h || ow != self.out_w {
            return Err(EngineError::ShapeMismatch {
                op: "warp_transpose",
                detail: format!("plan produces {}x{}, got {oh}x{ow}", self.out_h, self.out_w),
            });
        }
        let (h, w) = (self.in_h, self.in_w);
        let mut gin = vec![0.0f32; c * h * w];
        let gd = grad_out.data();
        for ci in 0..c {
            let g_plane = &gd[ci * oh * ow..(ci + 1) * oh * ow];
            let gin_plane = &mut gin[ci * h * w..(ci + 1) * h * w];
            for &(dst, src, wt) in &self.taps {
                gin_plane[src as usize] += wt * g_plane[dst as usize];
            }
        }
        Tensor::new(vec![c, h, w], gin)
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // Whole-sample reflection: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// How out-of-range sample coordinates are folded back into the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    Clamp,
    Reflect,
}

fn fold(i: isize, n: usize, mode: EdgeMode) -> usize {
    match mode {
        EdgeMode::Clamp => clamp_index(i, n),
        EdgeMode::Reflect => reflect_index(i, n),
    }
}

/// Bilinear sampling plan: each output pixel pulls from a (possibly
/// out-of-grid) source coordinate supplied by `src_of`.
fn bilinear_plan(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    mode: EdgeMode,
    src_of: impl Fn(usize, usize) -> (f32, f32),
) -> WarpPlan {
    let mut taps = Vec::with_capacity(out_h * out_w * 4);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sy, sx) = src_of(oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let dst = (oy * out_w + ox) as u32;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let yy = fold(y0 as isize + dy, in_h, mode);
                    let xx = fold(x0 as isize + dx, in_w, mode);
                    taps.push((dst, (yy * in_w + xx) as u32, wy * wx));
                }
            }
        }
    }
    WarpPlan { in_h, in_w, out_h, out_w, taps }
}

/// Bilinear resize with half-pixel centers and clamped edges.
pub fn resize_bilinear_plan(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> WarpPlan {
    let sy = in_h as f32 / out_h as f32;
    let sx = in_w as f32 / out_w as f32;
    bilinear_plan(in_h, in_w, out_h, out_w, EdgeMode::Clamp, move |oy, ox| {
        ((oy as f32 + 0.5) * sy - 0.5, (ox as f32 + 0.5) * sx - 0.5)
    })
}

/// Rotation about the image center by `degrees`, bilinear, reflect padding.
pub fn rotate_plan(h: usize, w: usize, degrees: f32) -> WarpPlan {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    // Output pixel pulls from the inverse-rotated source position.
    bilinear_plan(h, w, h, w, EdgeMode::Reflect, move |oy, ox| {
        let dy = oy as f32 - cy;
        let dx = ox as f32 - cx;
        (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
    })
}

/// Removes the given fraction of the image area (centered), then resizes
/// the kept region back to the original size.
pub fn crop_resize_plan(h: usize, w: usize, removed_area_fraction: f32) -> WarpPlan {
    let keep = (1.0 - removed_area_fraction).max(0.01).sqrt();
    let kh = (h as f32 * keep).max(1.0);
    let kw = (w as f32 * keep).max(1.0);
    let oy0 = (h as f32 - kh) / 2.0;
    let ox0 = (w as f32 - kw) / 2.0;
    let sy = kh / h as f32;
    let sx = kw / w as f32;
    bilinear_plan(h, w, h, w, EdgeMode::Clamp, move |oy, ox| {
        (oy0 + (oy as f32 + 0.5) * sy - 0.5, ox0 + (ox as f32 + 0.5) * sx - 0.5)
    })
}

/// Normalized 1-D Gaussian taps with radius ceil(3 sigma).
pub fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    let sigma = sigma.max(1e-4);
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur as a pair of 1-D warp plans (rows then columns),
/// reflect padding.
pub fn blur_plans(h: usize, w: usize, sigma: f32) -> (WarpPlan, WarpPlan) {
    let k = gaussian_kernel_1d(sigma);
    let radius = k.len() / 2;
    let mut row_taps = Vec::with_capacity(h * w * k.len());
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) as u32;
            for (t, &wt) in k.iter().enumerate() {
                let xx = reflect_index(x as isize + t as isize - radius as isize, w);
                row_taps.push((dst, (y * w + xx) as u32, wt));
            }
        }
    }
    let mut col_taps = Vec::with_capacity(h * w * k.len());
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) as u32;
            for (t, &wt) in k.iter().enumerate() {
                let yy = reflect_index(y as isize + t as isize - radius as isize, h);
                col_taps.push((dst, (yy * w + x) as u32, wt));
            }
        }
    }
    (
        WarpPlan { in_h: h, in_w: w, out_h: h, out_w: w, taps: row_taps },
        WarpPlan { in_h: h, in_w: w, out_h: h, out_w: w, taps: col_taps },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let got = matmul_forward(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            let denom = w.abs().max(1e-6);
            assert!((g - w).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
            let b = Tensor::randn(&[3], 0.5, &mut rng);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            // Naive quadruple loop.
            let (oc, oh, ow) = (3, conv_out_dim(5, 3, stride, pad), conv_out_dim(6, 3, stride, pad));
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[o];
                        for i in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        s += x.data()[i * 30 + iy as usize * 6 + ix as usize]
                                            * w.data()[((o * 2 + i) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let g = got.data()[(o * oh + oy) * ow + ox];
                        assert!((g - s).abs() < 1e-4, "stride {stride} pad {pad}: {g} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let up = upsample2x_forward(&x).unwrap();
        assert_eq!(up.shape(), &[2, 8, 8]);
        let back = avgpool2x_forward(&up).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_plan_roundtrips_constant_images() {
        let x = Tensor::full(&[3, 8, 8], 0.7);
        let down = resize_bilinear_plan(8, 8, 4, 4).apply(&x).unwrap();
        for &v in down.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        let up = resize_bilinear_plan(4, 4, 8, 8).apply(&down).unwrap();
        for &v in up.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[1, 7, 7], 1.0, &mut rng);
        let y = rotate_plan(7, 7, 0.0).apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn warp_transpose_is_the_exact_adjoint() {
        // <Ax, y> == <x, A^T y> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plan = rotate_plan(6, 6, 23.0);
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let ax = plan.apply(&x).unwrap();
        let aty = plan.apply_transpose(&y).unwrap();
        let lhs: f32 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for sigma in [0.3f32, 0.8, 1.5] {
            let k = gaussian_kernel_1d(sigma);
            let s: f32 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Tensor::full(&[1, 9, 9], 0.42);
        let (rows, cols) = blur_plans(9, 9, 1.1);
        let y = cols.apply(&rows.apply(&x).unwrap()).unwrap();
        for &v in y.data() {
            assert!((v - 0.42).abs() < 1e-5);
        }
    }

    #[test]
    fn checksum_detects_bit_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mut b = a.clone();
        assert_eq!(a.bit_checksum(), b.bit_checksum());
        b.data_mut()[0] += 1e-7;
        assert_ne!(a.bit_checksum(), b.bit_checksum());
    }
}
