//! Literal scalar transcription of the deformable-convolution core op:
//! forward with and without softmax normalization, analytic backward, and
//! the finite-difference oracle. Single-threaded by contract; this module
//! is the determinism anchor the optimized kernel is checked against.
//!
//! For each output location p0, group g and channel c within the group:
//!
//!   y = Σ_{k=1..K} m'_{gk} · x_g(p0 + p_k + offset_scale·Δp_{gk})
//!
//! with m' softmax-normalized over K when `softmax_weights` is set (v3
//! semantics) and used raw otherwise (v4 semantics). Sampling is 4-neighbor
//! bilinear with zero padding outside the feature map.

use crate::error::{DcnError, Result};
use crate::tensor::{ElementType, SeededStream, Shape, TensorNHWC};

#[derive(Debug, Clone, Copy)]
pub struct DcnConfig {
    pub kernel_k: usize,
    pub groups: usize,
    pub channels: usize,
    /// true = v3 behavior (softmax over K), false = v4 (unbounded weights)
    pub softmax_weights: bool,
    pub offset_scale: f32,
}

impl DcnConfig {
    pub fn new(kernel_k: usize, groups: usize, channels: usize, softmax_weights: bool) -> Result<Self> {
        if kernel_k == 0 || kernel_k % 2 == 0 {
            return Err(DcnError::Config(format!("kernel_k must be odd, got {kernel_k}")));
        }
        if groups == 0 || channels == 0 || channels % groups != 0 {
            return Err(DcnError::Config(format!(
                "channels ({channels}) must be a positive multiple of groups ({groups})"
            )));
        }
        Ok(DcnConfig {
            kernel_k,
            groups,
            channels,
            softmax_weights,
            offset_scale: 1.0,
        })
    }

    /// K = k·k sampling points.
    pub fn k_points(&self) -> usize {
        self.kernel_k * self.kernel_k
    }

    /// D = C/G channels per group.
    pub fn group_dim(&self) -> usize {
        self.channels / self.groups
    }

    pub fn pad(&self) -> usize {
        (self.kernel_k - 1) / 2
    }

    /// Grid point p_k for flat index kk, row-major over the k×k window:
    /// (-r,-r), (-r,-r+1), ..., (r,r).
    #[inline(always)]
    pub fn grid_point(&self, kk: usize) -> (i64, i64) {
        let r = (self.kernel_k - 1) as i64 / 2;
        let dy = (kk / self.kernel_k) as i64 - r;
        let dx = (kk % self.kernel_k) as i64 - r;
        (dy, dx)
    }
}

/// Δp table, shape (N,H,W,G,K,2) fp32, entries (Δy, Δx) in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub k_points: usize,
    pub data: Vec<f32>,
}

impl OffsetField {
    pub fn zeros(n: usize, h: usize, w: usize, groups: usize, k_points: usize) -> Self {
        OffsetField {
            n,
            h,
            w,
            groups,
            k_points,
            data: vec![0.0; n * h * w * groups * k_points * 2],
        }
    }

    pub fn seeded_uniform(
        n: usize,
        h: usize,
        w: usize,
        groups: usize,
        k_points: usize,
        seed: u64,
        lo: f32,
        hi: f32,
    ) -> Self {
        let mut f = Self::zeros(n, h, w, groups, k_points);
        SeededStream::new(seed).fill(&mut f.data, lo, hi);
        f
    }

    pub fn len_entries(&self) -> usize {
        self.n * self.h * self.w * self.groups * self.k_points
    }

    #[inline(always)]
    pub fn base(&self, n: usize, h: usize, w: usize, g: usize) -> usize {
        ((((n * self.h + h) * self.w + w) * self.groups + g) * self.k_points) * 2
    }

    /// (Δy, Δx) for sampling point kk.
    #[inline(always)]
    pub fn get(&self, n: usize, h: usize, w: usize, g: usize, kk: usize) -> (f32, f32) {
        let i = self.base(n, h, w, g) + 2 * kk;
        (self.data[i], self.data[i + 1])
    }
}

/// m table, shape (N,H,W,G,K) fp32. Raw logits under softmax semantics,
/// final unbounded weights otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub k_points: usize,
    pub data: Vec<f32>,
}

impl WeightField {
    pub fn zeros(n: usize, h: usize, w: usize, groups: usize, k_points: usize) -> Self {
        WeightField {
            n,
            h,
            w,
            groups,
            k_points,
            data: vec![0.0; n * h * w * groups * k_points],
        }
    }

    pub fn seeded_uniform(
        n: usize,
        h: usize,
        w: usize,
        groups: usize,
        k_points: usize,
        seed: u64,
        lo: f32,
        hi: f32,
    ) -> Self {
        let mut f = Self::zeros(n, h, w, groups, k_points);
        SeededStream::new(seed).fill(&mut f.data, lo, hi);
        f
    }

    #[inline(always)]
    pub fn base(&self, n: usize, h: usize, w: usize, g: usize) -> usize {
        (((n * self.h + h) * self.w + w) * self.groups + g) * self.k_points
    }

    #[inline(always)]
    pub fn slice(&self, n: usize, h: usize, w: usize, g: usize) -> &[f32] {
        let b = self.base(n, h, w, g);
        &self.data[b..b + self.k_points]
    }
}

/// Numerically stable softmax over the K axis of every (n,h,w,g) slice.
pub fn softmax_k(w: &WeightField) -> WeightField {
    let mut out = w.clone();
    for row in out.data.chunks_exact_mut(w.k_points) {
        softmax_in_place(row);
    }
    out
}

#[inline]
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Zero-padded 4-neighbor bilinear sample of channel plane `c` at fractional
/// coordinates (py, px). Exactly four multiply-adds. NaN coordinates
/// propagate NaN; they are never clamped.
#[inline(always)]
pub fn bilinear_sample(x: &TensorNHWC, n: usize, c: usize, py: f32, px: f32) -> f32 {
    let shape = x.shape();
    let (h, w) = (shape.h as i64, shape.w as i64);
    let y0 = py.floor() as i64;
    let x0 = px.floor() as i64;
    let ty = py - py.floor();
    let tx = px - px.floor();
    let fetch = |yy: i64, xx: i64| -> f32 {
        if yy >= 0 && yy < h && xx >= 0 && xx < w {
            x.get(n, yy as usize, xx as usize, c)
        } else {
            0.0
        }
    };
    let mut acc = (1.0 - ty) * (1.0 - tx) * fetch(y0, x0);
    acc += (1.0 - ty) * tx * fetch(y0, x0 + 1);
    acc += ty * (1.0 - tx) * fetch(y0 + 1, x0);
    acc += ty * tx * fetch(y0 + 1, x0 + 1);
    if py.is_nan() || px.is_nan() {
        return f32::NAN;
    }
    acc
}

pub(crate) fn validate_shapes(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
) -> Result<()> {
    let s = x.shape();
    if s.c != cfg.channels {
        return Err(DcnError::DimMismatch {
            axis: "C",
            detail: format!("input has {} channels, config expects {}", s.c, cfg.channels),
        });
    }
    let k = cfg.k_points();
    for (axis, got, want) in [
        ("N", off.n, s.n),
        ("H", off.h, s.h),
        ("W", off.w, s.w),
        ("G", off.groups, cfg.groups),
        ("K", off.k_points, k),
    ] {
        if got != want {
            return Err(DcnError::DimMismatch {
                axis: match axis {
                    "N" => "N",
                    "H" => "H",
                    "W" => "W",
                    "G" => "G",
                    _ => "K",
                },
                detail: format!("offset field axis {axis}: got {got}, expected {want}"),
            });
        }
    }
    for (axis, got, want) in [
        ("N", w.n, s.n),
        ("H", w.h, s.h),
        ("W", w.w, s.w),
        ("G", w.groups, cfg.groups),
        ("K", w.k_points, k),
    ] {
        if got != want {
            return Err(DcnError::DimMismatch {
                axis: match axis {
                    "N" => "N",
                    "H" => "H",
                    "W" => "W",
                    "G" => "G",
                    _ => "K",
                },
                detail: format!("weight field axis {axis}: got {got}, expected {want}"),
            });
        }
    }
    Ok(())
}

/// Reference forward. Input must be fp32 (cast fp16 tensors first); the
/// output shape equals the input shape (stride 1, same padding).
pub fn dcn_forward_ref(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
) -> Result<TensorNHWC> {
    if x.dtype() != ElementType::F32 {
        return Err(DcnError::Unsupported(
            "reference kernel operates on fp32 tensors; cast fp16 inputs first".into(),
        ));
    }
    validate_shapes(x, off, w, cfg)?;
    let s = x.shape();
    let (gs, d, kp) = (cfg.groups, cfg.group_dim(), cfg.k_points());
    let mut out = vec![0.0f32; s.len()];
    let mut weights = vec![0.0f32; kp];

    for n in 0..s.n {
        for h in 0..s.h {
            for wx in 0..s.w {
                for g in 0..gs {
                    weights.copy_from_slice(w.slice(n, h, wx, g));
                    if cfg.softmax_weights {
                        softmax_in_place(&mut weights);
                    }
                    for c in 0..d {
                        let ch = g * d + c;
                        let mut acc = 0.0f32;
                        for kk in 0..kp {
                            let (gy, gx) = cfg.grid_point(kk);
                            let (oy, ox) = off.get(n, h, wx, g, kk);
                            let py = h as f32 + gy as f32 + cfg.offset_scale * oy;
                            let px = wx as f32 + gx as f32 + cfg.offset_scale * ox;
                            let sample = bilinear_sample(x, n, ch, py, px);
                            acc += weights[kk] * sample;
                        }
                        out[s.index(n, h, wx, ch)] = acc;
                    }
                }
            }
        }
    }
    Ok(TensorNHWC::from_f32(s, out))
}

/// Analytic backward: chain rule over the bilinear kernel and, when enabled,
/// the softmax Jacobian. At exactly-integer sampling coordinates the spatial
/// sub-gradient is 0 (the bilinear hat has a kink there).
pub fn dcn_backward_ref(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    grad_y: &TensorNHWC,
) -> Result<(TensorNHWC, OffsetField, WeightField)> {
    if x.dtype() != ElementType::F32 {
        return Err(DcnError::Unsupported(
            "reference kernel operates on fp32 tensors; cast fp16 inputs first".into(),
        ));
    }
    validate_shapes(x, off, w, cfg)?;
    let s = x.shape();
    if grad_y.shape() != s {
        return Err(DcnError::DimMismatch {
            axis: "N",
            detail: format!("grad_y shape {} != input shape {}", grad_y.shape(), s),
        });
    }
    let (gs, d, kp) = (cfg.groups, cfg.group_dim(), cfg.k_points());
    let (hh, ww) = (s.h as i64, s.w as i64);

    let mut grad_x = vec![0.0f32; s.len()];
    let mut grad_off = OffsetField::zeros(s.n, s.h, s.w, gs, kp);
    let mut grad_w = WeightField::zeros(s.n, s.h, s.w, gs, kp);
    let mut weights = vec![0.0f32; kp];
    let mut grad_m = vec![0.0f32; kp];

    for n in 0..s.n {
        for h in 0..s.h {
            for wx in 0..s.w {
                for g in 0..gs {
                    weights.copy_from_slice(w.slice(n, h, wx, g));
                    if cfg.softmax_weights {
                        softmax_in_place(&mut weights);
                    }
                    grad_m.iter_mut().for_each(|v| *v = 0.0);

                    for kk in 0..kp {
                        let (gy, gx) = cfg.grid_point(kk);
                        let (oy, ox) = off.get(n, h, wx, g, kk);
                        let py = h as f32 + gy as f32 + cfg.offset_scale * oy;
                        let px = wx as f32 + gx as f32 + cfg.offset_scale * ox;
                        let y0 = py.floor() as i64;
                        let x0 = px.floor() as i64;
                        let ty = py - py.floor();
                        let tx = px - px.floor();
                        let on_int_y = ty == 0.0;
                        let on_int_x = tx == 0.0;
                        let m = weights[kk];

                        // neighbor coefficients in fixed (00,01,10,11) order
                        let coeffs = [
                            (y0, x0, (1.0 - ty) * (1.0 - tx), -(1.0 - tx), -(1.0 - ty)),
                            (y0, x0 + 1, (1.0 - ty) * tx, -tx, 1.0 - ty),
                            (y0 + 1, x0, ty * (1.0 - tx), 1.0 - tx, -ty),
                            (y0 + 1, x0 + 1, ty * tx, tx, ty),
                        ];

                        let mut dsdy_dot = 0.0f32; // Σ_c grad_y[c]·∂s_c/∂py
                        let mut dsdx_dot = 0.0f32;
                        let mut sample_dot = 0.0f32; // Σ_c grad_y[c]·s_c

                        for c in 0..d {
                            let ch = g * d + c;
                            let gy_val = grad_y.get(n, h, wx, ch);
                            if gy_val == 0.0 {
                                continue;
                            }
                            let mut sample = 0.0f32;
                            let mut dsdy = 0.0f32;
                            let mut dsdx = 0.0f32;
                            for &(yy, xx, coeff, dy_coeff, dx_coeff) in &coeffs {
                                if yy >= 0 && yy < hh && xx >= 0 && xx < ww {
                                    let v = x.get(n, yy as usize, xx as usize, ch);
                                    sample += coeff * v;
                                    dsdy += dy_coeff * v;
                                    dsdx += dx_coeff * v;
                                    grad_x[s.index(n, yy as usize, xx as usize, ch)] +=
                                        gy_val * m * coeff;
                                }
                            }
                            sample_dot += gy_val * sample;
                            dsdy_dot += gy_val * dsdy;
                            dsdx_dot += gy_val * dsdx;
                        }

                        grad_m[kk] = sample_dot;
                        let ob = grad_off.base(n, h, wx, g) + 2 * kk;
                        grad_off.data[ob] = if on_int_y {
                            0.0
                        } else {
                            m * dsdy_dot * cfg.offset_scale
                        };
                        grad_off.data[ob + 1] = if on_int_x {
                            0.0
                        } else {
                            m * dsdx_dot * cfg.offset_scale
                        };
                    }

                    let wb = grad_w.base(n, h, wx, g);
                    if cfg.softmax_weights {
                        // softmax Jacobian: ∂L/∂l_j = m'_j (g_j − Σ_k g_k m'_k)
                        let dot: f32 = grad_m
                            .iter()
                            .zip(weights.iter())
                            .map(|(gm, m)| gm * m)
                            .sum();
                        for kk in 0..kp {
                            grad_w.data[wb + kk] = weights[kk] * (grad_m[kk] - dot);
                        }
                    } else {
                        grad_w.data[wb..wb + kp].copy_from_slice(&grad_m);
                    }
                }
            }
        }
    }
    Ok((TensorNHWC::from_f32(s, grad_x), grad_off, grad_w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichInput {
    Input,
    Offsets,
    Weights,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffResult {
    /// Central-difference gradient of Σ grad_y ⊙ forward(θ), flat layout of
    /// the perturbed input.
    pub grad: Vec<f32>,
    /// Flat coordinates skipped under the kink rule (offsets only).
    pub skipped: Vec<usize>,
}

/// Central-difference oracle. The loss f(θ) = Σ grad_y ⊙ forward(θ) is
/// evaluated by an internal float64 scalar transcription of the forward so
/// the difference quotient is not drowned by fp32 rounding. Offset
/// coordinates whose sample point lies within 2h of an integer are skipped
/// (bilinear kink) and reported.
pub fn finite_diff_grad(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    grad_y: &TensorNHWC,
    which: WhichInput,
    h_step: f32,
) -> FiniteDiffResult {
    assert!(h_step > 0.0);
    let s = x.shape();
    let xs = x.to_f32_vec();
    let gy = grad_y.to_f32_vec();

    let loss = |xv: &[f32], ov: &[f32], wv: &[f32]| -> f64 {
        forward_loss_f64(xv, ov, wv, s, cfg, &gy)
    };

    let mut skipped = Vec::new();
    let grad = match which {
        WhichInput::Input => {
            let mut base = xs.clone();
            central_diff(&mut base, h_step, |v| loss(v, &off.data, &w.data))
        }
        WhichInput::Weights => {
            let mut base = w.data.clone();
            central_diff(&mut base, h_step, |v| loss(&xs, &off.data, v))
        }
        WhichInput::Offsets => {
            let kp = cfg.k_points();
            let mut base = off.data.clone();
            let mut grad = vec![0.0f32; base.len()];
            for i in 0..base.len() {
                // reconstruct the sample coordinate this entry feeds
                let entry = i / 2;
                let kk = entry % kp;
                let loc = entry / (cfg.groups * kp);
                let wx = loc % s.w;
                let hy = (loc / s.w) % s.h;
                let (gdy, gdx) = cfg.grid_point(kk);
                let p = if i % 2 == 0 {
                    hy as f32 + gdy as f32 + cfg.offset_scale * base[i]
                } else {
                    wx as f32 + gdx as f32 + cfg.offset_scale * base[i]
                };
                if (p - p.round()).abs() < 2.0 * h_step {
                    skipped.push(i);
                    continue;
                }
                let orig = base[i];
                base[i] = orig + h_step;
                let fp = loss(&xs, &base, &w.data);
                base[i] = orig - h_step;
                let fm = loss(&xs, &base, &w.data);
                base[i] = orig;
                grad[i] = ((fp - fm) / (2.0 * h_step as f64)) as f32;
            }
            grad
        }
    };
    FiniteDiffResult { grad, skipped }
}

fn central_diff<F: FnMut(&[f32]) -> f64>(base: &mut [f32], h: f32, mut f: F) -> Vec<f32> {
    let mut grad = vec![0.0f32; base.len()];
    for i in 0..base.len() {
        let orig = base[i];
        base[i] = orig + h;
        let fp = f(base);
        base[i] = orig - h;
        let fm = f(base);
        base[i] = orig;
        grad[i] = ((fp - fm) / (2.0 * h as f64)) as f32;
    }
    grad
}

// f64 straight-line forward used only by the oracle above.
fn forward_loss_f64(
    x: &[f32],
    off: &[f32],
    w: &[f32],
    s: Shape,
    cfg: &DcnConfig,
    grad_y: &[f32],
) -> f64 {
    let (gs, d, kp) = (cfg.groups, cfg.group_dim(), cfg.k_points());
    let (hh, ww) = (s.h as i64, s.w as i64);
    let mut loss = 0.0f64;
    let mut weights = vec![0.0f64; kp];
    for n in 0..s.n {
        for hy in 0..s.h {
            for wx in 0..s.w {
                for g in 0..gs {
                    let wb = (((n * s.h + hy) * s.w + wx) * gs + g) * kp;
                    for kk in 0..kp {
                        weights[kk] = w[wb + kk] as f64;
                    }
                    if cfg.softmax_weights {
                        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in weights.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for v in weights.iter_mut() {
                            *v /= sum;
                        }
                    }
                    for c in 0..d {
                        let ch = g * d + c;
                        let gyv = grad_y[s.index(n, hy, wx, ch)] as f64;
                        if gyv == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for kk in 0..kp {
                            let (gdy, gdx) = cfg.grid_point(kk);
                            let oy = off[(wb + kk) * 2] as f64;
                            let ox = off[(wb + kk) * 2 + 1] as f64;
                            let py = hy as f64 + gdy as f64 + cfg.offset_scale as f64 * oy;
                            let px = wx as f64 + gdx as f64 + cfg.offset_scale as f64 * ox;
                            let y0 = py.floor();
                            let x0 = px.floor();
                            let ty = py - y0;
                            let tx = px - x0;
                            let mut sample = 0.0f64;
                            for (yy, wy) in [(y0 as i64, 1.0 - ty), (y0 as i64 + 1, ty)] {
                                for (xx, wxc) in [(x0 as i64, 1.0 - tx), (x0 as i64 + 1, tx)] {
                                    if yy >= 0 && yy < hh && xx >= 0 && xx < ww {
                                        sample += wy
                                            * wxc
                                            * x[s.index(n, yy as usize, xx as usize, ch)] as f64;
                                    }
                                }
                            }
                            acc += weights[kk] * sample;
                        }
                        loss += gyv * acc;
                    }
                }
            }
        }
    }
    loss
}
