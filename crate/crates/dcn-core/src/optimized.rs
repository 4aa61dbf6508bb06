//! Memory-access-optimized forward kernel (v4 semantics only, softmax off).
//!
//! The optimization ladder mirrors how the fast kernel is reached from the
//! literal one:
//!   baseline        — one work item per (location, group, channel); every
//!                     channel re-reads offsets/weights and recomputes the
//!                     bilinear coefficients
//!   +workload-elim  — offsets/weights read once per (location, group) and
//!                     shared by all D channels of the group
//!   +coeff-reuse    — the 4 bilinear coefficients computed once per sample
//!                     point instead of once per channel
//!   +vector-lanes   — channel blocks of D′ contiguous values loaded,
//!                     accumulated and stored as packed lanes
//!   +fp16           — fp16 storage halves the bytes moved; arithmetic still
//!                     runs at fp32 after widening
//!
//! Every output element is owned by exactly one work item and summed in the
//! fixed order k = 1..K, so results are identical for any worker count and
//! bitwise-identical across fp32 stages.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use half::f16;
use rayon::prelude::*;

use crate::error::{DcnError, Result};
use crate::reference::{validate_shapes, DcnConfig, OffsetField, WeightField};
use crate::tensor::{ElementType, Shape, TensorNHWC};
use crate::timing::{self, BenchRecord};

/// Test hook: when set, the kernel perturbs one output element so the
/// verification suite can prove it catches a wrong-but-fast kernel.
#[doc(hidden)]
pub static CORRUPT_KERNEL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    Baseline,
    WorkloadElim,
    CoeffReuse,
    VectorLanes,
    Fp16,
}

impl StageTag {
    pub const LADDER: [StageTag; 5] = [
        StageTag::Baseline,
        StageTag::WorkloadElim,
        StageTag::CoeffReuse,
        StageTag::VectorLanes,
        StageTag::Fp16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Baseline => "baseline",
            StageTag::WorkloadElim => "+workload-elim",
            StageTag::CoeffReuse => "+coeff-reuse",
            StageTag::VectorLanes => "+vector-lanes",
            StageTag::Fp16 => "+fp16",
        }
    }

    pub fn parse(s: &str) -> Result<StageTag> {
        let t = s.trim_start_matches('+');
        Ok(match t {
            "baseline" => StageTag::Baseline,
            "workload-elim" => StageTag::WorkloadElim,
            "coeff-reuse" => StageTag::CoeffReuse,
            "vector-lanes" => StageTag::VectorLanes,
            "fp16" => StageTag::Fp16,
            _ => return Err(DcnError::Config(format!("unknown stage tag '{s}'"))),
        })
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelPlan {
    /// Channels processed per work item (register block width).
    pub d_prime: usize,
    pub use_vector_lanes: bool,
    pub reuse_coefficients: bool,
    pub dtype: ElementType,
    pub stage: StageTag,
}

impl KernelPlan {
    /// Plan with exactly the optimizations at and below `stage` enabled.
    pub fn for_stage(stage: StageTag) -> KernelPlan {
        match stage {
            StageTag::Baseline => KernelPlan {
                d_prime: 1,
                use_vector_lanes: false,
                reuse_coefficients: false,
                dtype: ElementType::F32,
                stage,
            },
            StageTag::WorkloadElim => KernelPlan {
                d_prime: 8,
                use_vector_lanes: false,
                reuse_coefficients: false,
                dtype: ElementType::F32,
                stage,
            },
            StageTag::CoeffReuse => KernelPlan {
                d_prime: 8,
                use_vector_lanes: false,
                reuse_coefficients: true,
                dtype: ElementType::F32,
                stage,
            },
            StageTag::VectorLanes => KernelPlan {
                d_prime: 8,
                use_vector_lanes: true,
                reuse_coefficients: true,
                dtype: ElementType::F32,
                stage,
            },
            StageTag::Fp16 => KernelPlan {
                d_prime: 8,
                use_vector_lanes: true,
                reuse_coefficients: true,
                dtype: ElementType::F16,
                stage,
            },
        }
    }

    /// Fastest plan for a dtype.
    pub fn fastest(dtype: ElementType) -> KernelPlan {
        let mut p = KernelPlan::for_stage(match dtype {
            ElementType::F32 => StageTag::VectorLanes,
            ElementType::F16 => StageTag::Fp16,
        });
        p.dtype = dtype;
        p
    }

    pub fn with_d_prime(mut self, d_prime: usize) -> KernelPlan {
        self.d_prime = d_prime;
        self
    }

    pub fn validate(&self, cfg: &DcnConfig) -> Result<()> {
        let d = cfg.group_dim();
        if self.d_prime == 0 || d % self.d_prime != 0 {
            return Err(DcnError::Plan(format!(
                "d_prime {} must divide group dim {}",
                self.d_prime, d
            )));
        }
        if self.use_vector_lanes {
            let bytes = self.d_prime * self.dtype.bytes_per_element();
            if bytes % 16 != 0 {
                return Err(DcnError::Plan(format!(
                    "vector lanes need d_prime·bytes_per_element divisible by 16, got {bytes}"
                )));
            }
        }
        Ok(())
    }
}

/// Instrumentation hooks. The default probe is a no-op that compiles away.
pub trait KernelProbe: Sync {
    #[inline(always)]
    fn offset_elem_reads(&self, _count: u64) {}
    #[inline(always)]
    fn coeff_computations(&self, _count: u64) {}
}

pub struct NoProbe;
impl KernelProbe for NoProbe {}

/// Exact counters, aggregated with commutative addition only.
#[derive(Default)]
pub struct CountingProbe {
    pub offset_elem_reads: AtomicU64,
    pub coeff_computations: AtomicU64,
}

impl KernelProbe for CountingProbe {
    #[inline]
    fn offset_elem_reads(&self, count: u64) {
        self.offset_elem_reads.fetch_add(count, Ordering::Relaxed);
    }
    #[inline]
    fn coeff_computations(&self, count: u64) {
        self.coeff_computations.fetch_add(count, Ordering::Relaxed);
    }
}

pub fn dcn_forward_opt(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    plan: &KernelPlan,
) -> Result<TensorNHWC> {
    dcn_forward_opt_probed(x, off, w, cfg, plan, &NoProbe)
}

pub fn dcn_forward_opt_probed<P: KernelProbe>(
    x: &TensorNHWC,
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    plan: &KernelPlan,
    probe: &P,
) -> Result<TensorNHWC> {
    if cfg.softmax_weights {
        return Err(DcnError::Unsupported(
            "softmax weights are not supported by the optimized kernel; use dcn_forward_ref".into(),
        ));
    }
    plan.validate(cfg)?;
    if x.dtype() != plan.dtype {
        return Err(DcnError::Plan(format!(
            "plan dtype {} does not match input dtype {}",
            plan.dtype,
            x.dtype()
        )));
    }
    // fp16 storage always runs the packed-lane kernel
    if plan.dtype == ElementType::F16 && !plan.use_vector_lanes {
        return Err(DcnError::Plan(
            "fp16 storage requires use_vector_lanes".into(),
        ));
    }
    validate_shapes(x, off, w, cfg)?;

    let mut out = match x.dtype() {
        ElementType::F32 => forward_f32(x.as_f32().unwrap(), off, w, cfg, plan, probe),
        ElementType::F16 => {
            let data = forward_f16(x.as_f16().unwrap(), off, w, cfg, plan, probe);
            return Ok(finish(
                TensorNHWC::from_f16(x.shape(), data),
            ));
        }
    };
    if CORRUPT_KERNEL.load(Ordering::Relaxed) {
        out[0] += 0.01;
    }
    Ok(TensorNHWC::from_f32(x.shape(), out))
}

fn finish(mut t: TensorNHWC) -> TensorNHWC {
    if CORRUPT_KERNEL.load(Ordering::Relaxed) {
        if let Some(d) = t.as_f16_mut() {
            d[0] = f16::from_f32(d[0].to_f32() + 0.01);
        }
    }
    t
}

/// Precomputed per sample point: aggregation weight, the 4 bilinear
/// coefficients and the flat spatial base index (channel 0 of the group) of
/// each in-bounds neighbor. Out-of-bounds neighbors are dropped; they only
/// ever contribute exact zeros.
#[derive(Clone, Copy, Default)]
struct PointPlan {
    weight: f32,
    coeffs: [f32; 4],
    bases: [usize; 4],
    n_valid: usize,
}

#[inline(always)]
fn sample_coords(cfg: &DcnConfig, h: usize, w: usize, kk: usize, oy: f32, ox: f32) -> (f32, f32) {
    let (gy, gx) = cfg.grid_point(kk);
    (
        h as f32 + gy as f32 + cfg.offset_scale * oy,
        w as f32 + gx as f32 + cfg.offset_scale * ox,
    )
}

#[inline(always)]
fn bilinear_coeffs(py: f32, px: f32) -> ([f32; 4], i64, i64) {
    let y0 = py.floor();
    let x0 = px.floor();
    let ty = py - y0;
    let tx = px - x0;
    (
        [
            (1.0 - ty) * (1.0 - tx),
            (1.0 - ty) * tx,
            ty * (1.0 - tx),
            ty * tx,
        ],
        y0 as i64,
        x0 as i64,
    )
}

/// Fill `points` for one (location, group). Offsets and weights are read
/// once here regardless of how many channel blocks consume them.
#[inline]
fn plan_points<P: KernelProbe>(
    points: &mut [PointPlan],
    cfg: &DcnConfig,
    s: Shape,
    off: &OffsetField,
    wf: &WeightField,
    n: usize,
    h: usize,
    w: usize,
    g: usize,
    chan_base: usize,
    probe: &P,
) {
    let kp = cfg.k_points();
    let ob = off.base(n, h, w, g);
    let wb = wf.base(n, h, w, g);
    probe.offset_elem_reads(3 * kp as u64);
    probe.coeff_computations(kp as u64);
    let (hh, ww) = (s.h as i64, s.w as i64);
    for kk in 0..kp {
        let oy = off.data[ob + 2 * kk];
        let ox = off.data[ob + 2 * kk + 1];
        let (py, px) = sample_coords(cfg, h, w, kk, oy, ox);
        let (coeffs, y0, x0) = bilinear_coeffs(py, px);
        let p = &mut points[kk];
        p.weight = wf.data[wb + kk];
        p.n_valid = 0;
        for (i, (yy, xx)) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
            .into_iter()
            .enumerate()
        {
            if yy >= 0 && yy < hh && xx >= 0 && xx < ww {
                p.coeffs[p.n_valid] = coeffs[i];
                p.bases[p.n_valid] = s.index(n, yy as usize, xx as usize, chan_base);
                p.n_valid += 1;
            }
        }
    }
}

fn forward_f32<P: KernelProbe>(
    x: &[f32],
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    plan: &KernelPlan,
    probe: &P,
) -> Vec<f32> {
    let s = Shape::new(off.n, off.h, off.w, cfg.channels).unwrap();
    let mut out = vec![0.0f32; s.len()];
    let row_len = s.w * s.c;
    let d = cfg.group_dim();
    let kp = cfg.k_points();
    let use_simd = plan.use_vector_lanes && plan.d_prime % 8 == 0 && simd::avx2_available();

    out.par_chunks_mut(row_len).enumerate().for_each(|(row, out_row)| {
        let n = row / s.h;
        let h = row % s.h;
        let mut points = vec![PointPlan::default(); kp];
        for wx in 0..s.w {
            for g in 0..cfg.groups {
                let chan_base = g * d;
                match plan.stage {
                    StageTag::Baseline => {
                        // literal transcription: every channel re-reads the
                        // tables and recomputes the coefficients
                        for c in 0..d {
                            let ch = chan_base + c;
                            let ob = off.base(n, h, wx, g);
                            let wb = w.base(n, h, wx, g);
                            probe.offset_elem_reads(3 * kp as u64);
                            probe.coeff_computations(kp as u64);
                            let mut acc = 0.0f32;
                            for kk in 0..kp {
                                let oy = off.data[ob + 2 * kk];
                                let ox = off.data[ob + 2 * kk + 1];
                                let (py, px) = sample_coords(cfg, h, wx, kk, oy, ox);
                                let (coeffs, y0, x0) = bilinear_coeffs(py, px);
                                let mut sample = 0.0f32;
                                for (i, (yy, xx)) in
                                    [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
                                        .into_iter()
                                        .enumerate()
                                {
                                    if yy >= 0
                                        && yy < s.h as i64
                                        && xx >= 0
                                        && xx < s.w as i64
                                    {
                                        sample += coeffs[i]
                                            * x[s.index(n, yy as usize, xx as usize, ch)];
                                    }
                                }
                                acc += w.data[wb + kk] * sample;
                            }
                            out_row[wx * s.c + ch] = acc;
                        }
                    }
                    StageTag::WorkloadElim => {
                        // tables read once per (location, group); coefficients
                        // still recomputed for every channel
                        let ob = off.base(n, h, wx, g);
                        let wb = w.base(n, h, wx, g);
                        probe.offset_elem_reads(3 * kp as u64);
                        let local_off = &off.data[ob..ob + 2 * kp];
                        let local_w = &w.data[wb..wb + kp];
                        for c in 0..d {
                            let ch = chan_base + c;
                            probe.coeff_computations(kp as u64);
                            let mut acc = 0.0f32;
                            for kk in 0..kp {
                                let (py, px) = sample_coords(
                                    cfg,
                                    h,
                                    wx,
                                    kk,
                                    local_off[2 * kk],
                                    local_off[2 * kk + 1],
                                );
                                let (coeffs, y0, x0) = bilinear_coeffs(py, px);
                                let mut sample = 0.0f32;
                                for (i, (yy, xx)) in
                                    [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
                                        .into_iter()
                                        .enumerate()
                                {
                                    if yy >= 0
                                        && yy < s.h as i64
                                        && xx >= 0
                                        && xx < s.w as i64
                                    {
                                        sample += coeffs[i]
                                            * x[s.index(n, yy as usize, xx as usize, ch)];
                                    }
                                }
                                acc += local_w[kk] * sample;
                            }
                            out_row[wx * s.c + ch] = acc;
                        }
                    }
                    _ => {
                        plan_points(&mut points, cfg, s, off, w, n, h, wx, g, chan_base, probe);
                        let out_base = wx * s.c + chan_base;
                        if use_simd {
                            for cb in (0..d).step_by(8) {
                                // SAFETY: avx2 presence checked above; all
                                // bases address 8 in-bounds contiguous lanes
                                unsafe {
                                    simd::accum_block8_f32(
                                        x,
                                        &points,
                                        cb,
                                        &mut out_row[out_base + cb..out_base + cb + 8],
                                    );
                                }
                            }
                        } else if plan.use_vector_lanes {
                            accum_block_scalar_lanes(
                                x,
                                &points,
                                d,
                                plan.d_prime,
                                &mut out_row[out_base..out_base + d],
                            );
                        } else {
                            // coeff-reuse without packed lanes: scalar walk
                            for c in 0..d {
                                let mut acc = 0.0f32;
                                for p in points.iter() {
                                    let mut sample = 0.0f32;
                                    for i in 0..p.n_valid {
                                        sample += p.coeffs[i] * x[p.bases[i] + c];
                                    }
                                    acc += p.weight * sample;
                                }
                                out_row[out_base + c] = acc;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Safe blocked accumulation used when AVX2 is unavailable. Contiguous
/// channel blocks, per-element order identical to the scalar path.
fn accum_block_scalar_lanes(
    x: &[f32],
    points: &[PointPlan],
    d: usize,
    d_prime: usize,
    out: &mut [f32],
) {
    let mut acc = [0.0f32; 64];
    let bw = d_prime.min(64);
    for cb in (0..d).step_by(bw) {
        let acc = &mut acc[..bw];
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in points {
            let mut sample = [0.0f32; 64];
            let sample = &mut sample[..bw];
            for i in 0..p.n_valid {
                let c = p.coeffs[i];
                let src = &x[p.bases[i] + cb..p.bases[i] + cb + bw];
                for (sj, &v) in sample.iter_mut().zip(src) {
                    *sj += c * v;
                }
            }
            for (aj, &sj) in acc.iter_mut().zip(sample.iter()) {
                *aj += p.weight * sj;
            }
        }
        out[cb..cb + bw].copy_from_slice(acc);
    }
}

fn forward_f16<P: KernelProbe>(
    x: &[f16],
    off: &OffsetField,
    w: &WeightField,
    cfg: &DcnConfig,
    plan: &KernelPlan,
    probe: &P,
) -> Vec<f16> {
    let s = Shape::new(off.n, off.h, off.w, cfg.channels).unwrap();
    let mut out = vec![f16::ZERO; s.len()];
    let row_len = s.w * s.c;
    let d = cfg.group_dim();
    let kp = cfg.k_points();
    let use_simd = plan.d_prime % 8 == 0 && simd::f16c_available();

    out.par_chunks_mut(row_len).enumerate().for_each(|(row, out_row)| {
        let n = row / s.h;
        let h = row % s.h;
        let mut points = vec![PointPlan::default(); kp];
        for wx in 0..s.w {
            for g in 0..cfg.groups {
                let chan_base = g * d;
                plan_points(&mut points, cfg, s, off, w, n, h, wx, g, chan_base, probe);
                let out_base = wx * s.c + chan_base;
                if use_simd {
                    let step = if d % 16 == 0 { 16 } else { 8 };
                    for cb in (0..d).step_by(step) {
                        // SAFETY: f16c presence checked above
                        unsafe {
                            if step == 16 {
                                simd::accum_block16_f16(
                                    x,
                                    &points,
                                    cb,
                                    &mut out_row[out_base + cb..out_base + cb + 16],
                                );
                            } else {
                                simd::accum_block8_f16(
                                    x,
                                    &points,
                                    cb,
                                    &mut out_row[out_base + cb..out_base + cb + 8],
                                );
                            }
                        }
                    }
                } else {
                    for c in 0..d {
                        let mut acc = 0.0f32;
                        for p in points.iter() {
                            let mut sample = 0.0f32;
                            for i in 0..p.n_valid {
                                sample += p.coeffs[i] * x[p.bases[i] + c].to_f32();
                            }
                            acc += p.weight * sample;
                        }
                        out_row[out_base + c] = f16::from_f32(acc);
                    }
                }
            }
        }
    });
    out
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::PointPlan;
    use half::f16;
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub fn avx2_available() -> bool {
        static FLAG: OnceLock<bool> = OnceLock::new();
        *FLAG.get_or_init(|| is_x86_feature_detected!("avx2"))
    }

    pub fn f16c_available() -> bool {
        static FLAG: OnceLock<bool> = OnceLock::new();
        *FLAG.get_or_init(|| {
            is_x86_feature_detected!("avx2") && is_x86_feature_detected!("f16c")
        })
    }

    /// One 8-channel block. mul+add (no FMA) keeps results bitwise equal to
    /// the scalar stages.
    #[target_feature(enable = "avx2")]
    pub unsafe fn accum_block8_f32(x: &[f32], points: &[PointPlan], cb: usize, out: &mut [f32]) {
        let mut acc = _mm256_setzero_ps();
        for p in points {
            let mut sample = _mm256_setzero_ps();
            for i in 0..p.n_valid {
                let v = _mm256_loadu_ps(x.as_ptr().add(p.bases[i] + cb));
                sample = _mm256_add_ps(sample, _mm256_mul_ps(_mm256_set1_ps(p.coeffs[i]), v));
            }
            acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_set1_ps(p.weight), sample));
        }
        _mm256_storeu_ps(out.as_mut_ptr(), acc);
    }

    /// fp16 storage block: one packed 128-bit load per 8 channels, widened
    /// with F16C, accumulated at fp32, rounded back on store.
    #[target_feature(enable = "avx2,f16c")]
    pub unsafe fn accum_block8_f16(x: &[f16], points: &[PointPlan], cb: usize, out: &mut [f16]) {
        let mut acc = _mm256_setzero_ps();
        for p in points {
            let mut sample = _mm256_setzero_ps();
            for i in 0..p.n_valid {
                let raw = _mm_loadu_si128(x.as_ptr().add(p.bases[i] + cb) as *const __m128i);
                let v = _mm256_cvtph_ps(raw);
                sample = _mm256_add_ps(sample, _mm256_mul_ps(_mm256_set1_ps(p.coeffs[i]), v));
            }
            acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_set1_ps(p.weight), sample));
        }
        let packed = _mm256_cvtps_ph::<_MM_FROUND_TO_NEAREST_INT>(acc);
        _mm_storeu_si128(out.as_mut_ptr() as *mut __m128i, packed);
    }

    /// Two 8-channel fp16 blocks per iteration; per-lane arithmetic is the
    /// same as accum_block8_f16, the wider tile only amortizes loop
    /// overhead and the coefficient broadcasts.
    #[target_feature(enable = "avx2,f16c")]
    pub unsafe fn accum_block16_f16(x: &[f16], points: &[PointPlan], cb: usize, out: &mut [f16]) {
        let mut acc0 = _mm256_setzero_ps();
        let mut acc1 = _mm256_setzero_ps();
        for p in points {
            let mut s0 = _mm256_setzero_ps();
            let mut s1 = _mm256_setzero_ps();
            for i in 0..p.n_valid {
                let raw = _mm256_loadu_si256(x.as_ptr().add(p.bases[i] + cb) as *const __m256i);
                let c = _mm256_set1_ps(p.coeffs[i]);
                let v0 = _mm256_cvtph_ps(_mm256_castsi256_si128(raw));
                let v1 = _mm256_cvtph_ps(_mm256_extracti128_si256::<1>(raw));
                s0 = _mm256_add_ps(s0, _mm256_mul_ps(c, v0));
                s1 = _mm256_add_ps(s1, _mm256_mul_ps(c, v1));
            }
            let wv = _mm256_set1_ps(p.weight);
            acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(wv, s0));
            acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(wv, s1));
        }
        let p0 = _mm256_cvtps_ph::<_MM_FROUND_TO_NEAREST_INT>(acc0);
        let p1 = _mm256_cvtps_ph::<_MM_FROUND_TO_NEAREST_INT>(acc1);
        _mm_storeu_si128(out.as_mut_ptr() as *mut __m128i, p0);
        _mm_storeu_si128(out.as_mut_ptr().add(8) as *mut __m128i, p1);
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    use super::PointPlan;
    use half::f16;

    pub fn avx2_available() -> bool {
        false
    }
    pub fn f16c_available() -> bool {
        false
    }
    pub unsafe fn accum_block8_f32(_: &[f32], _: &[PointPlan], _: usize, _: &mut [f32]) {
        unreachable!()
    }
    pub unsafe fn accum_block8_f16(_: &[f16], _: &[PointPlan], _: usize, _: &mut [f16]) {
        unreachable!()
    }
    pub unsafe fn accum_block16_f16(_: &[f16], _: &[PointPlan], _: usize, _: &mut [f16]) {
        unreachable!()
    }
}

/// Benchmark one ladder stage on seeded inputs at the given shape.
pub fn run_stage(
    stage: StageTag,
    shape: Shape,
    cfg: &DcnConfig,
    seed: u64,
    warmup: usize,
    reps: usize,
) -> Result<BenchRecord> {
    use crate::tensor::FillSpec;

    let plan = KernelPlan::for_stage(stage);
    plan.validate(cfg)?;
    let kp = cfg.k_points();
    let x32 = TensorNHWC::create(
        shape,
        ElementType::F32,
        FillSpec::SeededUniform {
            seed,
            lo: -1.0,
            hi: 1.0,
        },
    );
    let x = x32.cast(plan.dtype);
    let off = OffsetField::seeded_uniform(
        shape.n, shape.h, shape.w, cfg.groups, kp, seed + 1, -2.0, 2.0,
    );
    let w = WeightField::seeded_uniform(
        shape.n, shape.h, shape.w, cfg.groups, kp, seed + 2, -1.0, 1.0,
    );

    let mut checksum = 0.0f32;
    let stats = timing::measure(warmup, reps, || {
        let y = dcn_forward_opt(&x, &off, &w, cfg, &plan).expect("stage forward");
        checksum = y.checksum();
    });
    Ok(BenchRecord {
        op: format!("dcn-opt[{}]", stage.name()),
        shape,
        groups: cfg.groups,
        dtype: plan.dtype,
        stage: Some(stage),
        reps,
        median_us: stats.median_us,
        p10_us: stats.p10_us,
        p90_us: stats.p90_us,
        checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::dcn_forward_ref;
    use crate::tensor::FillSpec;

    fn seeded_case(
        shape: Shape,
        g: usize,
        k: usize,
        seed: u64,
    ) -> (TensorNHWC, OffsetField, WeightField, DcnConfig) {
        let cfg = DcnConfig::new(k, g, shape.c, false).unwrap();
        let kp = cfg.k_points();
        let x = TensorNHWC::create(
            shape,
            ElementType::F32,
            FillSpec::SeededUniform {
                seed,
                lo: -1.0,
                hi: 1.0,
            },
        );
        let off =
            OffsetField::seeded_uniform(shape.n, shape.h, shape.w, g, kp, seed + 1, -2.0, 2.0);
        let w = WeightField::seeded_uniform(shape.n, shape.h, shape.w, g, kp, seed + 2, -1.0, 1.0);
        (x, off, w, cfg)
    }

    fn max_rel_err(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f32::max)
    }

    #[test]
    fn all_stages_match_reference() {
        let shape = Shape::new(2, 8, 8, 32).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 2, 3, 70);
        let reference = dcn_forward_ref(&x, &off, &w, &cfg).unwrap();
        for stage in StageTag::LADDER {
            let plan = KernelPlan::for_stage(stage);
            let xin = x.cast(plan.dtype);
            let y = dcn_forward_opt(&xin, &off, &w, &cfg, &plan).unwrap();
            let tol = if plan.dtype == ElementType::F16 { 2e-2 } else { 1e-5 };
            let err = max_rel_err(&y.to_f32_vec(), reference.as_f32().unwrap());
            assert!(err <= tol, "stage {stage}: err {err}");
        }
    }

    #[test]
    fn fp32_stages_bitwise_identical() {
        let shape = Shape::new(1, 7, 9, 16).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 2, 5, 71);
        let base = dcn_forward_opt(&x, &off, &w, &cfg, &KernelPlan::for_stage(StageTag::Baseline))
            .unwrap();
        for stage in [StageTag::WorkloadElim, StageTag::CoeffReuse, StageTag::VectorLanes] {
            let y = dcn_forward_opt(&x, &off, &w, &cfg, &KernelPlan::for_stage(stage)).unwrap();
            let eq = base
                .as_f32()
                .unwrap()
                .iter()
                .zip(y.as_f32().unwrap())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(eq, "stage {stage} not bitwise equal to baseline");
        }
    }

    #[test]
    fn k1_identity_exact() {
        let shape = Shape::new(1, 4, 4, 16).unwrap();
        let x = TensorNHWC::create(
            shape,
            ElementType::F32,
            FillSpec::SeededUniform {
                seed: 3,
                lo: -1.0,
                hi: 1.0,
            },
        );
        let cfg = DcnConfig::new(1, 2, 16, false).unwrap();
        let off = OffsetField::zeros(1, 4, 4, 2, 1);
        let mut w = WeightField::zeros(1, 4, 4, 2, 1);
        w.data.iter_mut().for_each(|v| *v = 1.0);
        let y = dcn_forward_opt(&x, &off, &w, &cfg, &KernelPlan::fastest(ElementType::F32))
            .unwrap();
        assert_eq!(y.as_f32().unwrap(), x.as_f32().unwrap());
    }

    #[test]
    fn softmax_config_rejected() {
        let shape = Shape::new(1, 4, 4, 16).unwrap();
        let (x, off, w, _) = seeded_case(shape, 2, 3, 5);
        let cfg = DcnConfig::new(3, 2, 16, true).unwrap();
        match dcn_forward_opt(&x, &off, &w, &cfg, &KernelPlan::fastest(ElementType::F32)) {
            Err(DcnError::Unsupported(msg)) => assert!(msg.contains("dcn_forward_ref")),
            other => panic!("expected unsupported-configuration error, got {other:?}"),
        }
    }

    #[test]
    fn plan_invariants_enforced() {
        let cfg = DcnConfig::new(3, 2, 16, false).unwrap(); // D = 8
        let mut plan = KernelPlan::for_stage(StageTag::VectorLanes).with_d_prime(3);
        assert!(matches!(plan.validate(&cfg), Err(DcnError::Plan(_))));
        plan = KernelPlan::for_stage(StageTag::VectorLanes).with_d_prime(8);
        assert!(plan.validate(&cfg).is_ok());
        // d_prime=2 f32 = 8 bytes, not a 128-bit multiple
        plan = KernelPlan::for_stage(StageTag::VectorLanes).with_d_prime(2);
        assert!(matches!(plan.validate(&cfg), Err(DcnError::Plan(_))));
    }

    #[test]
    fn counters_are_amortized_and_d_prime_independent() {
        let shape = Shape::new(2, 6, 5, 32).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 2, 3, 77);
        let expected_entries = (shape.n * shape.h * shape.w * cfg.groups * cfg.k_points()) as u64;
        for d_prime in [8, 16] {
            let plan = KernelPlan::for_stage(StageTag::VectorLanes).with_d_prime(d_prime);
            let probe = CountingProbe::default();
            dcn_forward_opt_probed(&x, &off, &w, &cfg, &plan, &probe).unwrap();
            assert_eq!(
                probe.offset_elem_reads.load(Ordering::Relaxed),
                expected_entries * 3
            );
            assert_eq!(
                probe.coeff_computations.load(Ordering::Relaxed),
                expected_entries
            );
        }
    }

    #[test]
    fn baseline_counters_scale_with_channels() {
        let shape = Shape::new(1, 4, 4, 16).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 2, 3, 78);
        let probe = CountingProbe::default();
        let plan = KernelPlan::for_stage(StageTag::Baseline);
        dcn_forward_opt_probed(&x, &off, &w, &cfg, &plan, &probe).unwrap();
        let entries = (shape.n * shape.h * shape.w * cfg.groups * cfg.k_points()) as u64;
        let d = cfg.group_dim() as u64;
        assert_eq!(
            probe.offset_elem_reads.load(Ordering::Relaxed),
            entries * 3 * d
        );
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let shape = Shape::new(2, 10, 10, 32).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 4, 3, 79);
        let plan = KernelPlan::fastest(ElementType::F32);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| dcn_forward_opt(&x, &off, &w, &cfg, &plan).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.as_f32().unwrap(), b.as_f32().unwrap());
    }

    #[test]
    fn corruption_hook_changes_output() {
        let shape = Shape::new(1, 4, 4, 16).unwrap();
        let (x, off, w, cfg) = seeded_case(shape, 2, 3, 80);
        let plan = KernelPlan::fastest(ElementType::F32);
        let clean = dcn_forward_opt(&x, &off, &w, &cfg, &plan).unwrap();
        CORRUPT_KERNEL.store(true, Ordering::Relaxed);
        let dirty = dcn_forward_opt(&x, &off, &w, &cfg, &plan).unwrap();
        CORRUPT_KERNEL.store(false, Ordering::Relaxed);
        assert_ne!(clean.as_f32().unwrap()[0], dirty.as_f32().unwrap()[0]);
    }
}
