//! The full module layer around the core op: input/output 1×1 projections
//! and the offset/weight branch in its three micro-design variants.
//!
//!   v3             — depthwise k×k conv → layer norm → GELU → two separate
//!                    linear maps (offsets C→2GK, weight logits C→GK), core
//!                    op runs with softmax over K
//!   v4             — depthwise k×k conv (optional) → one fused linear map
//!                    C→3GK, no norm, no activation, no softmax
//!   v4-lightweight — v4 without the input/output projections
//!
//! The fused v4 linear output splits channelwise as [2GK offsets | GK
//! weights], in that fixed order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DcnError, Result};
use crate::optimized::{dcn_forward_opt, KernelPlan};
use crate::reference::{dcn_forward_ref, DcnConfig, OffsetField, WeightField};
use crate::tensor::{ElementType, SeededStream, Shape, TensorNHWC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleVariant {
    V3,
    V4,
    V4Lightweight,
}

impl ModuleVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModuleVariant::V3 => "v3",
            ModuleVariant::V4 => "v4",
            ModuleVariant::V4Lightweight => "v4-lightweight",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "v3" => ModuleVariant::V3,
            "v4" => ModuleVariant::V4,
            "v4-lightweight" | "v4lw" => ModuleVariant::V4Lightweight,
            _ => return Err(DcnError::Config(format!("unknown module variant '{s}'"))),
        })
    }

    pub fn has_projections(self) -> bool {
        !matches!(self, ModuleVariant::V4Lightweight)
    }

    pub fn uses_softmax(self) -> bool {
        matches!(self, ModuleVariant::V3)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModuleConfig {
    pub variant: ModuleVariant,
    pub use_dw_conv: bool,
    pub channels: usize,
    pub groups: usize,
    pub kernel_k: usize,
}

impl ModuleConfig {
    pub fn new(variant: ModuleVariant, channels: usize, groups: usize, kernel_k: usize) -> Result<Self> {
        // reuse the core-op validation for k/G/C
        DcnConfig::new(kernel_k, groups, channels, variant.uses_softmax())?;
        Ok(ModuleConfig {
            variant,
            use_dw_conv: true,
            channels,
            groups,
            kernel_k,
        })
    }

    pub fn k_points(&self) -> usize {
        self.kernel_k * self.kernel_k
    }

    pub fn core_config(&self) -> DcnConfig {
        DcnConfig::new(
            self.kernel_k,
            self.groups,
            self.channels,
            self.variant.uses_softmax(),
        )
        .expect("validated at construction")
    }
}

/// Per-location dense map, weight row-major (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Linear::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    /// He-uniform weights (bound √(6/fan_in)), zero bias.
    pub fn he_uniform(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut l = Linear::zeros(in_dim, out_dim);
        let b = (6.0f64 / in_dim as f64).sqrt() as f32;
        SeededStream::new(seed).fill(&mut l.weight, -b, b);
        l
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Applies the map at every (n,h,w) location.
    pub fn forward(&self, x: &TensorNHWC) -> Result<TensorNHWC> {
        let s = x.shape();
        if s.c != self.in_dim {
            return Err(DcnError::DimMismatch {
                axis: "C",
                detail: format!("linear expects {} channels, got {}", self.in_dim, s.c),
            });
        }
        let xs = x.to_f32_vec();
        let out_shape = Shape::new(s.n, s.h, s.w, self.out_dim)?;
        let mut out = vec![0.0f32; out_shape.len()];
        for p in 0..s.n * s.h * s.w {
            let src = &xs[p * self.in_dim..(p + 1) * self.in_dim];
            let dst = &mut out[p * self.out_dim..(p + 1) * self.out_dim];
            for (o, d) in dst.iter_mut().enumerate() {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o];
                for (w, v) in row.iter().zip(src) {
                    acc += w * v;
                }
                *d = acc;
            }
        }
        Ok(TensorNHWC::from_f32(out_shape, out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams {
    pub input_proj: Option<Linear>,
    pub output_proj: Option<Linear>,
    /// (k, k, C) depthwise taps.
    pub dw_conv: Option<Vec<f32>>,
    /// v3 only: per-channel layer-norm scale and shift.
    pub ln_scale: Option<Vec<f32>>,
    pub ln_shift: Option<Vec<f32>>,
    /// v3: separate offset (C→2GK) and weight-logit (C→GK) maps.
    pub offset_linear: Option<Linear>,
    pub weight_linear: Option<Linear>,
    /// v4: one fused map C→3GK.
    pub fused_linear: Option<Linear>,
}

impl ModuleParams {
    /// Standard initialization: He-uniform projections and depthwise taps,
    /// zero final branch linears so offsets start at the regular grid.
    pub fn init(cfg: &ModuleConfig, seed: u64) -> Self {
        let mut p = Self::seeded_dense(cfg, seed);
        let (c, gk) = (cfg.channels, cfg.groups * cfg.k_points());
        if cfg.variant == ModuleVariant::V3 {
            p.offset_linear = Some(Linear::zeros(c, 2 * gk));
            p.weight_linear = Some(Linear::zeros(c, gk));
        } else {
            p.fused_linear = Some(Linear::zeros(c, 3 * gk));
        }
        p
    }

    /// Fully seeded parameters (final linears non-zero), used by golden
    /// fixtures. Seed scheme mirrored in tools/oracle/gen_fixtures.py.
    pub fn seeded_dense(cfg: &ModuleConfig, seed: u64) -> Self {
        let c = cfg.channels;
        let gk = cfg.groups * cfg.k_points();
        let kk = cfg.kernel_k * cfg.kernel_k;
        let dw_conv = cfg.use_dw_conv.then(|| {
            let mut taps = vec![0.0f32; kk * c];
            let b = (6.0f64 / kk as f64).sqrt() as f32;
            SeededStream::new(seed + 2).fill(&mut taps, -b, b);
            taps
        });
        let mut p = ModuleParams {
            input_proj: None,
            output_proj: None,
            dw_conv,
            ln_scale: None,
            ln_shift: None,
            offset_linear: None,
            weight_linear: None,
            fused_linear: None,
        };
        if cfg.variant.has_projections() {
            p.input_proj = Some(Linear::he_uniform(c, c, seed + 1));
            p.output_proj = Some(Linear::he_uniform(c, c, seed + 6));
        }
        match cfg.variant {
            ModuleVariant::V3 => {
                p.ln_scale = Some(vec![1.0; c]);
                p.ln_shift = Some(vec![0.0; c]);
                p.offset_linear = Some(Linear::he_uniform(c, 2 * gk, seed + 3));
                p.weight_linear = Some(Linear::he_uniform(c, gk, seed + 4));
            }
            ModuleVariant::V4 | ModuleVariant::V4Lightweight => {
                p.fused_linear = Some(Linear::he_uniform(c, 3 * gk, seed + 5));
            }
        }
        p
    }

    pub fn matches(&self, cfg: &ModuleConfig) -> bool {
        let want_proj = cfg.variant.has_projections();
        let is_v3 = cfg.variant == ModuleVariant::V3;
        self.input_proj.is_some() == want_proj
            && self.output_proj.is_some() == want_proj
            && self.dw_conv.is_some() == cfg.use_dw_conv
            && self.ln_scale.is_some() == is_v3
            && self.offset_linear.is_some() == is_v3
            && self.weight_linear.is_some() == is_v3
            && self.fused_linear.is_some() == !is_v3
    }

    /// Brute-force parameter count by enumerating every stored tensor.
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        for l in [&self.input_proj, &self.output_proj, &self.offset_linear, &self.weight_linear, &self.fused_linear]
            .into_iter()
            .flatten()
        {
            n += l.param_count();
        }
        for v in [&self.dw_conv, &self.ln_scale, &self.ln_shift].into_iter().flatten() {
            n += v.len();
        }
        n
    }

    /// One DCNT file per tensor plus a small manifest naming the config.
    pub fn save_dir<P: AsRef<Path>>(&self, cfg: &ModuleConfig, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "variant={}", cfg.variant.name());
        let _ = writeln!(manifest, "channels={}", cfg.channels);
        let _ = writeln!(manifest, "groups={}", cfg.groups);
        let _ = writeln!(manifest, "kernel_k={}", cfg.kernel_k);
        let _ = writeln!(manifest, "use_dw_conv={}", cfg.use_dw_conv);

        let mut save_vec = |name: &str, dims: (usize, usize, usize, usize), data: &[f32]| -> Result<()> {
            let shape = Shape::new(dims.0, dims.1, dims.2, dims.3)?;
            TensorNHWC::from_f32(shape, data.to_vec()).write_fixture(dir.join(format!("{name}.dcnt")))?;
            manifest.push_str(name);
            manifest.push('\n');
            Ok(())
        };

        let k = cfg.kernel_k;
        let c = cfg.channels;
        for (name, lin) in [
            ("input_proj", &self.input_proj),
            ("output_proj", &self.output_proj),
            ("offset_linear", &self.offset_linear),
            ("weight_linear", &self.weight_linear),
            ("fused_linear", &self.fused_linear),
        ] {
            if let Some(l) = lin {
                save_vec(&format!("{name}_weight"), (1, 1, l.out_dim, l.in_dim), &l.weight)?;
                save_vec(&format!("{name}_bias"), (1, 1, 1, l.out_dim), &l.bias)?;
            }
        }
        if let Some(t) = &self.dw_conv {
            save_vec("dw_conv", (1, k, k, c), t)?;
        }
        if let Some(t) = &self.ln_scale {
            save_vec("ln_scale", (1, 1, 1, c), t)?;
        }
        if let Some(t) = &self.ln_shift {
            save_vec("ln_shift", (1, 1, 1, c), t)?;
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<(ModuleConfig, ModuleParams)> {
        let dir = dir.as_ref();
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let field = |key: &str| -> Result<String> {
            manifest
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")))
                .map(str::to_string)
                .ok_or_else(|| DcnError::Config(format!("manifest missing '{key}'")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|e| DcnError::Config(format!("manifest {key}: {e}")))
        };
        let variant = ModuleVariant::parse(&field("variant")?)?;
        let mut cfg = ModuleConfig::new(
            variant,
            parse_usize("channels")?,
            parse_usize("groups")?,
            parse_usize("kernel_k")?,
        )?;
        cfg.use_dw_conv = field("use_dw_conv")? == "true";

        let load_vec = |name: &str| -> Result<Option<Vec<f32>>> {
            let path = dir.join(format!("{name}.dcnt"));
            if !path.exists() {
                return Ok(None);
            }
            Ok(Some(TensorNHWC::read_fixture(path)?.to_f32_vec()))
        };
        let load_linear = |name: &str, in_dim: usize, out_dim: usize| -> Result<Option<Linear>> {
            let Some(weight) = load_vec(&format!("{name}_weight"))? else {
                return Ok(None);
            };
            let bias = load_vec(&format!("{name}_bias"))?
                .ok_or_else(|| DcnError::Config(format!("missing {name}_bias")))?;
            if weight.len() != in_dim * out_dim || bias.len() != out_dim {
                return Err(DcnError::Config(format!("{name} has wrong size")));
            }
            Ok(Some(Linear { in_dim, out_dim, weight, bias }))
        };

        let c = cfg.channels;
        let gk = cfg.groups * cfg.k_points();
        let params = ModuleParams {
            input_proj: load_linear("input_proj", c, c)?,
            output_proj: load_linear("output_proj", c, c)?,
            dw_conv: load_vec("dw_conv")?,
            ln_scale: load_vec("ln_scale")?,
            ln_shift: load_vec("ln_shift")?,
            offset_linear: load_linear("offset_linear", c, 2 * gk)?,
            weight_linear: load_linear("weight_linear", c, gk)?,
            fused_linear: load_linear("fused_linear", c, 3 * gk)?,
        };
        if !params.matches(&cfg) {
            return Err(DcnError::Config("loaded parameters do not match manifest variant".into()));
        }
        Ok((cfg, params))
    }
}

/// Closed-form parameter count for a variant; matches
/// `ModuleParams::count_params` on seeded params.
pub fn param_count(cfg: &ModuleConfig) -> usize {
    let c = cfg.channels;
    let gk = cfg.groups * cfg.k_points();
    let mut n = 0;
    if cfg.variant.has_projections() {
        n += 2 * (c * c + c);
    }
    if cfg.use_dw_conv {
        n += cfg.kernel_k * cfg.kernel_k * c;
    }
    match cfg.variant {
        ModuleVariant::V3 => {
            n += 2 * c; // layer-norm scale + shift
            n += c * 2 * gk + 2 * gk;
            n += c * gk + gk;
        }
        ModuleVariant::V4 | ModuleVariant::V4Lightweight => {
            n += c * 3 * gk + 3 * gk;
        }
    }
    n
}

/// Primitive layers executed per forward. The fused linear counts as one;
/// each projection counts as one.
pub fn primitive_layer_count(cfg: &ModuleConfig) -> usize {
    let dw = usize::from(cfg.use_dw_conv);
    let proj = if cfg.variant.has_projections() { 2 } else { 0 };
    match cfg.variant {
        // dw, LN, GELU, offset linear, weight linear, softmax
        ModuleVariant::V3 => proj + dw + 5,
        // dw, fused linear
        ModuleVariant::V4 | ModuleVariant::V4Lightweight => proj + dw + 1,
    }
}

fn layer_norm(x: &TensorNHWC, scale: &[f32], shift: &[f32]) -> TensorNHWC {
    let s = x.shape();
    let mut out = x.to_f32_vec();
    let c = s.c;
    const EPS: f64 = 1e-6;
    for row in out.chunks_exact_mut(c) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (((*v as f64 - mean) * inv) as f32) * scale[i] + shift[i];
        }
    }
    TensorNHWC::from_f32(s, out)
}

/// Exact erf formulation, not the tanh approximation.
fn gelu(x: &TensorNHWC) -> TensorNHWC {
    let s = x.shape();
    let mut out = x.to_f32_vec();
    for v in &mut out {
        let xf = *v as f64;
        *v = (0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2))) as f32;
    }
    TensorNHWC::from_f32(s, out)
}

pub fn depthwise(x: &TensorNHWC, taps: &[f32], k: usize) -> Result<TensorNHWC> {
    let kern = crate::baselines::DwKernel::new(k, x.shape().c, taps.to_vec(), false)?;
    crate::baselines::dwconv_forward(x, &kern)
}

/// Offset/weight branch. v3 emits softmax-ready logits; v4 emits final
/// unbounded weights.
pub fn branch_forward(
    x: &TensorNHWC,
    params: &ModuleParams,
    cfg: &ModuleConfig,
) -> Result<(OffsetField, WeightField)> {
    if !params.matches(cfg) {
        return Err(DcnError::Config(
            "module parameters do not match the requested variant".into(),
        ));
    }
    let s = x.shape();
    if s.c != cfg.channels {
        return Err(DcnError::DimMismatch {
            axis: "C",
            detail: format!("branch expects {} channels, got {}", cfg.channels, s.c),
        });
    }
    let mut t = x.clone();
    if let Some(taps) = &params.dw_conv {
        t = depthwise(&t, taps, cfg.kernel_k)?;
    }
    let gk = cfg.groups * cfg.k_points();

    let (off_flat, w_flat) = if cfg.variant == ModuleVariant::V3 {
        t = layer_norm(&t, params.ln_scale.as_ref().unwrap(), params.ln_shift.as_ref().unwrap());
        t = gelu(&t);
        let offs = params.offset_linear.as_ref().unwrap().forward(&t)?;
        let wgts = params.weight_linear.as_ref().unwrap().forward(&t)?;
        (offs.to_f32_vec(), wgts.to_f32_vec())
    } else {
        let fused = params.fused_linear.as_ref().unwrap().forward(&t)?;
        let fused = fused.to_f32_vec();
        let locs = s.n * s.h * s.w;
        let mut offs = vec![0.0f32; locs * 2 * gk];
        let mut wgts = vec![0.0f32; locs * gk];
        for p in 0..locs {
            let row = &fused[p * 3 * gk..(p + 1) * 3 * gk];
            offs[p * 2 * gk..(p + 1) * 2 * gk].copy_from_slice(&row[..2 * gk]);
            wgts[p * gk..(p + 1) * gk].copy_from_slice(&row[2 * gk..]);
        }
        (offs, wgts)
    };

    let kp = cfg.k_points();
    let mut off = OffsetField::zeros(s.n, s.h, s.w, cfg.groups, kp);
    off.data = off_flat;
    let mut w = WeightField::zeros(s.n, s.h, s.w, cfg.groups, kp);
    w.data = w_flat;
    Ok((off, w))
}

/// Full module forward: input projection → branch → core op → output
/// projection. The v3 path runs the reference kernel (softmax over K); the
/// v4 paths run the optimized kernel with `plan`.
pub fn module_forward(
    x: &TensorNHWC,
    params: &ModuleParams,
    cfg: &ModuleConfig,
    plan: &KernelPlan,
) -> Result<TensorNHWC> {
    if !params.matches(cfg) {
        return Err(DcnError::Config(
            "module parameters do not match the requested variant".into(),
        ));
    }
    let xp = match &params.input_proj {
        Some(proj) => proj.forward(x)?,
        None => x.clone(),
    };
    let (off, w) = branch_forward(&xp, params, cfg)?;
    let core_cfg = cfg.core_config();
    let y = if cfg.variant.uses_softmax() {
        dcn_forward_ref(&xp, &off, &w, &core_cfg)?
    } else {
        let xin = xp.cast(plan.dtype);
        dcn_forward_opt(&xin, &off, &w, &core_cfg, plan)?.cast(ElementType::F32)
    };
    match &params.output_proj {
        Some(proj) => proj.forward(&y),
        None => Ok(y),
    }
}
