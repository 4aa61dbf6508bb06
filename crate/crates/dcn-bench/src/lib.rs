//! Shared input builders for the criterion benchmarks.

use dcn_core::{
    DcnConfig, ElementType, FillSpec, OffsetField, Shape, TensorNHWC, WeightField,
};

pub struct BenchCase {
    pub shape: Shape,
    pub cfg: DcnConfig,
    pub x: TensorNHWC,
    pub off: OffsetField,
    pub w: WeightField,
}

/// Seeded inputs for one kernel invocation. Offsets span ±2 pixels so the
/// bilinear taps actually wander off the integer grid.
pub fn seeded_case(shape: Shape, groups: usize, kernel_k: usize, seed: u64) -> BenchCase {
    let cfg = DcnConfig::new(kernel_k, groups, shape.c, false).expect("bench config");
    let kp = cfg.k_points();
    let x = TensorNHWC::create(
        shape,
        ElementType::F32,
        FillSpec::SeededUniform { seed, lo: -1.0, hi: 1.0 },
    );
    let off = OffsetField::seeded_uniform(
        shape.n, shape.h, shape.w, groups, kp, seed + 1, -2.0, 2.0,
    );
    let w = WeightField::seeded_uniform(
        shape.n, shape.h, shape.w, groups, kp, seed + 2, -1.0, 1.0,
    );
    BenchCase { shape, cfg, x, off, w }
}
