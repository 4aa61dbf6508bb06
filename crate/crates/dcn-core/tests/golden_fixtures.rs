//! Golden tests against fixtures produced by the standalone scalar oracle
//! (tools/oracle/gen_fixtures.py). The oracle shares no code with the
//! library; regenerate with
//!   python3 tools/oracle/gen_fixtures.py crates/dcn-core/tests/golden

use std::path::PathBuf;

use dcn_core::module::{branch_forward, module_forward, ModuleConfig, ModuleParams, ModuleVariant};
use dcn_core::optimized::KernelPlan;
use dcn_core::{
    dcn_forward_opt, dcn_forward_ref, DcnConfig, ElementType, FillSpec, OffsetField, Shape,
    TensorNHWC, WeightField,
};

fn golden(name: &str) -> TensorNHWC {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    TensorNHWC::read_fixture(path).expect("golden fixture readable")
}

fn seeded(shape: Shape, seed: u64) -> TensorNHWC {
    TensorNHWC::create(
        shape,
        ElementType::F32,
        FillSpec::SeededUniform { seed, lo: -1.0, hi: 1.0 },
    )
}

fn assert_close(got: &[f32], want: &[f32], tol: f32, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    let mut worst = 0.0f32;
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let err = (g - w).abs() / (1.0 + w.abs());
        assert!(err <= tol, "{what}[{i}]: {g} vs {w} (err {err:.3e})");
        worst = worst.max(err);
    }
    eprintln!("{what}: max err {worst:.3e}");
}

fn core_case() -> (TensorNHWC, OffsetField, WeightField) {
    let x = seeded(Shape::new(1, 4, 4, 16).unwrap(), 7);
    let off = OffsetField::seeded_uniform(1, 4, 4, 2, 9, 8, -2.0, 2.0);
    let w = WeightField::seeded_uniform(1, 4, 4, 2, 9, 9, -1.0, 1.0);
    (x, off, w)
}

#[test]
fn forward_ref_matches_oracle_nosoftmax() {
    let (x, off, w) = core_case();
    let cfg = DcnConfig::new(3, 2, 16, false).unwrap();
    let y = dcn_forward_ref(&x, &off, &w, &cfg).unwrap();
    let want = golden("dcn_ref_nosoftmax.dcnt");
    assert_close(y.as_f32().unwrap(), want.as_f32().unwrap(), 1e-5, "ref-nosoftmax");
}

#[test]
fn forward_ref_matches_oracle_softmax() {
    let (x, off, w) = core_case();
    let cfg = DcnConfig::new(3, 2, 16, true).unwrap();
    let y = dcn_forward_ref(&x, &off, &w, &cfg).unwrap();
    let want = golden("dcn_ref_softmax.dcnt");
    assert_close(y.as_f32().unwrap(), want.as_f32().unwrap(), 1e-5, "ref-softmax");
}

#[test]
fn forward_opt_matches_oracle() {
    let (x, off, w) = core_case();
    let cfg = DcnConfig::new(3, 2, 16, false).unwrap();
    let y = dcn_forward_opt(&x, &off, &w, &cfg, &KernelPlan::fastest(ElementType::F32)).unwrap();
    let want = golden("dcn_ref_nosoftmax.dcnt");
    assert_close(y.as_f32().unwrap(), want.as_f32().unwrap(), 1e-5, "opt-vs-oracle");
}

#[test]
fn branch_outputs_match_oracle() {
    let x = seeded(Shape::new(1, 6, 6, 32).unwrap(), 11);
    for (variant, tag) in [(ModuleVariant::V3, "v3"), (ModuleVariant::V4, "v4")] {
        let cfg = ModuleConfig::new(variant, 32, 2, 3).unwrap();
        let params = ModuleParams::seeded_dense(&cfg, 100);
        let (off, w) = branch_forward(&x, &params, &cfg).unwrap();
        let off_want = golden(&format!("branch_{tag}_offsets.dcnt"));
        let w_want = golden(&format!("branch_{tag}_weights.dcnt"));
        assert_close(&off.data, off_want.as_f32().unwrap(), 1e-4, &format!("branch-{tag}-off"));
        assert_close(&w.data, w_want.as_f32().unwrap(), 1e-4, &format!("branch-{tag}-w"));
    }
}

#[test]
fn module_forward_matches_oracle() {
    let x = seeded(Shape::new(1, 8, 8, 32).unwrap(), 13);
    let plan = KernelPlan::fastest(ElementType::F32);
    for (variant, tag) in [(ModuleVariant::V3, "v3"), (ModuleVariant::V4, "v4")] {
        let cfg = ModuleConfig::new(variant, 32, 2, 3).unwrap();
        let params = ModuleParams::seeded_dense(&cfg, 200);
        let y = module_forward(&x, &params, &cfg, &plan).unwrap();
        let want = golden(&format!("module_{tag}.dcnt"));
        assert_close(y.as_f32().unwrap(), want.as_f32().unwrap(), 1e-4, &format!("module-{tag}"));
    }
}
