//! Structural invariants of the core op, checked over randomized inputs.

use proptest::prelude::*;

use dcn_core::{
    dcn_forward_ref, DcnConfig, ElementType, FillSpec, OffsetField, Shape, TensorNHWC, WeightField,
};

fn seeded(shape: Shape, seed: u64, lo: f32, hi: f32) -> TensorNHWC {
    TensorNHWC::create(shape, ElementType::F32, FillSpec::SeededUniform { seed, lo, hi })
}

fn rel(a: f32, b: f32) -> f32 {
    (a - b).abs() / (1.0 + b.abs())
}

fn small_case() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    // (seed, h, w, groups, group_dim)
    (any::<u64>(), 3usize..=8, 3usize..=8, 1usize..=2, prop_oneof![Just(4usize), Just(8)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The op is linear in the input feature map.
    #[test]
    fn linear_in_input((seed, h, w, g, d) in small_case(), alpha in -2.0f32..2.0) {
        let c = g * d;
        let shape = Shape::new(1, h, w, c).unwrap();
        let cfg = DcnConfig::new(3, g, c, false).unwrap();
        let x1 = seeded(shape, seed, -1.0, 1.0);
        let x2 = seeded(shape, seed ^ 0xabcd, -1.0, 1.0);
        let off = OffsetField::seeded_uniform(1, h, w, g, 9, seed.wrapping_add(1), -1.5, 1.5);
        let wts = WeightField::seeded_uniform(1, h, w, g, 9, seed.wrapping_add(2), -1.0, 1.0);

        let mut x_sum = TensorNHWC::zeros(shape);
        for (o, (a, b)) in x_sum.as_f32_mut().unwrap().iter_mut()
            .zip(x1.as_f32().unwrap().iter().zip(x2.as_f32().unwrap()))
        {
            *o = alpha * a + b;
        }

        let y1 = dcn_forward_ref(&x1, &off, &wts, &cfg).unwrap();
        let y2 = dcn_forward_ref(&x2, &off, &wts, &cfg).unwrap();
        let y_sum = dcn_forward_ref(&x_sum, &off, &wts, &cfg).unwrap();
        for ((a, b), s) in y1.as_f32().unwrap().iter()
            .zip(y2.as_f32().unwrap())
            .zip(y_sum.as_f32().unwrap())
        {
            prop_assert!(rel(alpha * a + b, *s) <= 1e-4);
        }
    }

    /// Without softmax the op is also linear in the aggregation weights.
    #[test]
    fn linear_in_weights((seed, h, w, g, d) in small_case(), alpha in -2.0f32..2.0) {
        let c = g * d;
        let shape = Shape::new(1, h, w, c).unwrap();
        let cfg = DcnConfig::new(3, g, c, false).unwrap();
        let x = seeded(shape, seed, -1.0, 1.0);
        let off = OffsetField::seeded_uniform(1, h, w, g, 9, seed.wrapping_add(1), -1.5, 1.5);
        let w1 = WeightField::seeded_uniform(1, h, w, g, 9, seed.wrapping_add(2), -1.0, 1.0);
        let w2 = WeightField::seeded_uniform(1, h, w, g, 9, seed.wrapping_add(3), -1.0, 1.0);

        let mut w_sum = WeightField::zeros(1, h, w, g, 9);
        for (o, (a, b)) in w_sum.data.iter_mut().zip(w1.data.iter().zip(&w2.data)) {
            *o = alpha * a + b;
        }

        let y1 = dcn_forward_ref(&x, &off, &w1, &cfg).unwrap();
        let y2 = dcn_forward_ref(&x, &off, &w2, &cfg).unwrap();
        let y_sum = dcn_forward_ref(&x, &off, &w_sum, &cfg).unwrap();
        for ((a, b), s) in y1.as_f32().unwrap().iter()
            .zip(y2.as_f32().unwrap())
            .zip(y_sum.as_f32().unwrap())
        {
            prop_assert!(rel(alpha * a + b, *s) <= 1e-4);
        }
    }

    /// With zero offsets the op reduces to a plain weighted window sum;
    /// compare against a direct transcription of that sum.
    #[test]
    fn zero_offsets_reduce_to_window_sum((seed, h, w, g, d) in small_case()) {
        let c = g * d;
        let k = 3usize;
        let shape = Shape::new(1, h, w, c).unwrap();
        let cfg = DcnConfig::new(k, g, c, false).unwrap();
        let x = seeded(shape, seed, -1.0, 1.0);
        let off = OffsetField::zeros(1, h, w, g, k * k);
        let wts = WeightField::seeded_uniform(1, h, w, g, k * k, seed.wrapping_add(2), -1.0, 1.0);

        let y = dcn_forward_ref(&x, &off, &wts, &cfg).unwrap();
        let xs = x.as_f32().unwrap();
        let ys = y.as_f32().unwrap();
        let r = (k - 1) as isize / 2;
        for hy in 0..h {
            for wx in 0..w {
                for gi in 0..g {
                    for di in 0..d {
                        let ci = gi * d + di;
                        let mut acc = 0.0f32;
                        let mut ki = 0usize;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (sy, sx) = (hy as isize + dy, wx as isize + dx);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    let v = xs[shape.index(0, sy as usize, sx as usize, ci)];
                                    acc += wts.slice(0, hy, wx, gi)[ki] * v;
                                }
                                ki += 1;
                            }
                        }
                        prop_assert!(rel(acc, ys[shape.index(0, hy, wx, ci)]) <= 1e-4);
                    }
                }
            }
        }
    }

    /// Translating the input translates the output wherever the sampling
    /// window stays inside both frames (constant offsets and weights).
    #[test]
    fn translation_equivariance((seed, h, w, g, d) in small_case()) {
        let c = g * d;
        let shape = Shape::new(1, h, w, c).unwrap();
        let cfg = DcnConfig::new(3, g, c, false).unwrap();
        let x = seeded(shape, seed, -1.0, 1.0);
        let off = OffsetField::zeros(1, h, w, g, 9);
        let wts = WeightField::seeded_uniform(1, 1, 1, g, 9, seed.wrapping_add(2), -1.0, 1.0);
        // broadcast the single weight vector to every location
        let mut wts_full = WeightField::zeros(1, h, w, g, 9);
        for hy in 0..h {
            for wx in 0..w {
                for gi in 0..g {
                    for ki in 0..9 {
                        let v = wts.slice(0, 0, 0, gi)[ki];
                        let base = wts_full.base(0, hy, wx, gi);
                        wts_full.data[base + ki] = v;
                    }
                }
            }
        }

        // shift right/down by one, zero-filling the vacated border
        let mut x_shift = TensorNHWC::zeros(shape);
        for hy in 1..h {
            for wx in 1..w {
                for ci in 0..c {
                    let v = x.as_f32().unwrap()[shape.index(0, hy - 1, wx - 1, ci)];
                    x_shift.as_f32_mut().unwrap()[shape.index(0, hy, wx, ci)] = v;
                }
            }
        }

        let y = dcn_forward_ref(&x, &off, &wts_full, &cfg).unwrap();
        let y_shift = dcn_forward_ref(&x_shift, &off, &wts_full, &cfg).unwrap();
        // margin of 2 keeps the 3x3 window clear of both zero borders
        for hy in 2..h - 1 {
            for wx in 2..w - 1 {
                for ci in 0..c {
                    let a = y.as_f32().unwrap()[shape.index(0, hy - 1, wx - 1, ci)];
                    let b = y_shift.as_f32().unwrap()[shape.index(0, hy, wx, ci)];
                    prop_assert!(rel(a, b) <= 1e-5);
                }
            }
        }
    }

    /// Fixture serialization round-trips bit for bit.
    #[test]
    fn fixture_round_trip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 1usize..9) {
        let shape = Shape::new(1, h, w, c).unwrap();
        let t = seeded(shape, seed, -10.0, 10.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dcnt");
        t.write_fixture(&path).unwrap();
        let back = TensorNHWC::read_fixture(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in t.as_f32().unwrap().iter().zip(back.as_f32().unwrap()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
