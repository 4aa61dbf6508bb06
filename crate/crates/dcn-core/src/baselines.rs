//! Comparison operators: depthwise convolution (optionally with
//! softmax-normalized taps) and small-scale dense attention with the
//! no-softmax degeneration check. These exist to make the operator
//! comparisons testable and to serve as bench rows, not to compete with
//! tuned libraries.

use crate::error::{DcnError, Result};
use crate::reference::softmax_in_place;
use crate::tensor::TensorNHWC;

/// Per-channel k×k taps. When `softmax_normalized` is set the taps are
/// softmaxed over the window per channel before use, making every output a
/// convex combination of its window.
#[derive(Debug, Clone)]
pub struct DwKernel {
    pub k: usize,
    pub channels: usize,
    /// (k, k, C) row-major, channel-last like everything else.
    pub taps: Vec<f32>,
    pub softmax_normalized: bool,
}

impl DwKernel {
    pub fn new(k: usize, channels: usize, taps: Vec<f32>, softmax_normalized: bool) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(DcnError::Config(format!("kernel size must be odd, got {k}")));
        }
        if taps.len() != k * k * channels {
            return Err(DcnError::Config(format!(
                "expected {} taps, got {}",
                k * k * channels,
                taps.len()
            )));
        }
        Ok(DwKernel {
            k,
            channels,
            taps,
            softmax_normalized,
        })
    }

    /// Delta at the window center: the identity kernel.
    pub fn identity(k: usize, channels: usize) -> Self {
        let mut taps = vec![0.0; k * k * channels];
        let center = (k / 2) * k + k / 2;
        for c in 0..channels {
            taps[center * channels + c] = 1.0;
        }
        DwKernel {
            k,
            channels,
            taps,
            softmax_normalized: false,
        }
    }

    /// Taps after optional softmax normalization, per channel over the
    /// k·k window.
    pub fn effective_taps(&self) -> Vec<f32> {
        if !self.softmax_normalized {
            return self.taps.clone();
        }
        let kk = self.k * self.k;
        let mut out = self.taps.clone();
        let mut col = vec![0.0f32; kk];
        for c in 0..self.channels {
            for i in 0..kk {
                col[i] = out[i * self.channels + c];
            }
            softmax_in_place(&mut col);
            for i in 0..kk {
                out[i * self.channels + c] = col[i];
            }
        }
        out
    }
}

/// Per-channel k×k correlation with zero padding, stride 1, same size.
pub fn dwconv_forward(x: &TensorNHWC, kern: &DwKernel) -> Result<TensorNHWC> {
    let s = x.shape();
    if s.c != kern.channels {
        return Err(DcnError::DimMismatch {
            axis: "C",
            detail: format!("input has {} channels, kernel has {}", s.c, kern.channels),
        });
    }
    let taps = kern.effective_taps();
    let k = kern.k;
    let r = (k / 2) as i64;
    let mut out = vec![0.0f32; s.len()];
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                for c in 0..s.c {
                    let mut acc = 0.0f32;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = h as i64 + dy;
                            let xx = w as i64 + dx;
                            if yy >= 0 && yy < s.h as i64 && xx >= 0 && xx < s.w as i64 {
                                let t = taps
                                    [(((dy + r) * k as i64 + dx + r) as usize) * s.c + c];
                                acc += t * x.get(n, yy as usize, xx as usize, c);
                            }
                        }
                    }
                    out[s.index(n, h, w, c)] = acc;
                }
            }
        }
    }
    Ok(TensorNHWC::from_f32(s, out))
}

/// Dense single-window attention inputs, row-major (N_tokens, d).
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub n_tokens: usize,
    pub d: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl AttentionInputs {
    pub fn new(n_tokens: usize, d: usize, q: Vec<f32>, k: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if n_tokens == 0 || d == 0 {
            return Err(DcnError::Config("n_tokens and d must be >= 1".into()));
        }
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if m.len() != n_tokens * d {
                return Err(DcnError::Config(format!(
                    "{name} must be {n_tokens}x{d}, got {} values",
                    m.len()
                )));
            }
        }
        Ok(AttentionInputs { n_tokens, d, q, k, v })
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.d as f32).sqrt()
    }
}

/// softmax(QKᵀ/√d)V when `use_softmax`, else (QKᵀ/√d)V computed left to
/// right without reordering.
pub fn attention_forward(inp: &AttentionInputs, use_softmax: bool) -> Vec<f32> {
    let (n, d) = (inp.n_tokens, inp.d);
    let scale = inp.scale();
    let mut out = vec![0.0f32; n * d];
    let mut logits = vec![0.0f32; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0f32;
            for t in 0..d {
                dot += inp.q[i * d + t] * inp.k[j * d + t];
            }
            logits[j] = scale * dot;
        }
        if use_softmax {
            softmax_in_place(&mut logits);
        }
        for t in 0..d {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += logits[j] * inp.v[j * d + t];
            }
            out[i * d + t] = acc;
        }
    }
    out
}

/// The reordered no-softmax form: Q · M with M = KᵀV/√d, the single linear
/// map shared by all queries.
pub fn attention_reordered(inp: &AttentionInputs) -> Vec<f32> {
    let (n, d) = (inp.n_tokens, inp.d);
    let scale = inp.scale();
    let mut m = vec![0.0f32; d * d]; // KᵀV / √d
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += inp.k[j * d + a] * inp.v[j * d + b];
            }
            m[a * d + b] = scale * acc;
        }
    }
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        for b in 0..d {
            let mut acc = 0.0f32;
            for a in 0..d {
                acc += inp.q[i * d + a] * m[a * d + b];
            }
            out[i * d + b] = acc;
        }
    }
    out
}

/// Max absolute discrepancy between the direct no-softmax form and the
/// reordered linear-map form. Small for every input: without softmax,
/// attention is the fixed projection Q ↦ Q·(KᵀV)/√d.
pub fn degeneration_check(inp: &AttentionInputs) -> f32 {
    let direct = attention_forward(inp, false);
    let reordered = attention_reordered(inp);
    direct
        .iter()
        .zip(&reordered)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}

/// Discrepancy between softmax attention and the degenerate linear map; with
/// softmax on, the reordering argument no longer applies.
pub fn softmax_reorder_gap(inp: &AttentionInputs) -> f32 {
    let direct = attention_forward(inp, true);
    let reordered = attention_reordered(inp);
    direct
        .iter()
        .zip(&reordered)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ElementType, FillSpec, Shape};

    fn seeded_vec(len: usize, seed: u64) -> Vec<f32> {
        let mut v = vec![0.0; len];
        crate::tensor::SeededStream::new(seed).fill(&mut v, -1.0, 1.0);
        v
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = TensorNHWC::create(
            Shape::new(1, 5, 5, 3).unwrap(),
            ElementType::F32,
            FillSpec::SeededUniform { seed: 1, lo: -1.0, hi: 1.0 },
        );
        let y = dwconv_forward(&x, &DwKernel::identity(3, 3)).unwrap();
        assert_eq!(y.as_f32().unwrap(), x.as_f32().unwrap());
    }

    #[test]
    fn softmax_equal_logits_is_box_filter() {
        let shape = Shape::new(1, 6, 6, 2).unwrap();
        let x = TensorNHWC::create(
            shape,
            ElementType::F32,
            FillSpec::SeededUniform { seed: 2, lo: -1.0, hi: 1.0 },
        );
        let kern = DwKernel::new(3, 2, vec![0.0; 9 * 2], true).unwrap();
        let y = dwconv_forward(&x, &kern).unwrap();
        // window mean with zero padding, denominator fixed at k·k
        for h in 0..6usize {
            for w in 0..6usize {
                for c in 0..2 {
                    let mut sum = 0.0f32;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = h as i64 + dy;
                            let xx = w as i64 + dx;
                            if (0..6).contains(&yy) && (0..6).contains(&xx) {
                                sum += x.get(0, yy as usize, xx as usize, c);
                            }
                        }
                    }
                    let want = sum / 9.0;
                    let got = y.get(0, h, w, c);
                    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn constant_input_interior_fixed_point() {
        let shape = Shape::new(1, 7, 7, 1).unwrap();
        let x = TensorNHWC::create(shape, ElementType::F32, FillSpec::Constant(3.25));
        let kern = DwKernel::new(3, 1, seeded_vec(9, 3), true).unwrap();
        let y = dwconv_forward(&x, &kern).unwrap();
        for h in 1..6 {
            for w in 1..6 {
                assert!((y.get(0, h, w, 0) - 3.25).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalized_taps_sum_to_one() {
        let kern = DwKernel::new(3, 4, seeded_vec(9 * 4, 4), true).unwrap();
        let taps = kern.effective_taps();
        for c in 0..4 {
            let sum: f32 = (0..9).map(|i| taps[i * 4 + c]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((0..9).all(|i| (0.0..=1.0).contains(&taps[i * 4 + c])));
        }
    }

    #[test]
    fn single_token_softmax_returns_v_row() {
        let inp = AttentionInputs::new(1, 4, seeded_vec(4, 5), seeded_vec(4, 6), seeded_vec(4, 7))
            .unwrap();
        let out = attention_forward(&inp, true);
        for (o, v) in out.iter().zip(&inp.v) {
            assert!((o - v).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_query_is_uniform_attention() {
        let n = 5;
        let d = 3;
        let inp =
            AttentionInputs::new(n, d, vec![0.0; n * d], seeded_vec(n * d, 8), seeded_vec(n * d, 9))
                .unwrap();
        let out = attention_forward(&inp, true);
        for i in 0..n {
            for t in 0..d {
                let mean: f32 = (0..n).map(|j| inp.v[j * d + t]).sum::<f32>() / n as f32;
                assert!((out[i * d + t] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_golden_n6_d4() {
        // frozen against tools/oracle/gen_fixtures.py
        let inp = AttentionInputs::new(
            6,
            4,
            seeded_vec(24, 21),
            seeded_vec(24, 22),
            seeded_vec(24, 23),
        )
        .unwrap();
        let out = attention_forward(&inp, true);
        let expected = [
            0.521645427,
            0.140012726,
            -0.33146739,
            0.150660709,
            0.404228479,
            0.144893438,
            -0.485117525,
            -0.164035082,
            0.518282294,
            0.147300646,
            -0.365558654,
            0.0694558397,
            0.560260832,
            0.160598546,
            -0.282893836,
            0.193400025,
            0.534837663,
            0.147426829,
            -0.361578763,
            0.0936207995,
            0.517280579,
            0.186655805,
            -0.326567292,
            0.129308417,
        ];
        for (i, (got, want)) in out.iter().zip(expected).enumerate() {
            assert!((got - want).abs() < 1e-5, "[{i}] {got} vs {want}");
        }
    }

    #[test]
    fn degeneration_small_without_softmax() {
        for seed in 0..20u64 {
            let n = 4 + (seed as usize % 32);
            let d = 2 + (seed as usize % 16);
            let inp = AttentionInputs::new(
                n,
                d,
                seeded_vec(n * d, 3 * seed + 1),
                seeded_vec(n * d, 3 * seed + 2),
                seeded_vec(n * d, 3 * seed + 3),
            )
            .unwrap();
            let direct = attention_forward(&inp, false);
            let mag = direct.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(degeneration_check(&inp) <= 1e-5 * (1.0 + mag));
        }
    }

    #[test]
    fn identity_queries_probe_the_linear_map() {
        // Q = I (d = N): output rows are the rows of M = KᵀV/√d
        let d = 4;
        let mut q = vec![0.0f32; d * d];
        for i in 0..d {
            q[i * d + i] = 1.0;
        }
        let inp = AttentionInputs::new(d, d, q, seeded_vec(d * d, 30), seeded_vec(d * d, 31))
            .unwrap();
        let out = attention_forward(&inp, false);
        let scale = inp.scale();
        for a in 0..d {
            for b in 0..d {
                let m: f32 = (0..d).map(|j| inp.k[j * d + a] * inp.v[j * d + b]).sum::<f32>()
                    * scale;
                assert!((out[a * d + b] - m).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_breaks_the_reordering() {
        let n = 8;
        let d = 4;
        let inp = AttentionInputs::new(
            n,
            d,
            seeded_vec(n * d, 40),
            seeded_vec(n * d, 41),
            seeded_vec(n * d, 42),
        )
        .unwrap();
        assert!(softmax_reorder_gap(&inp) > 0.1);
    }
}
