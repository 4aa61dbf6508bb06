//! Analytic roofline model for the deformable-convolution kernel.
//!
//! FLOPs are counted as 4K per output element (four multiply-adds of the
//! bilinear interpolation at each of the K sampling points): 4K·HWC, the
//! familiar 36HWC at K=9. Memory access cost is counted in tensor elements:
//!
//!   ideal (infinite cache): 2HWC input/output + 3K·HWG offsets and weights
//!   worst (no cache):       (4K + 3K + 1)·HWC per-location fresh reads
//!                           plus the output write, 64HWC at K=9
//!
//! Arithmetic intensity is FLOPs / MAC; for K=9 and G=C/16 the ratio spans
//! roughly 0.6 to 9.7, which is what makes the kernel memory bound.

use crate::error::{DcnError, Result};
use crate::tensor::ElementType;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RooflineReport {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub groups: usize,
    pub k_points: usize,
    /// 4K·HWC total operations.
    pub flops: u64,
    /// Elements moved assuming infinite cache: 2HWC + 3K·HWG.
    pub mac_ideal_elems: u64,
    /// Elements moved assuming no cache: (7K + 1)·HWC.
    pub mac_worst_elems: u64,
    pub intensity_ideal: f32,
    pub intensity_worst: f32,
}

impl RooflineReport {
    /// MAC in bytes for a storage dtype (secondary, element counts are the
    /// primary figures).
    pub fn mac_ideal_bytes(&self, dtype: ElementType) -> u64 {
        self.mac_ideal_elems * dtype.bytes_per_element() as u64
    }

    pub fn mac_worst_bytes(&self, dtype: ElementType) -> u64 {
        self.mac_worst_elems * dtype.bytes_per_element() as u64
    }
}

pub fn roofline(h: usize, w: usize, c: usize, groups: usize, k_points: usize) -> Result<RooflineReport> {
    if c == 0 || groups == 0 || c % groups != 0 {
        return Err(DcnError::Config(format!(
            "channels ({c}) must be a positive multiple of groups ({groups})"
        )));
    }
    if k_points == 0 {
        return Err(DcnError::Config("K must be >= 1".into()));
    }
    let (h64, w64, c64, g64, k64) = (h as u64, w as u64, c as u64, groups as u64, k_points as u64);
    let hw = h64 * w64;
    let flops = 4 * k64 * hw * c64;
    let mac_ideal_elems = 2 * hw * c64 + 3 * k64 * hw * g64;
    let mac_worst_elems = (4 * k64 + 3 * k64 + 1) * hw * c64;
    Ok(RooflineReport {
        h,
        w,
        c,
        groups,
        k_points,
        flops,
        mac_ideal_elems,
        mac_worst_elems,
        intensity_ideal: flops as f32 / mac_ideal_elems as f32,
        intensity_worst: flops as f32 / mac_worst_elems as f32,
    })
}

/// Aligned text table of reports, one row per (H,W,C,G,K) shape.
pub fn intensity_table(shapes: &[(usize, usize, usize, usize, usize)]) -> Result<String> {
    let mut out = String::new();
    if shapes.is_empty() {
        return Ok(out);
    }
    out.push_str(&format!(
        "{:>6} {:>6} {:>6} {:>4} {:>3} {:>14} {:>14} {:>14} {:>10} {:>10}\n",
        "H", "W", "C", "G", "K", "flops", "mac_ideal", "mac_worst", "ai_ideal", "ai_worst"
    ));
    for &(h, w, c, g, k) in shapes {
        let r = roofline(h, w, c, g, k)?;
        out.push_str(&format!(
            "{:>6} {:>6} {:>6} {:>4} {:>3} {:>14} {:>14} {:>14} {:>10.4} {:>10.4}\n",
            h, w, c, g, k, r.flops, r.mac_ideal_elems, r.mac_worst_elems, r.intensity_ideal,
            r.intensity_worst
        ));
    }
    Ok(out)
}

pub fn intensity_table_csv(shapes: &[(usize, usize, usize, usize, usize)]) -> Result<String> {
    let mut out = String::from("h,w,c,groups,k,flops,mac_ideal_elems,mac_worst_elems,intensity_ideal,intensity_worst\n");
    for &(h, w, c, g, k) in shapes {
        let r = roofline(h, w, c, g, k)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}\n",
            h, w, c, g, k, r.flops, r.mac_ideal_elems, r.mac_worst_elems, r.intensity_ideal,
            r.intensity_worst
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k9_coefficients() {
        // at K=9 the closed forms collapse to 36HWC, 2HWC+27HWG, 64HWC
        let r = roofline(10, 10, 32, 2, 9).unwrap();
        let hwc = 10 * 10 * 32u64;
        let hwg = 10 * 10 * 2u64;
        assert_eq!(r.flops, 36 * hwc);
        assert_eq!(r.mac_ideal_elems, 2 * hwc + 27 * hwg);
        assert_eq!(r.mac_worst_elems, 64 * hwc);
    }

    #[test]
    fn reference_shape_exact_values() {
        let r = roofline(56, 56, 128, 8, 9).unwrap();
        assert_eq!(r.flops, 14_450_688);
        assert_eq!(r.mac_ideal_elems, 1_480_192);
        assert_eq!(r.mac_worst_elems, 25_690_112);
        assert_eq!((r.intensity_worst * 10.0).round() / 10.0, 0.6);
        assert_eq!((r.intensity_ideal * 10.0).round() / 10.0, 9.8); // 9.7627…
        assert!((r.intensity_worst - 0.5625).abs() < 1e-6);
    }

    #[test]
    fn group_dim_16_gives_3_6875_hwc() {
        // G = C/16 → mac_ideal = (2 + 27/16)·HWC = 3.6875·HWC
        let r = roofline(14, 14, 256, 256 / 16, 9).unwrap();
        let hwc = (14 * 14 * 256) as f64;
        assert!((r.mac_ideal_elems as f64 / hwc - 3.6875).abs() < 1e-12);
    }

    #[test]
    fn memory_bound_regime() {
        let r = roofline(56, 56, 128, 8, 9).unwrap();
        assert!(r.intensity_worst < 1.0);
        assert!(r.intensity_ideal > 1.0);
        assert!(r.mac_ideal_elems <= r.mac_worst_elems);
    }

    #[test]
    fn table_rows() {
        assert_eq!(intensity_table(&[]).unwrap(), "");
        let one = intensity_table(&[(56, 56, 128, 8, 9)]).unwrap();
        assert_eq!(one.lines().count(), 2);
        assert!(one.contains("14450688"));
        let five = intensity_table(&[
            (56, 56, 128, 4, 9),
            (28, 28, 256, 8, 9),
            (14, 14, 512, 16, 9),
            (7, 7, 1024, 32, 9),
            (14, 14, 768, 24, 9),
        ])
        .unwrap();
        assert_eq!(five.lines().count(), 6);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(roofline(8, 8, 30, 4, 9).is_err());
        assert!(roofline(8, 8, 32, 4, 0).is_err());
    }

    #[test]
    fn mac_bytes_scale_with_dtype() {
        let r = roofline(8, 8, 32, 2, 9).unwrap();
        assert_eq!(r.mac_ideal_bytes(ElementType::F32), r.mac_ideal_elems * 4);
        assert_eq!(r.mac_worst_bytes(ElementType::F16), r.mac_worst_elems * 2);
    }
}
