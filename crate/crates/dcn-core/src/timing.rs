//! Monotonic-clock timing protocol shared by the bench CLI and the ladder
//! ablation: warmup runs discarded, then the median/p10/p90 of the timed
//! reps. Median resists OS jitter better than the mean on a shared box.

use std::time::Instant;

use crate::optimized::StageTag;
use crate::tensor::{ElementType, Shape};

#[derive(Debug, Clone, Copy)]
pub struct TimingStats {
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

pub fn measure<F: FnMut()>(warmup: usize, reps: usize, mut f: F) -> TimingStats {
    assert!(reps >= 1);
    for _ in 0..warmup {
        f();
    }
    let mut samples_us: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    samples_us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| samples_us[((samples_us.len() - 1) as f64 * q).round() as usize];
    TimingStats {
        median_us: at(0.5),
        p10_us: at(0.1),
        p90_us: at(0.9),
    }
}

/// One benchmark cell: (operator, shape, dtype) plus timing statistics and
/// an output checksum guarding against fast-but-wrong regressions.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub op: String,
    pub shape: Shape,
    pub groups: usize,
    pub dtype: ElementType,
    pub stage: Option<StageTag>,
    pub reps: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
    pub checksum: f32,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str =
        "op,n,h,w,c,groups,dtype,stage,reps,median_us,p10_us,p90_us,checksum";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.6e}",
            self.op,
            self.shape.n,
            self.shape.h,
            self.shape.w,
            self.shape.c,
            self.groups,
            self.dtype,
            self.stage.map(|s| s.name()).unwrap_or("-"),
            self.reps,
            self.median_us,
            self.p10_us,
            self.p90_us,
            self.checksum
        )
    }

    /// p90 more than 10× the median marks an unstable measurement.
    pub fn timing_anomaly(&self) -> bool {
        self.p90_us > 10.0 * self.median_us
    }
}
