use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dcn_bench::seeded_case;
use dcn_core::optimized::{dcn_forward_opt, KernelPlan, StageTag};
use dcn_core::{dcn_forward_ref, Shape};

fn kernel_ladder(c: &mut Criterion) {
    let shape = Shape::new(4, 28, 28, 128).unwrap();
    let case = seeded_case(shape, 4, 3, 0xBE);

    let mut group = c.benchmark_group("dcn_4x28x28x128_g4");
    group.sample_size(10);

    group.bench_function("reference", |b| {
        b.iter(|| {
            black_box(
                dcn_forward_ref(&case.x, &case.off, &case.w, &case.cfg).unwrap(),
            )
        })
    });

    for stage in StageTag::LADDER {
        let plan = KernelPlan::for_stage(stage);
        let x = case.x.cast(plan.dtype);
        group.bench_function(stage.name(), |b| {
            b.iter(|| {
                black_box(
                    dcn_forward_opt(&x, &case.off, &case.w, &case.cfg, &plan).unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_ladder);
criterion_main!(benches);
