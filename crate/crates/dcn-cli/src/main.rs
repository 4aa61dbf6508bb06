//! `dcn`: benchmark runner, verification driver, roofline reporter and
//! fixture generator for the deformable-convolution kernels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use dcn_core::baselines::{attention_forward, AttentionInputs, DwKernel};
use dcn_core::module::{module_forward, ModuleConfig, ModuleParams, ModuleVariant};
use dcn_core::optimized::{KernelPlan, StageTag, CORRUPT_KERNEL};
use dcn_core::roofline::{intensity_table, intensity_table_csv};
use dcn_core::timing::{measure, BenchRecord};
use dcn_core::verify::run_verify;
use dcn_core::{
    dcn_forward_opt, dcn_forward_ref, DcnConfig, ElementType, FillSpec, OffsetField, SeededStream,
    Shape, TensorNHWC, WeightField,
};

#[derive(Parser)]
#[command(name = "dcn", version, about = "Deformable convolution kernel toolbox")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time operators over a shape grid and emit CSV
    Bench(BenchArgs),
    /// Run the randomized correctness suites
    Verify(VerifyArgs),
    /// Print the analytic arithmetic-intensity table
    Roofline(RooflineArgs),
    /// Regenerate the golden fixture files from seeds
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GridName {
    /// Five shapes at batch 64
    Standard,
    /// Five high-resolution shapes at batch 1
    Highres,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn elem(self) -> ElementType {
        match self {
            Dtype::F32 => ElementType::F32,
            Dtype::F16 => ElementType::F16,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated operators: dcn-ref, dcn-opt, dwconv, attention,
    /// module-v3, module-v4, module-v4-lightweight
    #[arg(long, value_delimiter = ',', required = true)]
    op: Vec<String>,
    /// Built-in shape grid (ignored when --shape is given)
    #[arg(long, value_enum, default_value = "standard")]
    grid: GridName,
    /// Single shape NxHxWxC instead of a grid
    #[arg(long)]
    shape: Option<String>,
    /// Channel groups; defaults to C/32 (32 channels per group)
    #[arg(long)]
    groups: Option<usize>,
    /// Kernel size
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
    /// Timed repetitions (>= 10)
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Discarded warmup runs (>= 3)
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Register-block width for dcn-opt
    #[arg(long)]
    dprime: Option<usize>,
    /// Pin dcn-opt to one ladder stage (baseline, +workload-elim,
    /// +coeff-reuse, +vector-lanes, +fp16); default is the fastest stage
    #[arg(long)]
    stage: Option<String>,
    /// Write CSV to this file instead of stdout
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Equivalence cases; the other suites use their fixed sizes
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    /// Test hook: corrupt the optimized kernel to prove the suite catches it
    #[arg(long, hide = true)]
    corrupt_kernel: bool,
}

#[derive(Args)]
struct RooflineArgs {
    /// Single shape HxWxC; defaults to the standard grid
    #[arg(long)]
    shape: Option<String>,
    /// Channel groups; defaults to C/32
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Emit CSV instead of the aligned table
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct FixturesArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing fixture files
    #[arg(long)]
    force: bool,
}

const STANDARD_GRID: [(usize, usize, usize, usize); 5] = [
    (64, 56, 56, 128),
    (64, 28, 28, 256),
    (64, 14, 14, 512),
    (64, 7, 7, 1024),
    (64, 14, 14, 768),
];

const HIGHRES_GRID: [(usize, usize, usize, usize); 5] = [
    (1, 200, 320, 128),
    (1, 100, 160, 256),
    (1, 50, 80, 512),
    (1, 25, 40, 1024),
    (1, 64, 64, 768),
];

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("DCN_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: DCN_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }

    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Verify(a) => return cmd_verify(a),
        Cmd::Roofline(a) => cmd_roofline(a),
        Cmd::Fixtures(a) => cmd_fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_dims(s: &str, want: usize) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()
        .with_context(|| format!("bad shape {s:?}"))?;
    if dims.len() != want || dims.iter().any(|&d| d == 0) {
        bail!("shape {s:?} must be {want} positive numbers separated by 'x'");
    }
    Ok(dims)
}

fn bench_shapes(args: &BenchArgs) -> Result<Vec<Shape>> {
    if let Some(s) = &args.shape {
        let d = parse_dims(s, 4)?;
        return Ok(vec![Shape::new(d[0], d[1], d[2], d[3])?]);
    }
    let grid = match args.grid {
        GridName::Standard => STANDARD_GRID,
        GridName::Highres => HIGHRES_GRID,
    };
    grid.iter()
        .map(|&(n, h, w, c)| Shape::new(n, h, w, c).map_err(anyhow::Error::from))
        .collect()
}

fn groups_for(c: usize, flag: Option<usize>) -> Result<usize> {
    let g = match flag {
        Some(g) => g,
        None => {
            if c % 32 != 0 {
                bail!("channels {c} not divisible by 32; pass --groups explicitly");
            }
            c / 32
        }
    };
    if g == 0 || c % g != 0 {
        bail!("groups {g} must divide channels {c}");
    }
    Ok(g)
}

fn seeded(shape: Shape, seed: u64) -> TensorNHWC {
    TensorNHWC::create(
        shape,
        ElementType::F32,
        FillSpec::SeededUniform { seed, lo: -1.0, hi: 1.0 },
    )
}

fn dcn_inputs(
    shape: Shape,
    cfg: &DcnConfig,
    seed: u64,
) -> (TensorNHWC, OffsetField, WeightField) {
    let kp = cfg.k_points();
    let x = seeded(shape, seed);
    let off = OffsetField::seeded_uniform(
        shape.n, shape.h, shape.w, cfg.groups, kp, seed + 1, -2.0, 2.0,
    );
    let w = WeightField::seeded_uniform(
        shape.n, shape.h, shape.w, cfg.groups, kp, seed + 2, -1.0, 1.0,
    );
    (x, off, w)
}

fn bench_one(op: &str, shape: Shape, args: &BenchArgs) -> Result<Option<BenchRecord>> {
    let g = groups_for(shape.c, args.groups)?;
    let seed = args.seed;
    let (warmup, reps) = (args.warmup, args.reps);
    let mut checksum = 0.0f32;
    let mut stage = None;
    let mut dtype = ElementType::F32;

    let stats = match op {
        "dcn-ref" => {
            let cfg = DcnConfig::new(args.kernel, g, shape.c, true)?;
            let (x, off, w) = dcn_inputs(shape, &cfg, seed);
            measure(warmup, reps, || {
                let y = dcn_forward_ref(&x, &off, &w, &cfg).expect("dcn-ref");
                checksum = y.checksum();
            })
        }
        "dcn-opt" => {
            let cfg = DcnConfig::new(args.kernel, g, shape.c, false)?;
            let mut plan = match &args.stage {
                Some(s) => KernelPlan::for_stage(StageTag::parse(s)?),
                None => KernelPlan::fastest(args.dtype.elem()),
            };
            if let Some(d) = args.dprime {
                plan = plan.with_d_prime(d);
            }
            plan.validate(&cfg)?;
            stage = Some(plan.stage);
            dtype = plan.dtype;
            let (x32, off, w) = dcn_inputs(shape, &cfg, seed);
            let x = x32.cast(plan.dtype);
            measure(warmup, reps, || {
                let y = dcn_forward_opt(&x, &off, &w, &cfg, &plan).expect("dcn-opt");
                checksum = y.checksum();
            })
        }
        "dwconv" => {
            let k = args.kernel;
            let mut rng = SeededStream::new(seed + 5);
            let taps = (0..k * k * shape.c)
                .map(|_| rng.next_uniform(-1.0, 1.0))
                .collect();
            let kern = DwKernel::new(k, shape.c, taps, true)?;
            let x = seeded(shape, seed);
            measure(warmup, reps, || {
                let y = dcn_core::baselines::dwconv_forward(&x, &kern).expect("dwconv");
                checksum = y.checksum();
            })
        }
        "attention" => {
            let tokens = shape.h * shape.w;
            if tokens > 4096 {
                eprintln!(
                    "skip: attention at {}x{}x{}x{} needs {tokens} tokens (> 4096 dense limit)",
                    shape.n, shape.h, shape.w, shape.c
                );
                return Ok(None);
            }
            let mut rng = SeededStream::new(seed + 6);
            let mut fill = |len: usize| -> Vec<f32> {
                (0..len).map(|_| rng.next_uniform(-1.0, 1.0)).collect()
            };
            let len = tokens * shape.c;
            let inp =
                AttentionInputs::new(tokens, shape.c, fill(len), fill(len), fill(len))?;
            measure(warmup, reps, || {
                let y = attention_forward(&inp, true);
                checksum = y.iter().sum();
            })
        }
        "module-v3" | "module-v4" | "module-v4-lightweight" => {
            let variant = ModuleVariant::parse(op.trim_start_matches("module-"))?;
            let cfg = ModuleConfig::new(variant, shape.c, g, args.kernel)?;
            let params = ModuleParams::seeded_dense(&cfg, seed + 7);
            let plan = KernelPlan::fastest(args.dtype.elem());
            let x = seeded(shape, seed);
            measure(warmup, reps, || {
                let y = module_forward(&x, &params, &cfg, &plan).expect(op);
                checksum = y.checksum();
            })
        }
        other => bail!("unknown operator {other:?}"),
    };

    Ok(Some(BenchRecord {
        op: op.to_string(),
        shape,
        groups: g,
        dtype,
        stage,
        reps,
        median_us: stats.median_us,
        p10_us: stats.p10_us,
        p90_us: stats.p90_us,
        checksum,
    }))
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.reps < 10 {
        bail!("--reps must be >= 10");
    }
    if args.warmup < 3 {
        bail!("--warmup must be >= 3");
    }
    // fail on an unknown op before spending time benchmarking
    for op in &args.op {
        let known = [
            "dcn-ref",
            "dcn-opt",
            "dwconv",
            "attention",
            "module-v3",
            "module-v4",
            "module-v4-lightweight",
        ];
        if !known.contains(&op.as_str()) {
            bail!("unknown operator {op:?}; choose from {known:?}");
        }
    }
    let shapes = bench_shapes(&args)?;

    let mut out = String::new();
    writeln!(out, "{}", BenchRecord::CSV_HEADER)?;
    for shape in &shapes {
        for op in &args.op {
            if let Some(rec) = bench_one(op, *shape, &args)? {
                if rec.timing_anomaly() {
                    eprintln!(
                        "warning: noisy timing for {op} at {}x{}x{}x{} (p90 {:.0} us > 10x median {:.0} us)",
                        shape.n, shape.h, shape.w, shape.c, rec.p90_us, rec.median_us
                    );
                }
                writeln!(out, "{}", rec.csv_row())?;
            }
        }
    }
    match &args.csv {
        Some(path) => std::fs::write(path, &out)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    if args.corrupt_kernel {
        CORRUPT_KERNEL.store(true, Ordering::SeqCst);
    }
    let report = run_verify(args.seed, args.cases);
    print!("{report}");
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        if let Some(first) = report.first_failure() {
            println!("first failure: {first}");
        }
        ExitCode::FAILURE
    }
}

fn cmd_roofline(args: RooflineArgs) -> Result<()> {
    let shapes: Vec<(usize, usize, usize, usize, usize)> = match &args.shape {
        Some(s) => {
            let d = parse_dims(s, 3)?;
            let g = groups_for(d[2], args.groups)?;
            vec![(d[0], d[1], d[2], g, args.kernel * args.kernel)]
        }
        None => STANDARD_GRID
            .iter()
            .map(|&(_, h, w, c)| {
                groups_for(c, args.groups).map(|g| (h, w, c, g, args.kernel * args.kernel))
            })
            .collect::<Result<_>>()?,
    };
    let table = if args.csv {
        intensity_table_csv(&shapes)?
    } else {
        intensity_table(&shapes)?
    };
    print!("{table}");
    Ok(())
}

/// The fixture set mirrors crates/dcn-core/tests/golden: same seeds, same
/// shapes, produced by the reference implementation.
fn cmd_fixtures(args: FixturesArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut files: Vec<(String, TensorNHWC)> = Vec::new();

    let core_cfg =
        |softmax| DcnConfig::new(3, 2, 16, softmax).expect("static fixture config");
    let x = seeded(Shape::new(1, 4, 4, 16)?, 7);
    let off = OffsetField::seeded_uniform(1, 4, 4, 2, 9, 8, -2.0, 2.0);
    let w = WeightField::seeded_uniform(1, 4, 4, 2, 9, 9, -1.0, 1.0);
    files.push((
        "dcn_ref_nosoftmax.dcnt".into(),
        dcn_forward_ref(&x, &off, &w, &core_cfg(false))?,
    ));
    files.push((
        "dcn_ref_softmax.dcnt".into(),
        dcn_forward_ref(&x, &off, &w, &core_cfg(true))?,
    ));

    let xb = seeded(Shape::new(1, 6, 6, 32)?, 11);
    for (variant, tag) in [(ModuleVariant::V3, "v3"), (ModuleVariant::V4, "v4")] {
        let cfg = ModuleConfig::new(variant, 32, 2, 3)?;
        let params = ModuleParams::seeded_dense(&cfg, 100);
        let (boff, bw) = dcn_core::module::branch_forward(&xb, &params, &cfg)?;
        files.push((
            format!("branch_{tag}_offsets.dcnt"),
            TensorNHWC::from_f32(Shape::new(1, 6, 6, 2 * 2 * 9)?, boff.data),
        ));
        files.push((
            format!("branch_{tag}_weights.dcnt"),
            TensorNHWC::from_f32(Shape::new(1, 6, 6, 2 * 9)?, bw.data),
        ));
    }

    let xm = seeded(Shape::new(1, 8, 8, 32)?, 13);
    let plan = KernelPlan::fastest(ElementType::F32);
    for (variant, tag) in [(ModuleVariant::V3, "v3"), (ModuleVariant::V4, "v4")] {
        let cfg = ModuleConfig::new(variant, 32, 2, 3)?;
        let params = ModuleParams::seeded_dense(&cfg, 200);
        files.push((
            format!("module_{tag}.dcnt"),
            module_forward(&xm, &params, &cfg, &plan)?,
        ));
    }

    if !args.force {
        for (name, _) in &files {
            let path = args.out.join(name);
            if path.exists() {
                bail!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                );
            }
        }
    }

    let mut manifest = String::new();
    for (name, tensor) in &files {
        let path = args.out.join(name);
        tensor.write_fixture(&path)?;
        writeln!(manifest, "{}  {name}", sha256_file(&path)?)?;
    }
    std::fs::write(args.out.join("manifest.sha256"), &manifest)?;
    println!("wrote {} fixtures to {}", files.len(), args.out.display());
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
