use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mdrnet_core::backbone::BackboneConfig;
use mdrnet_core::bench::{run_bench, BenchConfig};
use mdrnet_core::gradcheck::{run_suite, Fault, SuiteConfig, SuiteSize};
use mdrnet_core::heatmap::Heatmap;
use mdrnet_core::ingest::{load_bin, voxelize_with_stats, write_tensor, VoxelizeConfig};
use mdrnet_core::reduce::{ReductionTag, ReductionWeights};
use mdrnet_core::trainlite::{self, SgdConfig, ToyModel};
use mdrnet_core::{configure_threads_from_env, Error, Result};

#[derive(Parser)]
#[command(name = "mdrnet", version, about = "Sparse voxel reduction operators and backbone tooling")]
struct Cli {
    /// Config file (TOML). voxelize: grid and range; train: optimizer and backbone.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin point cloud (x, y, z, intensity as f32) -> tensor file.
    Voxelize(VoxelizeArgs),
    /// Time all seven reduction operators after checking each against the dense oracle.
    Bench(BenchArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Reduction weights text file -> PGM image.
    Heatmap(HeatmapArgs),
    /// Overfit the toy heatmap task and write the loss curve.
    Train(TrainArgs),
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid extents as NxNyNz, e.g. 32x32x16.
    #[arg(long, default_value = "32x32x16", value_parser = parse_grid)]
    grid: [usize; 3],
    #[arg(long, default_value_t = 0.2)]
    sparsity: f64,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, hide = true, value_parser = parse_tag)]
    fault_operator: Option<ReductionTag>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny", value_parser = |s: &str| s.parse::<SuiteSize>())]
    size: SuiteSize,
    #[arg(long, hide = true)]
    flip_bias_gradient: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config file's learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Directory for the trained model.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Stage-1 reduction weights of the trained model on the first scene.
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    backbone: Option<BackboneConfig>,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad grid `{s}`: {e}"))?;
    dims.try_into().map_err(|_| format!("grid `{s}` must be NxNyNz"))
}

fn parse_tag(s: &str) -> std::result::Result<ReductionTag, String> {
    ReductionTag::ALL
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| format!("unknown operator `{s}`"))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn voxelize_cmd(cli: &Cli, a: &VoxelizeArgs) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => VoxelizeConfig::load(p)?,
        None => VoxelizeConfig::toy(),
    };
    let (cloud, rejected) = load_bin(&a.input)?;
    let (t, stats) = voxelize_with_stats(&cloud, &cfg)?;
    write_tensor(&a.out, &t)?;
    println!(
        "points {} (non-finite {rejected}, out of range {}, capped {}) -> {} voxels, extents {:?}",
        stats.input, stats.out_of_range, stats.capped, stats.voxels, cfg.geometry.extents
    );
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        extents: a.grid,
        sparsity: a.sparsity,
        channels: a.channels,
        reps: a.reps,
        seed: cli.seed,
        fault: a.fault_operator,
    };
    let report = run_bench(&cfg)?;
    report.write_csv(&a.out)?;
    for r in &report.rows {
        match (r.mean_ms, r.std_ms) {
            (Some(m), Some(s)) => println!("{:<24} {m:>10.3} ms +- {s:.3}  dev {:.1e}", r.operator, r.oracle_max_abs_dev),
            _ => println!("{:<24} {:>10}          dev {:.1e}  ORACLE FAIL", r.operator, "-", r.oracle_max_abs_dev),
        }
    }
    let failed = report.failed_operators();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("oracle deviation too large for: {}", failed.join(", "))))
    }
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let report = run_suite(&SuiteConfig {
        seed: cli.seed,
        size: a.size,
        fault: a.flip_bias_gradient.then_some(Fault::FlipBiasGradient),
    })?;
    print!("{report}");
    let failed: Vec<&str> = report.failures().iter().map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("gradient error over threshold for: {}", failed.join(", "))))
    }
}

fn heatmap_cmd(a: &HeatmapArgs) -> Result<()> {
    let w = ReductionWeights::from_text(&read_text(&a.weights)?)?;
    let h = Heatmap::from_weights(&w);
    h.write_pgm(&a.out)?;
    println!("{}x{} image, median {}", h.width(), h.height(), h.median());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Usage("--scenes must be >= 1".into()));
    }
    let file: TrainFile = match &cli.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainFile::default(),
    };
    let defaults = SgdConfig::default();
    let sgd = SgdConfig {
        learning_rate: a.lr.or(file.learning_rate).unwrap_or(defaults.learning_rate),
        momentum: file.momentum.unwrap_or(defaults.momentum),
        steps: a.steps,
        seed: cli.seed,
    };
    let bcfg = file.backbone.unwrap_or_else(trainlite::toy_backbone_config);
    let toy = VoxelizeConfig::toy();
    let vs = toy.geometry.voxel_size;
    let vcfg = VoxelizeConfig::new(
        vs,
        toy.range_min,
        std::array::from_fn(|d| toy.range_min[d] + bcfg.input_extents[d] as f64 * vs[d]),
        toy.max_points_per_voxel,
    )?;
    let tasks = trainlite::synth_tasks(a.scenes, cli.seed, &vcfg, &bcfg)?;
    let model = ToyModel::build(&bcfg, cli.seed)?;
    log::info!("training {} scenes for {} steps, {:?}", a.scenes, a.steps, sgd);
    let (trained, curve) = trainlite::train(&model, &tasks, &sgd)?;
    trainlite::write_curve_csv(&a.out, &curve)?;
    if let Some(dir) = &a.save {
        trained.save(dir)?;
    }
    if let Some(path) = &a.weights_out {
        let (_, trace) = trained.forward_trace(&tasks[0].input)?;
        let w = trace
            .stage1_weights
            .ok_or_else(|| Error::Usage("stage-1 reduction produces no per-voxel weights".into()))?;
        std::fs::write(path, w.to_text()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    println!("loss {first:.6e} -> {last:.6e} ({:.4} of initial)", last / first);
    if last < first {
        Ok(())
    } else {
        Err(Error::Check("final loss did not decrease".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = configure_threads_from_env() {
        log::info!("using {n} threads");
    }
    let res = match &cli.cmd {
        Command::Voxelize(a) => voxelize_cmd(&cli, a),
        Command::Bench(a) => bench_cmd(&cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(&cli, a),
        Command::Heatmap(a) => heatmap_cmd(a),
        Command::Train(a) => train_cmd(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
