use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybrid_vo::alignment::{
    align_predictor_trajectory, associate, ate_rmse, AlignMode, TrajectoryEntry, TrajectorySegment,
};
use hybrid_vo::pipeline::{run_config, PipelineConfig, RunOptions};
use hybrid_vo::simulator::generate_trajectory;
use hybrid_vo::tum::{read_tum, write_tum};

#[derive(Parser)]
#[command(
    name = "hybrid-vo",
    version,
    about = "Hybrid sparse visual odometry on synthetic scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, run the pipeline and write trajectories and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        output: PathBuf,
        /// Overrides the simulated predictor latency in seconds.
        #[arg(long)]
        latency: Option<f64>,
        /// Single execution context and no wall-clock timings in the report.
        #[arg(long)]
        deterministic: bool,
    },
    /// Sim(3)-align a predictor trajectory onto a VO trajectory.
    Align {
        vo: PathBuf,
        pred: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
        /// Largest timestamp difference when pairing poses.
        #[arg(long, default_value_t = 0.01)]
        max_gap: f64,
    },
    /// Absolute trajectory error of an estimate against ground truth.
    Evaluate {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// 7dof, 6dof or none.
        #[arg(long, default_value = "7dof")]
        mode: AlignMode,
        #[arg(long, default_value_t = 0.01)]
        max_gap: f64,
    },
    /// Write the ground-truth trajectory of a scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
}

/// A failure with its exit code: 2 for bad input, 3 for lost tracking, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

fn input_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn internal_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut config = PipelineConfig::load(path).map_err(input_error)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| input_error(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| internal_error(format!("{}: {e}", path.display())))
}

fn run(
    config: &Path,
    seed: Option<u64>,
    output: &Path,
    latency: Option<f64>,
    deterministic: bool,
) -> Result<(), Failure> {
    let mut config = load_config(config, seed)?;
    if let Some(l) = latency {
        config.predictor.latency = l;
        config.validate().map_err(input_error)?;
    }
    create_dir(output)?;
    let out = run_config(&config, RunOptions { deterministic }).map_err(internal_error)?;
    if let Some(t) = out.highfreq_trajectory() {
        write_tum(output.join("trajectory_highfreq.tum"), &t).map_err(internal_error)?;
    }
    if let Some(t) = out.optimized_trajectory() {
        write_tum(output.join("trajectory_optimized.tum"), &t).map_err(internal_error)?;
    }
    write_file(&output.join("metrics.txt"), &out.metrics.to_key_value())?;
    let json = serde_json::to_string_pretty(&out.metrics).map_err(internal_error)?;
    write_file(&output.join("metrics.json"), &(json + "\n"))?;
    print!("{}", out.metrics.to_key_value());
    match out.error {
        Some(e) => Err(Failure {
            code: 3,
            message: e.to_string(),
        }),
        None => Ok(()),
    }
}

/// Pairs poses by timestamp and gives both sides matching ids.
fn paired(
    vo: &TrajectorySegment,
    pred: &TrajectorySegment,
    max_gap: f64,
) -> Result<(TrajectorySegment, TrajectorySegment), Failure> {
    let vo_entries = vo.entries();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in pred.entries() {
        let nearest = vo_entries.iter().min_by(|x, y| {
            (x.timestamp - p.timestamp)
                .abs()
                .total_cmp(&(y.timestamp - p.timestamp).abs())
        });
        if let Some(v) = nearest.filter(|v| (v.timestamp - p.timestamp).abs() <= max_gap) {
            let id = a.len() as u64;
            a.push(TrajectoryEntry { id, ..*v });
            b.push(TrajectoryEntry { id, ..*p });
        }
    }
    let a = TrajectorySegment::new(a).map_err(input_error)?;
    let b = TrajectorySegment::new(b).map_err(input_error)?;
    Ok((a, b))
}

fn align(vo: &Path, pred: &Path, gamma: f64, max_gap: f64) -> Result<(), Failure> {
    let vo = read_tum(vo).map_err(input_error)?;
    let pred = read_tum(pred).map_err(input_error)?;
    let (vo, pred) = paired(&vo, &pred, max_gap)?;
    let r = align_predictor_trajectory(&vo, &pred, gamma).map_err(internal_error)?;
    let aligned = pred.transformed(&hybrid_vo::geometry::SimilarityTransform {
        scale: r.fused_scale,
        ..r.transform
    });
    let ate = ate_rmse(&aligned, &vo, AlignMode::None, max_gap).map_err(internal_error)?;
    let t = r.transform.translation;
    println!("pairs={}", vo.len());
    println!("gamma={gamma}");
    println!("s={}", r.transform.scale);
    println!("s_f={}", r.fused_scale);
    println!("rotation_deg={}", r.transform.rotation.angle().to_degrees());
    println!("translation={},{},{}", t.x, t.y, t.z);
    println!("rms={}", r.rms);
    println!("ate_m={ate}");
    Ok(())
}

fn evaluate(
    estimate: &Path,
    ground_truth: &Path,
    mode: AlignMode,
    max_gap: f64,
) -> Result<(), Failure> {
    let est = read_tum(estimate).map_err(input_error)?;
    let gt = read_tum(ground_truth).map_err(input_error)?;
    let pairs = associate(&est, &gt, max_gap).0.len();
    let ate = ate_rmse(&est, &gt, mode, max_gap).map_err(internal_error)?;
    let mode = match mode {
        AlignMode::Sim3 => "7dof",
        AlignMode::Se3 => "6dof",
        AlignMode::None => "none",
    };
    println!("{:<10} {:>8} {:>14}", "alignment", "pairs", "ate_rmse_m");
    println!("{mode:<10} {pairs:>8} {ate:>14.9}");
    Ok(())
}

fn simulate(config: &Path, seed: Option<u64>, output: &Path) -> Result<(), Failure> {
    let config = load_config(config, seed)?;
    create_dir(output)?;
    let gt = generate_trajectory(&config.trajectory, config.seed).map_err(internal_error)?;
    let path = output.join("ground_truth.tum");
    write_tum(&path, &gt).map_err(internal_error)?;
    println!("wrote {} poses to {}", gt.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            output,
            latency,
            deterministic,
        } => run(config, *seed, output, *latency, *deterministic),
        Command::Align {
            vo,
            pred,
            gamma,
            max_gap,
        } => align(vo, pred, *gamma, *max_gap),
        Command::Evaluate {
            estimate,
            ground_truth,
            mode,
            max_gap,
        } => evaluate(estimate, ground_truth, *mode, *max_gap),
        Command::Simulate {
            config,
            seed,
            output,
        } => simulate(config, *seed, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
