use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use voxelflow::checkpoint::{load_model, save_model};
use voxelflow::config::RunConfig;
use voxelflow::flops::compare_flops;
use voxelflow::pcio::{read_detections, read_kitti_labels, read_velodyne_bin, write_detections};
use voxelflow::pipeline::{dffm_sweep, evaluate_frames, infer, infer_timed, synthetic_suite, train_toy_with, voxelize_frame, InferOptions};
use voxelflow::selfcheck::{run_selfcheck, SelfcheckOptions};
use voxelflow::Error;
use voxelflow_core::model::Selection;
use voxelflow_core::scene::{gen_synthetic_scene, Calib, PointCloud};
use voxelflow_core::sparse::SparseDump;

#[derive(Parser)]
#[command(name = "voxelflow", version, about = "Sparse voxel detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelize a velodyne scan or a synthetic scene and dump the sparse tensor.
    Voxelize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Seed of a synthetic scene instead of a file.
        #[arg(long)]
        synthetic: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs of one large kernel against its decoupled 3x3x3 stack.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on synthetic scenes; writes a checkpoint and a report.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also train with 1..=4 fusion stages and evaluate each.
        #[arg(long)]
        dffm_sweep: bool,
    },
    /// Detect objects in velodyne scans or synthetic frames.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `.bin` scans, or `synthetic:N`.
        #[arg(long)]
        frames: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Serial execution with per-phase timing.
        #[arg(long)]
        timing: bool,
        #[arg(long, value_enum)]
        selection: Option<SelectionArg>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// AP of a directory of detection files against a directory of labels.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite.
    Selfcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Perturb a weight on the engine side to show that a failure surfaces.
        #[arg(long)]
        tamper: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Full,
    Importance,
    Random,
}

#[derive(Debug, Serialize)]
struct CliError {
    error: String,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            error: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<voxelflow_core::Error> for CliError {
    fn from(e: voxelflow_core::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> CliResult<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

#[derive(Serialize)]
struct VoxelizeOutput {
    /// `[x, y, z]` cell counts.
    grid_dims: [usize; 3],
    points: usize,
    voxels: usize,
    dropped_voxels: usize,
    dropped_points: usize,
    out_of_range: usize,
    tensor: SparseDump,
}

fn cmd_voxelize(config: &Path, input: Option<&Path>, synthetic: Option<u64>, out: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let pc = match (input, synthetic) {
        (Some(p), _) => read_velodyne_bin(p)?,
        (None, Some(seed)) => {
            let mut sc = cfg.scene.clone();
            sc.seed = seed;
            gen_synthetic_scene(&sc)?.0
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let vox = voxelize_frame(&pc, &cfg.voxel)?;
    emit(
        out,
        &VoxelizeOutput {
            grid_dims: cfg.voxel.grid_dims(),
            points: pc.len(),
            voxels: vox.tensor.len(),
            dropped_voxels: vox.dropped_voxels,
            dropped_points: vox.dropped_points,
            out_of_range: vox.out_of_range,
            tensor: vox.tensor.dump(),
        },
    )
}

fn cmd_train(config: &Path, seed: Option<u64>, out_dir: &Path, sweep: bool) -> CliResult<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    create_dir(out_dir)?;
    let scenes = synthetic_suite(&cfg.scene, cfg.train.scenes)?;
    let (model, report) = train_toy_with(&scenes, &cfg, |r| {
        if r.step % 25 == 0 {
            eprintln!("step {:>5}  total {:.5}", r.step, r.total);
        }
    })?;
    save_model(&model, out_dir.join("checkpoint.json"))?;
    write_json(&out_dir.join("train_report.json"), &report)?;
    eprintln!(
        "final/initial loss {:.4} in {:.1} s",
        report.final_over_initial,
        report.wall_ms / 1e3
    );
    if sweep {
        let entries = dffm_sweep(&scenes, &scenes, &cfg)?;
        write_json(&out_dir.join("dffm_sweep.json"), &entries)?;
    }
    Ok(())
}

fn load_frames(spec: &str, cfg: &RunConfig) -> CliResult<Vec<(String, PointCloud)>> {
    if let Some(n) = spec.strip_prefix("synthetic:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad frame count in '{spec}'")))?;
        let scenes = synthetic_suite(&cfg.scene, n)?;
        return Ok(scenes
            .into_iter()
            .enumerate()
            .map(|(i, (pc, _))| (format!("{i:06}"), pc))
            .collect());
    }
    let dir = Path::new(spec);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_velodyne_bin(&p)?))
        })
        .collect()
}

#[derive(Serialize)]
struct FrameDetections<'a> {
    frame: &'a str,
    detections: &'a [voxelflow_core::detector::Detection],
}

fn cmd_infer(
    config: &Path,
    checkpoint: &Path,
    frames: &str,
    out_dir: &Path,
    timing: bool,
    selection: Option<SelectionArg>,
    repeats: usize,
) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(checkpoint)?;
    let selection = match selection {
        None => model.default_selection(),
        Some(SelectionArg::Full) => Selection::Full,
        Some(SelectionArg::Importance) => Selection::Importance,
        Some(SelectionArg::Random) => Selection::RandomMask {
            fraction: model.cfg.fsm.keep_ratio,
            seed: cfg.train.seed,
        },
    };
    let frames = load_frames(frames, &cfg)?;
    let clouds: Vec<PointCloud> = frames.iter().map(|f| f.1.clone()).collect();
    create_dir(out_dir)?;
    let dets = if timing {
        let opts = InferOptions {
            repeats,
            ..InferOptions::new(selection)
        };
        let (dets, report) = infer_timed(&model, &clouds, &opts)?;
        write_json(&out_dir.join("timing.json"), &report)?;
        dets
    } else {
        infer(&model, &clouds, selection)?
    };
    let label_dir = out_dir.join("labels");
    create_dir(&label_dir)?;
    let calib = Calib::nominal();
    for ((id, _), d) in frames.iter().zip(&dets) {
        write_detections(label_dir.join(format!("{id}.txt")), d, &calib)?;
    }
    let all: Vec<FrameDetections<'_>> = frames
        .iter()
        .zip(&dets)
        .map(|((id, _), d)| FrameDetections { frame: id, detections: d })
        .collect();
    write_json(&out_dir.join("detections.json"), &all)?;
    let n: usize = dets.iter().map(Vec::len).sum();
    eprintln!("{} frames, {n} detections", frames.len());
    Ok(())
}

fn cmd_eval(dets_dir: &Path, gts_dir: &Path, config: &Path, out: Option<&Path>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let calib = Calib::nominal();
    let mut ids: Vec<PathBuf> = fs::read_dir(gts_dir)
        .map_err(|e| Error::io(gts_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    ids.sort();
    let mut gts = Vec::with_capacity(ids.len());
    let mut dets = Vec::with_capacity(ids.len());
    for p in &ids {
        gts.push(read_kitti_labels(p, &calib)?);
        let d = dets_dir.join(p.file_name().expect("file path"));
        dets.push(if d.exists() { read_detections(&d, &calib)? } else { Vec::new() });
    }
    let result = evaluate_frames(&dets, &gts, &cfg.eval);
    eprintln!("{}", result.table());
    emit(out, &result)
}

fn cmd_selfcheck(seed: u64, tamper: bool) -> CliResult<()> {
    let report = run_selfcheck(&SelfcheckOptions { seed, tamper });
    for c in &report.checks {
        println!(
            "{} {:<18} {:>9.1} ms  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.elapsed_ms,
            c.detail
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError {
            error: "SelfcheckFailed".into(),
            message: format!("failed checks: {}", failed.join(", ")),
        })
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("VOXELFLOW_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("VOXELFLOW_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.cmd {
        Cmd::Voxelize {
            config,
            input,
            synthetic,
            out,
        } => cmd_voxelize(&config, input.as_deref(), synthetic, out.as_deref()),
        Cmd::Flops { config, out } => {
            let cfg = RunConfig::load(&config)?;
            emit(out.as_deref(), &compare_flops(&cfg)?)
        }
        Cmd::TrainToy {
            config,
            seed,
            out_dir,
            dffm_sweep,
        } => cmd_train(&config, seed, &out_dir, dffm_sweep),
        Cmd::Infer {
            config,
            checkpoint,
            frames,
            out_dir,
            timing,
            selection,
            repeats,
        } => cmd_infer(&config, &checkpoint, &frames, &out_dir, timing, selection, repeats),
        Cmd::Eval { dets, gts, config, out } => cmd_eval(&dets, &gts, &config, out.as_deref()),
        Cmd::Selfcheck { seed, tamper } => cmd_selfcheck(seed, tamper),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}

