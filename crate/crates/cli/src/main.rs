use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mvo::config::{Mode, RunConfig};
use mvo::estimation::{jacobian_check, Flavor};
use mvo::eval::{evaluate_run, write_plot_data, write_reports};
use mvo::output::{read_labeling, read_trajectories, write_all};
use mvo::scene::{generate, presets, SceneScript, SceneTruth};
use mvo::sliding::{run_full_batch, run_sliding};
use mvo::tracklet::{InputFormat, TrackletSet};
use mvo::StereoCalib;

const TRACKLETS: &str = "tracklets.csv";
const CALIB: &str = "calib.json";
const SCENE: &str = "scene.json";
const TRUTH_TRACKS: &str = "truth_tracks.csv";
const TRUTH_POSES: &str = "truth_poses.csv";
const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "mvo", version, about = "Multimotion stereo visual odometry")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into tracklets and ground truth.
    Gen(GenArgs),
    /// Segment and estimate every motion in a tracklet file.
    Run(RunArgs),
    /// Score a run against ground truth.
    Eval(EvalArgs),
    /// Compare every analytic Jacobian with finite differences.
    JacobianCheck(JacobianArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Swinging,
    Occlusion,
}

#[derive(Args)]
struct GenArgs {
    /// Scene script (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Pixel noise of a preset.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Overrides the seed of the scene.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    FullBatch,
    #[value(alias = "sliding-window")]
    Sliding,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliFlavor {
    PoseOnly,
    #[value(alias = "pose-velocity")]
    Wnoa,
    #[value(alias = "pose-velocity-acceleration")]
    Wnoj,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliFormat {
    Pixel,
    Xyz,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    #[arg(long, value_enum)]
    estimator: Option<CliFlavor>,
    #[arg(long)]
    tracklets: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Column meaning of the tracklet file.
    #[arg(long, value_enum)]
    format: Option<CliFormat>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory written by `mvo gen`; adds error reports to the outputs.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Skip the per-window files.
    #[arg(long)]
    no_window_output: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `mvo run`.
    #[arg(long)]
    run: PathBuf,
    /// Directory written by `mvo gen`.
    #[arg(long)]
    truth: PathBuf,
    /// Where the reports go (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct JacobianArgs {
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Camera used for the projection checks.
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    inputs: BTreeMap<String, String>,
    config_sha256: String,
    seed: u64,
    mode: Mode,
    flavor: Flavor,
    egomotion_label: Option<i64>,
    windows: usize,
    closures: usize,
    warnings: Vec<String>,
    files: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_calib(path: &Path) -> Result<StereoCalib> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let calib: StereoCalib = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    calib.validate()?;
    Ok(calib)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen(args: &GenArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let mut script = match (&args.scene, args.preset) {
        (Some(path), _) => SceneScript::read(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(Preset::Swinging)) => presets::swinging(60, args.frames, args.sigma, seed),
        (None, Some(Preset::Occlusion)) => {
            let start = (args.frames / 3).max(1);
            let hidden = 15.min(args.frames.saturating_sub(start + 1)).max(1);
            presets::occlusion(args.frames, start, hidden, args.sigma, seed)
        }
        (None, None) => bail!("either --scene or --preset is required"),
    };
    if let Some(s) = args.seed {
        script.seed = s;
    }
    let (set, truth) = generate(&script)?;
    fs::create_dir_all(&args.out)?;
    set.write_csv(create(&args.out.join(TRACKLETS))?)?;
    truth.write_track_bodies(create(&args.out.join(TRUTH_TRACKS))?)?;
    truth.write_poses(create(&args.out.join(TRUTH_POSES))?)?;
    write_json(&args.out.join(CALIB), &script.calib)?;
    write_json(&args.out.join(SCENE), &script)?;
    println!(
        "{} tracklets over {} frames written to {}",
        set.len(),
        script.frames,
        args.out.display()
    );
    Ok(())
}

fn read_truth(dir: &Path) -> Result<SceneTruth> {
    let dt = SceneScript::read(&dir.join(SCENE)).map(|s| s.dt).unwrap_or(0.1);
    SceneTruth::read(&dir.join(TRUTH_TRACKS), &dir.join(TRUTH_POSES), dt)
        .with_context(|| format!("reading truth from {}", dir.display()))
}

/// Writes the error report and plot data; returns their file names.
fn score(run_dir: &Path, truth_dir: &Path, out: &Path, ego: Option<i64>) -> Result<Vec<String>> {
    let truth = read_truth(truth_dir)?;
    let trajectories = read_trajectories(fs::File::open(run_dir.join("trajectories.csv"))?)?;
    let labeling = read_labeling(fs::File::open(run_dir.join("segmentation.csv"))?)?;
    let results = evaluate_run(&trajectories, &labeling, ego, &truth)?;
    let reports: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    let series: Vec<_> = results.iter().map(|(r, s)| (r.label, s.clone())).collect();
    fs::create_dir_all(out)?;
    write_reports(&reports, create(&out.join("error_report.csv"))?)?;
    write_plot_data(&series, create(&out.join("error_plot.csv"))?)?;
    println!("label body frames  max GE [m]  max GE [deg]  RMSRE [m]  RMSRE [deg]  path [m]");
    for r in &reports {
        println!(
            "{:>5} {:>4} {:>6}  {:>10.3e}  {:>12.3e}  {:>9.3e}  {:>11.3e}  {:>8.3}",
            r.label, r.body, r.frames, r.ge_translation, r.ge_angle, r.rmsre_xyz, r.rmsre_angle, r.path.length
        );
    }
    Ok(vec!["error_report.csv".into(), "error_plot.csv".into()])
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = match m {
            CliMode::FullBatch => Mode::FullBatch,
            CliMode::Sliding => Mode::SlidingWindow,
        };
    }
    if let Some(f) = args.estimator {
        cfg.estimator.flavor = match f {
            CliFlavor::PoseOnly => Flavor::PoseOnly,
            CliFlavor::Wnoa => Flavor::Wnoa,
            CliFlavor::Wnoj => Flavor::Wnoj,
        };
    }
    if let Some(f) = args.format {
        cfg.input_format = match f {
            CliFormat::Pixel => InputFormat::Pixel,
            CliFormat::Xyz => InputFormat::Xyz,
        };
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = &args.tracklets {
        cfg.paths.tracklets = p.clone();
    }
    if let Some(p) = &args.calib {
        cfg.paths.calib = p.clone();
    }
    if let Some(p) = &args.out {
        cfg.paths.output = p.clone();
    }
    if args.no_window_output {
        cfg.per_window_output = false;
    }
    if cfg.paths.output.as_os_str().is_empty() {
        cfg.paths.output = PathBuf::from("mvo-out");
    }
    cfg.validate()?;
    cfg.check_inputs()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let calib = read_calib(&cfg.paths.calib)?;
    let set = TrackletSet::read_csv_path(&cfg.paths.tracklets, cfg.input_format, &calib)
        .with_context(|| format!("reading {}", cfg.paths.tracklets.display()))?;
    let pipeline = cfg.pipeline();
    let out = match cfg.mode {
        Mode::FullBatch => run_full_batch(&set, &calib, &pipeline)?,
        Mode::SlidingWindow => run_sliding(&set, &calib, &pipeline)?,
    };
    let dir = &cfg.paths.output;
    fs::create_dir_all(dir)?;
    let mut files: Vec<String> = write_all(&out, dir, cfg.per_window_output)?
        .into_iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let config_text = cfg.to_json()?;
    fs::write(dir.join("config.json"), &config_text)?;
    files.push("config.json".into());
    let ego = out.egomotion.map(i64::from);
    if let Some(truth) = &args.truth {
        files.extend(score(dir, truth, dir, ego)?);
    }

    let mut inputs = BTreeMap::new();
    for (name, p) in [("tracklets", &cfg.paths.tracklets), ("calib", &cfg.paths.calib)] {
        inputs.insert(name.to_string(), p.display().to_string());
        inputs.insert(format!("{name}_sha256"), sha256_hex(&fs::read(p)?));
    }
    let manifest = Manifest {
        inputs,
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        mode: cfg.mode,
        flavor: cfg.flavor(),
        egomotion_label: ego,
        windows: out.windows.len(),
        closures: out.closures.len(),
        warnings: out.warnings.clone(),
        files,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    println!(
        "{} motions, {} closures, {} warnings; results in {}",
        out.tracks.len(),
        out.closures.len(),
        out.warnings.len(),
        dir.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(args.run.join(MANIFEST)).with_context(|| format!("reading the manifest in {}", args.run.display()))?,
    )?;
    let out = args.out.as_deref().unwrap_or(&args.run);
    score(&args.run, &args.truth, out, manifest.egomotion_label)?;
    Ok(())
}

fn jacobians(args: &JacobianArgs) -> Result<bool> {
    let calib = match &args.calib {
        Some(p) => read_calib(p)?,
        None => presets::calib(),
    };
    let start = std::time::Instant::now();
    let reports = jacobian_check::run(args.samples, args.seed, &calib)?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(args.tolerance);
        ok &= pass;
        println!(
            "{:<20} {:>5} samples  max rel error {:.3e}  {}",
            r.name,
            r.samples,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("{:.2?}", start.elapsed());
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MVO_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::JacobianCheck(a) => jacobians(a).and_then(|ok| if ok { Ok(()) } else { bail!("Jacobian check failed") }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
