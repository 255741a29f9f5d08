//! Command-line front end: scene synthesis, single-scene pipeline stages,
//! and the batch sweeps, with all artifacts written under one output
//! directory. Every command is seeded; rerunning with the same arguments
//! writes identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mapfuse_core::harness::report::{emit_report, ReportFormat, SweepReport};
use mapfuse_core::harness::{
    benchmark_scenes, ego_frame_of, run_availability, run_k_sweep, run_noise_robustness,
    run_pipeline_outputs, run_policy_comparison,
};
use mapfuse_core::io::{read_json, write_csv_lines, write_json, write_raster};
use mapfuse_core::uncertainty::rasterize_uncertainty;
use mapfuse_core::{
    evaluate, observe, BevGridSpec, EvalReport, ExperimentConfig, MapElement, NoiseModel,
    PipelineParams, Policy, Scene, ScenarioConfig,
};

#[derive(Parser, Debug)]
#[command(name = "mapfuse", version, about = "Multi-vehicle BEV map fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a batch of scenes and write them as JSON files.
    Generate(GenerateArgs),
    /// Observe one scene from one vehicle: semantic and uncertainty rasters.
    Observe(ObserveArgs),
    /// Run helper selection on one scene and write the selection trace.
    Select(SelectArgs),
    /// Run the full pipeline on one scene: select, fuse, decode, evaluate.
    Fuse(FuseArgs),
    /// Evaluate predicted elements against ground-truth elements.
    Eval(EvalArgs),
    /// Compare selection policies over the scene batch.
    ComparePolicies(BatchArgs),
    /// Sweep the helper budget K over the scene batch.
    SweepK(SweepKArgs),
    /// Evaluate pose-noise robustness over a rotation/translation grid.
    NoiseGrid(BatchArgs),
    /// Helper-availability statistics over the scene batch.
    Stats(StatsArgs),
    /// Re-render a sweep report JSON as an SVG chart.
    Plot(PlotArgs),
}

// ── Shared argument groups ──────────────────────────────────────────────────

/// Scenario knobs. Values start from the defaults (or from `--scenario` when
/// given) and individual flags override fields one by one.
#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Scenario file with `key = value` lines; unset keys keep defaults.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Lane dividers per scene.
    #[arg(long)]
    dividers: Option<usize>,
    /// Pedestrian crossings per scene.
    #[arg(long)]
    crossings: Option<usize>,
    /// Road boundaries per scene (at most 2).
    #[arg(long)]
    boundaries: Option<usize>,
    /// Minimum occluding walls per scene.
    #[arg(long)]
    occluders_min: Option<usize>,
    /// Maximum occluding walls per scene.
    #[arg(long)]
    occluders_max: Option<usize>,
    /// Vehicle trajectories per scene.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Trajectory sampling rate, Hz.
    #[arg(long)]
    frame_rate: Option<f64>,
    /// Trajectory duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Lane width, meters.
    #[arg(long)]
    lane_width: Option<f64>,
    /// Road length, meters.
    #[arg(long)]
    road_length: Option<f64>,
    /// Time gap between trajectory epochs, seconds.
    #[arg(long)]
    epoch_gap: Option<f64>,
    /// Minimum vehicle speed, m/s.
    #[arg(long)]
    speed_min: Option<f64>,
    /// Maximum vehicle speed, m/s.
    #[arg(long)]
    speed_max: Option<f64>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.scenario {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("read scenario file {}", path.display()))?;
                ScenarioConfig::from_text(&text)?
            }
            None => ScenarioConfig::default(),
        };
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        overlay!(
            dividers, crossings, boundaries, occluders_min, occluders_max, trajectories,
            frame_rate, duration, lane_width, road_length, epoch_gap, speed_min, speed_max
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Random,
    Closest,
    Greedy,
    Scorer,
    Oracle,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Random => Policy::Random,
            PolicyArg::Closest => Policy::Closest,
            PolicyArg::Greedy => Policy::Greedy,
            PolicyArg::Scorer => Policy::Scorer,
            PolicyArg::Oracle => Policy::Oracle,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Svg,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

/// Experiment knobs shared by the batch commands; fields mirror the
/// experiment configuration.
#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Scenes in the batch.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Selection policy.
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    policy: PolicyArg,
    /// Helper budget.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Trials averaged for the random policy.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Rotation noise standard deviations, radians, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.005, 0.01, 0.02, 0.05])]
    rot_stds: Vec<f64>,
    /// Translation noise standard deviations, meters, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.5, 1.0])]
    trans_stds: Vec<f64>,
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ExperimentArgs {
    fn to_config(&self, out: &Path) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig {
            scenario: self.scenario.resolve()?,
            scenes: self.scenes,
            policy: self.policy.into(),
            k: self.k,
            trials: self.trials,
            rot_stds: self.rot_stds.clone(),
            trans_stds: self.trans_stds.clone(),
            seed: self.seed,
            out_dir: Some(out.display().to_string()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Per-command arguments ───────────────────────────────────────────────────

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Scenes to synthesize.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ObserveArgs {
    /// Scene JSON file, as written by `generate`.
    #[arg(long)]
    scene: PathBuf,
    /// Observing vehicle id.
    #[arg(long, default_value_t = 0)]
    vehicle: u32,
    /// Frame index along the vehicle's trajectory; defaults to the middle.
    #[arg(long)]
    frame: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Scene JSON file, as written by `generate`.
    #[arg(long)]
    scene: PathBuf,
    /// Selection policy.
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    policy: PolicyArg,
    /// Helper budget.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Scene JSON file, as written by `generate`.
    #[arg(long)]
    scene: PathBuf,
    /// Selection policy.
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    policy: PolicyArg,
    /// Helper budget.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Rotation noise standard deviation, radians.
    #[arg(long, default_value_t = 0.0)]
    rot_std: f64,
    /// Translation noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    trans_std: f64,
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted elements JSON, as written by `fuse`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth elements JSON, in the same frame as the predictions.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BatchArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Report formats to write.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FormatArg::Json, FormatArg::Csv, FormatArg::Svg])]
    formats: Vec<FormatArg>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepKArgs {
    #[command(flatten)]
    batch: BatchArgs,
    /// Helper budgets to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4, 5])]
    k_list: Vec<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Scenes in the batch.
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Sweep report JSON, as written by the batch commands.
    #[arg(long)]
    report: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

// ── Command bodies ──────────────────────────────────────────────────────────

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("create output directory {}", dir.display()))
}

fn load_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_json(path)?;
    Ok(scene)
}

/// Frame index to observe from: the given one, or the trajectory middle.
fn resolve_frame(scene: &Scene, vehicle: u32, frame: Option<usize>) -> Result<usize> {
    let traj = scene
        .trajectory(vehicle)
        .ok_or_else(|| anyhow!("scene has no trajectory for vehicle {vehicle}"))?;
    let n = traj.frames.len();
    let idx = frame.unwrap_or(n / 2);
    if idx >= n {
        return Err(anyhow!("frame {idx} out of range; trajectory has {n} frames"));
    }
    Ok(idx)
}

fn write_eval_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    write_csv_lines(
        &out.join("report.csv"),
        EvalReport::csv_header(),
        &[report.csv_row()],
    )?;
    Ok(())
}

fn print_rows(report: &SweepReport) {
    for row in &report.rows {
        println!(
            "  {:<28} mAP {:.4} +- {:.4}  ({} scenes)",
            row.label, row.mean_map, row.std_map, row.scenes
        );
    }
}

fn emit_and_list(
    report: &SweepReport,
    out: &Path,
    stem: &str,
    formats: &[FormatArg],
) -> Result<()> {
    let formats: Vec<ReportFormat> = formats.iter().map(|&f| f.into()).collect();
    let written = emit_report(report, out, stem, &formats)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cfg = args.scenario.resolve()?;
    ensure_out(&args.out)?;
    let scenes = benchmark_scenes(&cfg, args.scenes, args.seed)?;
    for (i, scene) in scenes.iter().enumerate() {
        write_json(&args.out.join(format!("scene_{i:04}.json")), scene)?;
    }
    fs::write(args.out.join("scenario.txt"), cfg.to_text())
        .with_context(|| "write scenario.txt")?;
    println!(
        "wrote {} scenes to {} (seed {})",
        scenes.len(),
        args.out.display(),
        args.seed
    );
    Ok(())
}

fn cmd_observe(args: ObserveArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let params = PipelineParams::default();
    let frame = resolve_frame(&scene, args.vehicle, args.frame)?;
    let pose = scene.trajectory(args.vehicle).unwrap().frames[frame];
    let obs = observe(&scene, args.vehicle, &pose, &params.sensor, &params.spec)?;
    let umap = rasterize_uncertainty(
        &obs.uncertainty_points(),
        &params.spec,
        params.neighborhood_radius,
    )?;
    ensure_out(&args.out)?;
    write_raster(&args.out.join("semantic.bevr"), &obs.semantic)?;
    write_raster(&args.out.join("uncertainty.bevr"), &umap.to_raster())?;
    let rows: Vec<String> = obs
        .points
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                p.element_id, p.point_index, p.x, p.y, p.uncertainty
            )
        })
        .collect();
    write_csv_lines(
        &args.out.join("points.csv"),
        "element_id,point_index,x,y,uncertainty",
        &rows,
    )?;
    println!(
        "observed vehicle {} frame {frame}: {} points, rasters in {}",
        args.vehicle,
        obs.points.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let params = PipelineParams::default();
    let (ego_id, ego_frame) = ego_frame_of(&scene);
    let outputs = run_pipeline_outputs(
        &scene,
        ego_id,
        ego_frame,
        args.policy.into(),
        args.k,
        NoiseModel::NONE,
        &params,
        args.seed,
    )?;
    ensure_out(&args.out)?;
    write_json(&args.out.join("selection.json"), &outputs.trace)?;
    println!(
        "policy {} chose {:?} (fallback: {})",
        Policy::from(args.policy).as_str(),
        outputs.trace.chosen,
        outputs.trace.fallback
    );
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let params = PipelineParams::default();
    let (ego_id, ego_frame) = ego_frame_of(&scene);
    let noise = NoiseModel {
        rot_std: args.rot_std,
        trans_std: args.trans_std,
    };
    let outputs = run_pipeline_outputs(
        &scene,
        ego_id,
        ego_frame,
        args.policy.into(),
        args.k,
        noise,
        &params,
        args.seed,
    )?;
    ensure_out(&args.out)?;
    write_raster(&args.out.join("fused.bevr"), &outputs.fused)?;
    write_json(&args.out.join("elements.json"), &outputs.predictions)?;
    write_json(&args.out.join("ground_truth.json"), &outputs.ground_truth)?;
    write_json(&args.out.join("selection.json"), &outputs.trace)?;
    write_eval_report(&args.out, &outputs.report)?;
    println!(
        "fused {} helpers: mAP {:.4} ({} predictions, {} ground-truth elements)",
        outputs.trace.chosen.len(),
        outputs.report.map,
        outputs.predictions.len(),
        outputs.ground_truth.len()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let preds: Vec<MapElement> = read_json(&args.pred)?;
    let gts: Vec<MapElement> = read_json(&args.gt)?;
    let report = evaluate(&preds, &gts, &BevGridSpec::default_extent())?;
    ensure_out(&args.out)?;
    write_eval_report(&args.out, &report)?;
    println!("mAP {:.4} over {} predictions, {} ground-truth elements", report.map, preds.len(), gts.len());
    Ok(())
}

fn cmd_compare_policies(args: BatchArgs) -> Result<()> {
    let cfg = args.experiment.to_config(&args.out)?;
    ensure_out(&args.out)?;
    let params = PipelineParams::default();
    let report = run_policy_comparison(&cfg, &params)?;
    println!("policy comparison, {} scenes, K={}:", cfg.scenes, cfg.k);
    print_rows(&report);
    emit_and_list(&report, &args.out, "policy_comparison", &args.formats)
}

fn cmd_sweep_k(args: SweepKArgs) -> Result<()> {
    let cfg = args.batch.experiment.to_config(&args.batch.out)?;
    ensure_out(&args.batch.out)?;
    let params = PipelineParams::default();
    let report = run_k_sweep(&cfg, &params, &args.k_list)?;
    println!(
        "helper-budget sweep, {} scenes, policy {}:",
        cfg.scenes,
        cfg.policy.as_str()
    );
    print_rows(&report);
    emit_and_list(&report, &args.batch.out, "k_sweep", &args.batch.formats)
}

fn cmd_noise_grid(args: BatchArgs) -> Result<()> {
    let cfg = args.experiment.to_config(&args.out)?;
    ensure_out(&args.out)?;
    let params = PipelineParams::default();
    let report = run_noise_robustness(&cfg, &params, &cfg.rot_stds, &cfg.trans_stds)?;
    println!(
        "pose-noise grid, {} scenes, policy {}:",
        cfg.scenes,
        cfg.policy.as_str()
    );
    print_rows(&report);
    emit_and_list(&report, &args.out, "noise_robustness", &args.formats)
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        scenario: args.scenario.resolve()?,
        scenes: args.scenes,
        seed: args.seed,
        ..ExperimentConfig::default()
    };
    ensure_out(&args.out)?;
    let stats = run_availability(&cfg)?;
    write_json(&args.out.join("availability.json"), &stats)?;
    println!(
        "{} ego frames; {:.1}% have at least one qualifying helper",
        stats.frames_total,
        stats.fraction_with_helper * 100.0
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let report: SweepReport = read_json(&args.report)?;
    ensure_out(&args.out)?;
    let stem = args
        .report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    emit_and_list(&report, &args.out, stem, &[FormatArg::Svg])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Observe(args) => cmd_observe(args),
        Command::Select(args) => cmd_select(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ComparePolicies(args) => cmd_compare_policies(args),
        Command::SweepK(args) => cmd_sweep_k(args),
        Command::NoiseGrid(args) => cmd_noise_grid(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
