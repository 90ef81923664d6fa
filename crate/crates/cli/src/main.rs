use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gpeoe::eval::{monte_carlo, MonteCarloConfig, MonteCarloReport};
use gpeoe::io;
use gpeoe::pipeline::{
    self, cluster_stage, contour_file, fit_stage, map_stage, model_file, prediction_file, slam_stage,
    synth_stage, FitOutputs, Mode, PipelineConfig,
};
use gpeoe::shapes::ShapeSpec;
use gpeoe::{Error, ErrorClass, SceneConfig, Vec2};

#[derive(Parser)]
#[command(name = "gpeoe", version, about = "Extended object contours from bistatic path measurements")]
struct Cli {
    /// Seed for scene synthesis, RANSAC and Monte Carlo runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize measurements from a scene.
    Synth(SceneArgs),
    /// Incidence points with the receiver state known.
    Map(EstimateArgs),
    /// Incidence points and receiver state from the measurements alone.
    Slam(EstimateArgs),
    /// Cluster incidence points and write per-cluster training sets.
    Cluster(ClusterArgs),
    /// Fit a GP contour to a training set.
    Fit(FitArgs),
    /// Monte Carlo contour error versus measurement count.
    Eval(EvalArgs),
    /// Run every stage.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// Scene JSON (default: the config's scene).
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Measurement CSV.
    #[arg(long)]
    measurements: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct ClusterArgs {
    /// Incidence-point CSV.
    #[arg(long)]
    ips: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// JSON object of centroid offsets keyed by cluster id.
    #[arg(long)]
    biases: Option<PathBuf>,
    /// Leave out points above this cost; `inf` keeps every point.
    #[arg(long)]
    max_ip_cost: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV (theta_rad, r_m).
    #[arg(long)]
    training: PathBuf,
    #[arg(long)]
    prediction_points: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeChoice {
    Circle,
    Rectangle,
    Star,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value_t = ShapeChoice::All)]
    shape: ShapeChoice,
    /// Measurement counts, e.g. `16,32,64,128`.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Radial noise standard deviation, meters.
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Measurement CSV instead of synthesis.
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Incidence-point CSV; skips estimation.
    #[arg(long)]
    ips: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mapping,
    Slam,
}

/// Config file: the pipeline settings plus Monte Carlo settings and the
/// shapes `eval` uses.
#[derive(Default)]
struct FileConfig {
    pipeline: PipelineConfig,
    monte_carlo: MonteCarloConfig,
    shapes: Option<Vec<ShapeSpec>>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct EvalSection {
    monte_carlo: MonteCarloConfig,
    shapes: Option<Vec<ShapeSpec>>,
}

impl FileConfig {
    // Split by hand: a flattened struct loses the integer keys of `biases`.
    fn from_value(mut v: serde_json::Value) -> serde_json::Result<Self> {
        let mut eval = serde_json::Map::new();
        if let Some(obj) = v.as_object_mut() {
            for key in ["monte_carlo", "shapes"] {
                if let Some(x) = obj.remove(key) {
                    eval.insert(key.into(), x);
                }
            }
        }
        let section: EvalSection = serde_json::from_value(eval.into())?;
        Ok(Self {
            pipeline: serde_json::from_value(v)?,
            monte_carlo: section.monte_carlo,
            shapes: section.shapes,
        })
    }
}

fn load_config(cli: &Cli) -> gpeoe::Result<FileConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let value: serde_json::Value = io::read_json(path)?;
            let mut cfg = FileConfig::from_value(value).map_err(|source| Error::Json {
                path: path.display().to_string(),
                source,
            })?;
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.pipeline.resolve_paths(base);
            cfg
        }
        None => FileConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.pipeline.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = Some(seed);
        cfg.monte_carlo.base_seed = seed;
    }
    Ok(cfg)
}

fn scene_from(args: &SceneArgs, cfg: &PipelineConfig) -> gpeoe::Result<SceneConfig> {
    let mut cfg = cfg.clone();
    if let Some(path) = &args.scene {
        cfg.scene = None;
        cfg.scene_file = Some(path.clone());
    }
    cfg.load_scene()?
        .ok_or_else(|| Error::Config("no scene: pass --scene or set one in --config".into()))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: &Cli) -> gpeoe::Result<()> {
    let file = load_config(cli)?;
    let cfg = &file.pipeline;
    let out = &cfg.output_dir;
    match &cli.command {
        Command::Synth(args) => {
            let scene = scene_from(args, cfg)?;
            let path = out.join(pipeline::MEASUREMENTS_FILE);
            let records = synth_stage(&scene, &path)?;
            log::info!("{} paths", records.len());
            report(&[path]);
        }
        Command::Map(args) => {
            cfg.mapping.validate()?;
            let scene = scene_from(&args.scene, cfg)?;
            let path = out.join(pipeline::IPS_FILE);
            map_stage(&args.measurements, &scene, &cfg.mapping, &path)?;
            report(&[path]);
        }
        Command::Slam(args) => {
            let scene = scene_from(&args.scene, cfg)?;
            let json = out.join(pipeline::SLAM_FILE);
            let ips = out.join(pipeline::IPS_FILE);
            let res = slam_stage(
                &args.measurements,
                &scene.tx,
                scene.noise.to_cov()?,
                &cfg.slam_config(),
                &json,
                &ips,
            )?;
            log::info!(
                "rx at ({:.3}, {:.3}), {} inliers, {} outliers",
                res.rx_estimate.position.x,
                res.rx_estimate.position.y,
                res.inlier_ids.len(),
                res.outlier_ids.len()
            );
            report(&[json, ips]);
        }
        Command::Cluster(args) => {
            let mut params = cfg.dbscan;
            params.eps = args.eps.unwrap_or(params.eps);
            params.min_pts = args.min_pts.unwrap_or(params.min_pts);
            let biases: BTreeMap<usize, Vec2> = match &args.biases {
                Some(p) => io::read_json(p)?,
                None => cfg.biases.clone(),
            };
            let gate = match args.max_ip_cost {
                Some(c) if c.is_infinite() => None,
                Some(c) => Some(c),
                None => cfg.max_ip_cost,
            };
            let (_, written) = cluster_stage(&args.ips, &params, &biases, gate, out)?;
            report(&written);
        }
        Command::Fit(args) => {
            cfg.gp_init.validate()?;
            cfg.optimizer.validate()?;
            let n = args.prediction_points.unwrap_or(cfg.prediction_points);
            if n < 1 {
                return Err(Error::Config("--prediction-points must be at least 1".into()));
            }
            let id = io::read_training(&args.training)?.cluster_id;
            let (model, prediction, contour) = (
                out.join(model_file(id)),
                out.join(prediction_file(id)),
                out.join(contour_file(id)),
            );
            let outs = FitOutputs {
                model: &model,
                prediction: &prediction,
                contour: &contour,
            };
            fit_stage(&args.training, &cfg.gp_init, &cfg.optimizer, n, &outs)?;
            report(&[model, prediction, contour]);
        }
        Command::Eval(args) => {
            let mut mc = file.monte_carlo.clone();
            if let Some(m) = &args.m {
                mc.m_values = m.clone();
            }
            mc.iterations = args.iterations.unwrap_or(mc.iterations);
            mc.noise_std = args.noise_std.unwrap_or(mc.noise_std);
            let defaults = vec![
                ShapeSpec::circle(1.0),
                ShapeSpec::rectangle(1.0, 0.5),
                ShapeSpec::default_star(),
            ];
            let shapes = file.shapes.clone().unwrap_or(defaults);
            let chosen: Vec<ShapeSpec> = shapes
                .into_iter()
                .filter(|s| match args.shape {
                    ShapeChoice::All => true,
                    ShapeChoice::Circle => s.name() == "circle",
                    ShapeChoice::Rectangle => s.name() == "rectangle",
                    ShapeChoice::Star => s.name() == "star",
                })
                .collect();
            if chosen.is_empty() {
                return Err(Error::Config("no shape of the requested kind in the config".into()));
            }
            let reports = chosen
                .iter()
                .map(|s| monte_carlo(s, &mc))
                .collect::<gpeoe::Result<Vec<MonteCarloReport>>>()?;
            let json = out.join("eval_report.json");
            let csv = out.join("eval_rmse.csv");
            io::write_json(&json, &reports)?;
            io::write_eval_table(&csv, &reports)?;
            report(&[json, csv]);
        }
        Command::Pipeline(args) => {
            let mut cfg = cfg.clone();
            if let Some(mode) = args.mode {
                cfg.mode = match mode {
                    ModeArg::Mapping => Mode::Mapping,
                    ModeArg::Slam => Mode::Slam,
                };
            }
            if let Some(p) = &args.scene {
                cfg.scene = None;
                cfg.scene_file = Some(p.clone());
            }
            if args.measurements.is_some() {
                cfg.measurements = args.measurements.clone();
            }
            if args.ips.is_some() {
                cfg.incidence_points = args.ips.clone();
            }
            let outcome = pipeline::run_pipeline(&cfg)?;
            if let Some(ev) = &outcome.evaluation {
                for c in &ev.clusters {
                    log::info!(
                        "cluster {} -> object {} ({}): rmse {:?}",
                        c.cluster_id,
                        c.object,
                        c.shape,
                        c.rmse
                    );
                }
            }
            report(&[cfg.output_dir.join(pipeline::MANIFEST_FILE)]);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
