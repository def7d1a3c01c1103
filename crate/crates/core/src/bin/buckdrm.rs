use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use buckdrm::config::{RunConfig, SurrogateConfig};
use buckdrm::dqn::{sha256_hex, Checkpoint};
use buckdrm::eval::{self, MetricSettings, MetricsRecord, PlantKind};
use buckdrm::plant::{Model, SurrogateParams};
use buckdrm::training::{self, save_curve};
use buckdrm::transfer::{collect_samples_parallel, fit_drm, write_samples_csv, DrmArtifact};
use buckdrm::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_SCENARIO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "buckdrm",
    version,
    about = "DQN buck-converter control with duty-ratio mapping transfer"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scenarios and sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Root for per-run output directories when neither --out nor out_dir is set.
    #[arg(long, global = true, env = "BUCKDRM_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller on the ideal plant.
    Train,
    /// Run the load-step suite with a trained controller.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ideal")]
        plant: PlantKind,
        /// Duty map artifact; enables the mapping.
        #[arg(long)]
        drm: Option<PathBuf>,
    },
    /// Sweep the surrogate at steady state and fit the duty map.
    DrmFit {
        /// Surrogate preset (default, ideal, none); overrides the config.
        #[arg(long)]
        surrogate: Option<String>,
        /// Checkpoint the map is fitted for; its hash is recorded.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recompute metrics and plots from stored traces.
    Report {
        /// Directory holding `traces/`; defaults to --out.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::DrmFit { .. } => "drm-fit",
            Command::Report { .. } => "report",
            Command::Config => "config",
        }
    }
}

enum Failure {
    Error(Error),
    Scenarios(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenarios(n)) => {
            eprintln!("error: {n} scenario(s) failed");
            ExitCode::from(EXIT_SCENARIO)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Invalid { .. } | Error::Checkpoint(_) => EXIT_VALIDATION,
                ref e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_FAILURE,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Command::DrmFit {
        surrogate: Some(preset),
        ..
    } = &cli.command
    {
        config.surrogate = SurrogateConfig::from_preset(preset);
    }
    config.validate()?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml_string());
        return Ok(());
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| {
            cli.out_root
                .join(format!("{}-seed{}", cli.command.label(), config.seed))
        });

    match &cli.command {
        Command::Train => cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            plant,
            drm,
        } => cmd_eval(&config, &out, checkpoint, *plant, drm.as_deref(), cli.jobs),
        Command::DrmFit { checkpoint, .. } => {
            cmd_drm_fit(&config, &out, checkpoint.as_deref(), cli.jobs)
        }
        Command::Report { dir } => cmd_report(&config, dir.as_deref().unwrap_or(&out)),
        Command::Config => unreachable!(),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<(), Failure> {
    create_dir(out)?;
    write_file(&out.join("config.toml"), config.to_toml_string().as_bytes())?;
    info!(
        "training {} episodes, seed {}, config {}",
        config.training.episodes,
        config.seed,
        &config.hash()[..12]
    );
    let outcome = training::train(config, |point, score| {
        if let Some(s) = score {
            info!(
                "episode {:>4}: return {:>10.1}  eval {:>10.1} ({} of {} scenarios completed)",
                point.episode,
                point.total_reward,
                s.total_return,
                s.completed,
                config.scenarios.step_powers.len()
            );
        }
    })?;
    outcome.best.save(&out.join("checkpoint.json"))?;
    outcome.last.save(&out.join("checkpoint_last.json"))?;
    save_curve(&outcome.curve, &out.join("training_curve.csv"))?;
    info!(
        "best evaluation at episode {} (return {:.1}); wrote {}",
        outcome.best_score.episode,
        outcome.best_score.total_return,
        out.join("checkpoint.json").display()
    );
    Ok(())
}

fn cmd_eval(
    config: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    plant: PlantKind,
    drm: Option<&Path>,
    jobs: usize,
) -> Result<(), Failure> {
    let net = Checkpoint::load(checkpoint)?.to_network()?;
    if net.output_dim() != config.actions.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} actions, the configured table {}",
            net.output_dim(),
            config.actions.len()
        ))
        .into());
    }
    let coeffs = match drm {
        Some(path) => {
            if !path.exists() {
                return Err(Error::invalid(
                    "--drm",
                    format!("file {} does not exist", path.display()),
                )
                .into());
            }
            Some(DrmArtifact::load(path)?.coefficients())
        }
        None => None,
    };
    let scenarios = eval::suite(config, plant, coeffs.is_some());
    let dir = out.join(format!(
        "eval-{plant}-drm_{}",
        if coeffs.is_some() { "on" } else { "off" }
    ));
    create_dir(&dir)?;
    let mut records = Vec::new();
    let mut failed = 0;
    for result in eval::run_many(&net, &scenarios, config, coeffs.as_ref(), jobs) {
        let run = result?;
        if let Some(reason) = &run.failure {
            warn!("{}: {reason}", run.scenario.name);
            failed += 1;
        }
        eval::write_artifacts(&dir, &run, config.plant.v_ref)?;
        records.extend(run.records());
    }
    eval::save_metrics(&records, &dir.join("metrics.json"))?;
    println!("{}", eval::summary_table(&records));
    info!("wrote {}", dir.display());
    if failed > 0 {
        return Err(Failure::Scenarios(failed));
    }
    Ok(())
}

fn cmd_drm_fit(
    config: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    jobs: usize,
) -> Result<(), Failure> {
    let created_from = match checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            Checkpoint::from_bytes(&bytes)?;
            Some(sha256_hex(&bytes))
        }
        None => None,
    };
    let mismatch = config.surrogate.resolve()?;
    let model = Model::Surrogate(SurrogateParams::new(config.plant, mismatch));
    let grid = config.sweep.resolved(&config.actions);
    info!(
        "sweeping {} duties x {} powers on surrogate `{}`",
        grid.duty_points.len(),
        grid.power_points.len(),
        config.surrogate.preset_id()
    );
    let sweep = collect_samples_parallel(&model, &grid, config.seed, jobs)?;
    if !sweep.skipped.is_empty() {
        warn!(
            "{} of {} grid points skipped",
            sweep.skipped.len(),
            sweep.skipped.len() + sweep.samples.len()
        );
    }
    let coeffs = fit_drm(&sweep.samples)?;
    create_dir(out)?;
    let artifact = DrmArtifact {
        a: coeffs.a,
        b: coeffs.b,
        c: coeffs.c,
        fit_residual_rms: coeffs.fit_residual_rms,
        n_samples: coeffs.n_samples,
        grid,
        surrogate_preset_id: config.surrogate.preset_id(),
        created_from,
        config_hash: config.hash(),
    };
    artifact.save(&out.join("drm.json"))?;
    let path = out.join("drm_samples.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(path, e))?;
    write_samples_csv(&sweep.samples, std::io::BufWriter::new(file))?;
    println!(
        "d_real = {:.6} d_sim + {:.6} i_o + {:.6}   (rms {:.2e}, {} samples)",
        coeffs.a, coeffs.b, coeffs.c, coeffs.fit_residual_rms, coeffs.n_samples
    );
    info!("wrote {}", out.join("drm.json").display());
    Ok(())
}

fn cmd_report(config: &RunConfig, dir: &Path) -> Result<(), Failure> {
    let traces = dir.join("traces");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&traces)
        .map_err(|e| Error::io(traces, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    // failure reasons are not part of a trace; keep them from an earlier report
    let previous = eval::load_metrics(&dir.join("metrics.json")).unwrap_or_default();
    let settings = MetricSettings::from_config(config);
    let plots = dir.join("plots");
    create_dir(&plots)?;
    let mut records = Vec::new();
    for file in &files {
        let name = file
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let trace = eval::load_trace(file)?;
        let metrics = eval::segment_metrics(&trace, &settings);
        let svg = eval::render_svg(&name, &trace, &metrics, config.plant.v_ref);
        write_file(&plots.join(format!("{name}.svg")), svg.as_bytes())?;
        let tag = eval::parse_scenario_name(&name);
        let old = previous.iter().find(|r| r.scenario == name);
        records.extend(metrics.into_iter().map(|m| MetricsRecord {
            scenario: name.clone(),
            plant: tag.map(|t| t.0),
            drm: tag.map(|t| t.1),
            seed: old.and_then(|r| r.seed),
            failure: old.and_then(|r| r.failure.clone()),
            metrics: m,
        }));
    }
    eval::save_metrics(&records, &dir.join("metrics.json"))?;
    println!("{}", eval::summary_table(&records));
    Ok(())
}
