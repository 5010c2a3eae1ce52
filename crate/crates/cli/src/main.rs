use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occgrasp::geometry::Vec3;
use occgrasp::pipeline::{
    cmd_field, cmd_fuse, cmd_generate, cmd_rank, cmd_reconstruct, cmd_run, cmd_train,
    PipelineConfig, PipelineError, QuerySource, StageReport,
};

const EXIT_USAGE: u8 = 1;
const EXIT_STAGE: u8 = 2;

/// Occupancy-uncertainty grasp ranking pipeline.
#[derive(Debug, Parser)]
#[command(name = "occgrasp", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for scene generation, training and the stub scorer.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set svgp.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the configured synthetic scene into the input directory.
    Generate,
    /// Backproject all frames and remove outliers.
    Reconstruct,
    /// Build the occupancy field from the filtered cloud.
    Field,
    /// Train the occupancy regressor.
    Train,
    /// Fuse occupancy uncertainty at grasp contacts or at given points.
    Fuse(FuseArgs),
    /// Reweight grasp candidates by occupancy uncertainty.
    Rank,
    /// Run every stage, resuming from valid checkpoints.
    Run,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// CSV of `x,y,z` query points.
    #[arg(long, value_name = "PATH", conflicts_with = "grid")]
    queries: Option<PathBuf>,
    /// Query grid corners `minx,miny,minz,maxx,maxy,maxz`.
    #[arg(long, value_name = "BOX", value_parser = parse_box, allow_hyphen_values = true)]
    grid: Option<[f64; 6]>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 20, requires = "grid")]
    steps: usize,
}

fn parse_box(s: &str) -> Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let b: [f64; 6] = v
        .try_into()
        .map_err(|_| "expected six comma-separated numbers".to_string())?;
    if !b.iter().all(|x| x.is_finite()) || (0..3).any(|i| b[i] > b[i + 3]) {
        return Err("grid corners must be finite with min <= max".into());
    }
    Ok(b)
}

fn print_stage(r: &StageReport) {
    let metrics: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{:<12} {:<8} {:>8.2}s  {}",
        r.name,
        format!("{:?}", r.status).to_lowercase(),
        r.seconds,
        metrics.join(" ")
    );
}

fn execute(command: &Command, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    match command {
        Command::Generate => {
            let m = cmd_generate(cfg)?;
            println!(
                "generated {} frames ({}) in {}",
                m.frames.len(),
                m.regime,
                cfg.paths.input_dir.display()
            );
        }
        Command::Reconstruct => cmd_reconstruct(cfg)?.iter().for_each(print_stage),
        Command::Field => print_stage(&cmd_field(cfg)?),
        Command::Train => print_stage(&cmd_train(cfg)?),
        Command::Fuse(args) => {
            let source = match (&args.queries, &args.grid) {
                (Some(p), _) => QuerySource::File(p.clone()),
                (None, Some(b)) => QuerySource::Grid {
                    min: Vec3::new(b[0], b[1], b[2]),
                    max: Vec3::new(b[3], b[4], b[5]),
                    steps: args.steps,
                },
                (None, None) => QuerySource::Contacts,
            };
            print_stage(&cmd_fuse(cfg, &source)?);
        }
        Command::Rank => print_stage(&cmd_rank(cfg)?),
        Command::Run => {
            let report = cmd_run(cfg)?;
            report.stages.iter().for_each(print_stage);
            println!(
                "points {} -> {}, elbo {:.4e} -> {:.4e} over {} epochs",
                report.points_before_filter,
                report.points_after_filter,
                report.elbo_first,
                report.elbo_last,
                report.epochs
            );
            for g in &report.top_grasps {
                println!(
                    "#{:<3} pos [{:+.4}, {:+.4}, {:+.4}] raw {:.4} var {:.3e} weighted {:.4e}",
                    g.rank,
                    g.position[0],
                    g.position[1],
                    g.position[2],
                    g.raw_confidence,
                    g.occupancy_variance,
                    g.weighted_confidence
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match PipelineConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
