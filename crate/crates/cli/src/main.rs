use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ssc_cli::{
    cmd_ablate, cmd_eval, cmd_export_voxels, cmd_gen_scenes, cmd_grad_check, cmd_train, exit_code, VolumeSource,
};
use ssc_core::config::RunConfig;
use ssc_core::export::ExportFormat;
use ssc_core::{Error, Result};

/// Semantic scene completion on synthetic RGB-D scenes.
#[derive(Parser)]
#[command(name = "ssc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults to $SSC_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `--seed 3 --schedule.steps 100`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &pairs(&self.overrides)?)
    }
}

fn pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::contract(format!("expected --key, found {a:?}")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::contract(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Gt,
    Prediction,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    SurfaceMesh,
    PointList,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and an index.
    GenScenes {
        #[arg(long, default_value_t = 40)]
        count: usize,
        /// Output directory; defaults to paths.dataset.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every differentiable block.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Pre-train and train end to end, then write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate all five ablation configurations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a scene's labeled volume as a mesh or point list.
    ExportVoxels {
        #[arg(long)]
        scene: String,
        #[arg(long, value_enum, default_value_t = Source::Gt)]
        source: Source,
        #[arg(long, value_enum, default_value_t = Format::SurfaceMesh)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenScenes { count, out: dir, cfg } => {
            let c = cfg.load()?;
            let dir = dir.unwrap_or(c.paths.dataset.clone());
            cmd_gen_scenes(&c.scene, count, c.seed, &dir, &mut out)?;
        }
        Command::GradCheck { seed, inject_fault } => {
            return cmd_grad_check(seed, inject_fault.as_deref(), &mut out);
        }
        Command::Train { cfg } => {
            cmd_train(&cfg.load()?, &mut out)?;
        }
        Command::Eval { cfg } => {
            cmd_eval(&cfg.load()?, &mut out)?;
        }
        Command::Ablate { cfg } => {
            cmd_ablate(&cfg.load()?, &mut out)?;
        }
        Command::ExportVoxels {
            scene,
            source,
            format,
            out: path,
            cfg,
        } => {
            let source = match source {
                Source::Gt => VolumeSource::GroundTruth,
                Source::Prediction => VolumeSource::Prediction,
            };
            let format = match format {
                Format::SurfaceMesh => ExportFormat::SurfaceMesh,
                Format::PointList => ExportFormat::PointList,
            };
            cmd_export_voxels(&cfg.load()?, &scene, source, format, &path, &mut out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
