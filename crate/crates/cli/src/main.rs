use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand};
use duet_cli::config::{PipelineConfig, PriorSource, SceneFile, SweepConfig};
use duet_cli::pipeline;
use duet_core::synth::SceneConfig;

#[derive(Parser)]
#[command(name = "duet", version, about = "Dense two-body RGB-D odometry and mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process an RGB-D sequence: estimate camera and object trajectories,
    /// per-frame membership score images, and fused point models.
    Run {
        /// Dataset directory containing associations.txt.
        #[arg(long)]
        input: PathBuf,
        /// Directory to write run artifacts into.
        #[arg(long)]
        output: PathBuf,
        /// Pipeline configuration file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Clustering seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Two prior twist files (camera then object), or the single word
        /// `none` to run on the constant-velocity fallback.
        #[arg(long, num_args = 1..=2)]
        priors: Option<Vec<String>>,
        /// Skip frame-to-model refinement; fusion still runs.
        #[arg(long)]
        no_map: bool,
    },
    /// Render a synthetic two-body scene into a dataset directory.
    Synth {
        /// Directory to write the dataset into.
        #[arg(long)]
        output: PathBuf,
        /// Scene description file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate, run, and evaluate a series of scenes along one axis.
    Sweep {
        /// Sweep description file (axis, values, scene, pipeline keys).
        #[arg(long)]
        config: PathBuf,
        /// Directory to write per-point results and the summary table into.
        #[arg(long)]
        output: PathBuf,
        /// Seed override, applied to both scene noise and clustering.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a finished run directory against dataset ground truth.
    Evaluate {
        /// Dataset directory with groundtruth_*.txt files.
        #[arg(long)]
        input: PathBuf,
        /// Run directory with est_*.txt files; reports are written here.
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { input, output, config, seed, priors, no_map } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::from_file(&path)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.solver.cluster_seed = seed;
            }
            if let Some(priors) = priors {
                match priors.as_slice() {
                    [word] if word == "none" => {
                        cfg.priors_camera = PriorSource::None;
                        cfg.priors_object = PriorSource::None;
                    }
                    [camera, object] => {
                        cfg.priors_camera = PriorSource::File(camera.into());
                        cfg.priors_object = PriorSource::File(object.into());
                    }
                    _ => bail!("--priors takes two files (camera, object) or the word `none`"),
                }
            }
            if no_map {
                cfg.frame_to_model = false;
            }
            let summary = pipeline::run_sequence(&input, &output, &cfg)?;
            println!(
                "{} frame pairs ({} gated static, {} low support); static model {} points, dynamic model {} points",
                summary.pairs,
                summary.gated_pairs,
                summary.low_support_pairs,
                summary.static_points,
                summary.dynamic_points,
            );
            println!("artifacts in {}", output.display());
            Ok(())
        }
        Command::Synth { output, config, seed } => {
            let mut file = match config {
                Some(path) => SceneFile::from_file(&path)?,
                None => SceneFile { scene: SceneConfig::default_scene(), depth_scale: 5000.0 },
            };
            if let Some(seed) = seed {
                file.scene.seed = seed;
            }
            pipeline::synth_dataset(&file.scene, file.depth_scale, &output)?;
            println!("wrote {} frames to {}", file.scene.frames, output.display());
            Ok(())
        }
        Command::Sweep { config, output, seed } => {
            let mut cfg = SweepConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.scene.seed = seed;
                cfg.pipeline.solver.cluster_seed = seed;
            }
            let table = pipeline::sweep(&cfg, &output)?;
            print!("{}", std::fs::read_to_string(&table)?);
            Ok(())
        }
        Command::Evaluate { input, output } => {
            let report = pipeline::evaluate(&input, &output)?;
            print!("{}", report.report_text());
            Ok(())
        }
    }
}
