use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskris::cli::{
    self, Command, EvalArgs, GenArgs, PreviewArgs, SweepArgs, SweepParam, TrainArgs, DEFAULT_SWEEP_SEEDS,
};
use maskris::masking::MaskStrategy;
use maskris::metrics::DEFAULT_OCCLUSION_FRACTION;
use maskris::trainer::TrainMode;
use maskris::{Error, Result};

#[derive(Parser)]
#[command(name = "maskris", version, about = "Masking augmentation and dual-path distillation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Scene config file (`key = value`).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model in one of the three modes.
    Train {
        #[arg(long, default_value = "maskris")]
        mode: String,
        #[command(flatten)]
        common: TrainOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, optionally with the robustness report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        robustness: bool,
        /// Seed for corruption and occlusion streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_OCCLUSION_FRACTION)]
        occlusion_fraction: f64,
    },
    /// Train once per value and seed; report mean and sd.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "maskris")]
        mode: String,
        #[command(flatten)]
        common: TrainOpts,
        #[arg(long)]
        out: PathBuf,
        /// Run trainings concurrently; results equal the sequential run.
        #[arg(long)]
        parallel: bool,
    },
    /// Write original, mask and masked-image PGM previews for one sample.
    MaskPreview {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "image-from-data", default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "patch")]
        strategy: String,
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the command recorded in a run manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Write outputs here instead of the recorded locations.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainOpts {
    /// Train config file (`key = value`, TrainConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainOpts {
    fn load(&self, mode: &str) -> Result<maskris::trainer::TrainConfig> {
        let mut cfg = cli::load_train_config(self.config.as_deref(), mode.parse::<TrainMode>()?)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

fn run(cmd: Cmd, argv: &[String]) -> Result<cli::Outcome> {
    let command = match cmd {
        Cmd::Gen { seed, count, out, config } => Command::Gen(GenArgs {
            seed,
            count,
            scene: cli::load_scene_config(config.as_deref())?,
            out,
        }),
        Cmd::Train { mode, common, out } => Command::Train(TrainArgs {
            config: common.load(&mode)?,
            data: common.data,
            out,
        }),
        Cmd::Eval {
            ckpt,
            data,
            out,
            split,
            robustness,
            seed,
            occlusion_fraction,
        } => Command::Eval(EvalArgs {
            ckpt,
            data,
            out,
            split: cli::parse_split(&split)?,
            robustness,
            seed,
            occlusion_fraction,
        }),
        Cmd::Sweep {
            param,
            values,
            seeds,
            mode,
            common,
            out,
            parallel,
        } => Command::Sweep(SweepArgs {
            param: param.parse::<SweepParam>()?,
            values: cli::parse_list(&values)?,
            seeds: match seeds {
                Some(s) => cli::parse_list(&s)?,
                None => DEFAULT_SWEEP_SEEDS.to_vec(),
            },
            base: common.load(&mode)?,
            data: common.data,
            out,
            parallel,
        }),
        Cmd::MaskPreview {
            data,
            index,
            strategy,
            ratio,
            patch,
            seed,
            out,
        } => Command::MaskPreview(PreviewArgs {
            data,
            index,
            strategy: strategy.parse::<MaskStrategy>()?,
            ratio,
            patch,
            seed,
            out,
        }),
        Cmd::Replay { manifest, out } => return cli::replay(&manifest, out.as_deref(), argv),
    };
    cli::execute(&command, argv)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let parsed = Cli::parse();
    match run(parsed.cmd, &argv) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(cli::EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::TrainingDiverged { .. } = e {
                eprintln!("hint: lower lr_base or check the input data");
            }
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
