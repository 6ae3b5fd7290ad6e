use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowgnn::data::EmotionSynthConfig;
use flowgnn::model::Target;
use flowgnn_cli::commands::{self, SynthKind};
use flowgnn_cli::config::{Overrides, RunConfig};
use flowgnn_cli::{input, CliResult};

#[derive(Debug, Parser)]
#[command(name = "flowgnn", version, about = "Information-flow causal graphs and dual-branch graph classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// `channel,region` CSV replacing the bundled 32-channel map.
    #[arg(long, global = true)]
    regions: Option<PathBuf>,
    /// Significance level; 1.0 keeps every edge.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    surrogates: Option<usize>,
    /// Seed for surrogates, initialization, folds and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Arousal,
    Valence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Emotion,
    Var,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Causal graph of one recording (.bin, or .csv with --rate).
    Causal {
        input: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Features and causal graphs for every window of a dataset.
    Preprocess {
        /// Dataset manifest; defaults to paths.dataset.
        manifest: Option<PathBuf>,
    },
    /// Nested cross-validation on preprocessed samples.
    Train {
        /// samples.json; defaults to <out>/samples.json.
        samples: Option<PathBuf>,
        /// Print the parameter count and exit.
        #[arg(long)]
        report_params: bool,
        /// Run a single outer split instead of all folds.
        #[arg(long)]
        holdout: bool,
        /// 10 outer folds, 3 inner folds, 200 + 20 epochs.
        #[arg(long)]
        paper_protocol: bool,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
    },
    /// Score saved weights.
    Eval {
        samples: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
    },
    /// Top-k Liang-Kleeman graphs against Top-k Granger graphs.
    Compare {
        /// Dataset manifest; defaults to paths.dataset.
        manifest: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        granger_order: Option<usize>,
        #[arg(long)]
        paper_protocol: bool,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value = "emotion")]
        kind: KindArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        /// Class effect size; 0 gives indistinguishable classes.
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        /// Drive strength of the VAR pair.
        #[arg(long, default_value_t = 0.5)]
        coupling: f64,
        /// Samples of the VAR pair.
        #[arg(long, default_value_t = 50_000)]
        length: usize,
        /// Write the VAR pair as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Print the resolved run configuration.
    Config,
}

fn target(t: Option<TargetArg>) -> Option<Target> {
    t.map(|t| match t {
        TargetArg::Arousal => Target::Arousal,
        TargetArg::Valence => Target::Valence,
    })
}

fn resolve(common: &Common, extra: Overrides) -> CliResult<RunConfig> {
    let file = match &common.config {
        Some(p) => input(RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    let o = Overrides {
        alpha: common.alpha,
        surrogates: common.surrogates,
        seed: common.seed,
        region_map: common.regions.clone(),
        output_dir: common.out.clone(),
        ..extra
    };
    Ok(file.resolve(&o)?)
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match cli.command {
        Command::Causal { input, rate } => commands::causal(&resolve(c, Overrides::default())?, &input, rate),
        Command::Preprocess { manifest } => commands::preprocess(&resolve(c, Overrides::default())?, manifest),
        Command::Train {
            samples,
            report_params,
            holdout,
            paper_protocol,
            target: t,
        } => {
            let cfg = resolve(
                c,
                Overrides {
                    paper_protocol,
                    target: target(t),
                    ..Overrides::default()
                },
            )?;
            if report_params {
                println!("{}", commands::report_params(&cfg)?);
                return Ok(());
            }
            commands::train(&cfg, samples, holdout)
        }
        Command::Eval {
            samples,
            weights,
            target: t,
        } => {
            let cfg = resolve(
                c,
                Overrides {
                    target: target(t),
                    ..Overrides::default()
                },
            )?;
            commands::eval(&cfg, samples, &weights)
        }
        Command::Compare {
            manifest,
            topk,
            granger_order,
            paper_protocol,
            target: t,
        } => {
            let cfg = resolve(
                c,
                Overrides {
                    topk,
                    granger_order,
                    paper_protocol,
                    target: target(t),
                    ..Overrides::default()
                },
            )?;
            commands::compare(&cfg, manifest)
        }
        Command::Synth {
            kind,
            trials,
            seconds,
            separation,
            coupling,
            length,
            csv,
        } => {
            let seed = c.seed.unwrap_or(0);
            let kind = match kind {
                KindArg::Emotion => SynthKind::Emotion(EmotionSynthConfig {
                    n_trials: trials,
                    trial_seconds: seconds,
                    separation,
                    seed,
                    ..EmotionSynthConfig::default()
                }),
                KindArg::Var => SynthKind::Var {
                    coupling,
                    length,
                    seed,
                    csv,
                },
            };
            commands::synth(&kind, c.out.as_deref().unwrap_or("out".as_ref()))
        }
        Command::Config => {
            print!("{}", resolve(c, Overrides::default())?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.common.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
