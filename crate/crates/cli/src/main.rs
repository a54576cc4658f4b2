use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use scenefuse_core::experiment::{BranchKind, EvalMode, Experiment, ExperimentConfig, Split};
use scenefuse_core::{Error, ErrorKind};

/// Acoustic scene classification experiments: log-mel CNN, hand-crafted
/// feature GBM and their late fusion.
#[derive(Parser, Debug)]
#[command(name = "scenefuse", version)]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set gbm.num_rounds=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker thread cap; 1 gives bit-identical reruns.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus and its manifests.
    GenSynthetic,
    /// Compute and cache per-recording inputs.
    Extract { what: ExtractKind },
    /// Fit a branch on the full development set.
    Train { branch: BranchArg },
    /// Cross-validated hyperparameter search.
    GridSearch { branch: GridBranch },
    /// Write recording probabilities: out-of-fold on dev, trained model on eval.
    Predict {
        branch: BranchArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
    },
    /// Fuse the CNN and GBM probability files.
    Fuse {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
    },
    /// Cross-validation or train-dev/predict-eval with metrics.
    Evaluate { mode: ModeArg, branch: BranchArg },
    /// Summarize metric files and confusion differences.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExtractKind {
    Mel,
    Features,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BranchArg {
    Cnn,
    Gbm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GridBranch {
    Gbm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Dev,
    Eval,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Cv,
    Eval,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Arithmetic,
    Geometric,
    Rank,
    Stacking,
}

impl From<BranchArg> for BranchKind {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Cnn => BranchKind::Cnn,
            BranchArg::Gbm => BranchKind::Gbm,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Dev => Split::Dev,
            SplitArg::Eval => Split::Eval,
        }
    }
}

fn name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

impl Command {
    fn label(&self, cfg: &ExperimentConfig) -> String {
        match self {
            Command::GenSynthetic => "gen-synthetic".into(),
            Command::Extract { what } => format!("extract {}", name(*what)),
            Command::Train { branch } => format!("train {}", name(*branch)),
            Command::GridSearch { branch } => format!("grid-search {}", name(*branch)),
            Command::Predict { branch, split } => format!("predict {} {}", name(*branch), name(*split)),
            Command::Fuse { split, .. } => format!("fuse {} {}", cfg.fusion.method.name(), name(*split)),
            Command::Evaluate { mode, branch } => format!("evaluate {} {}", name(*mode), name(*branch)),
            Command::Report => "report".into(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut overrides = cli.overrides.clone();
    if let Command::Fuse { method: Some(m), .. } = &cli.command {
        overrides.push(format!("fusion.method={}", name(*m)));
    }
    match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::with_overrides("", &overrides),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let exp = Experiment::new(load_config(cli)?)?;
    let outputs = match &cli.command {
        Command::GenSynthetic => exp.gen_synthetic()?,
        Command::Extract { what } => match what {
            ExtractKind::Mel => exp.extract_mel()?,
            ExtractKind::Features => exp.extract_features()?,
        },
        Command::Train { branch } => exp.train((*branch).into())?,
        Command::GridSearch { .. } => exp.grid_search()?,
        Command::Predict { branch, split } => exp.predict((*branch).into(), (*split).into())?,
        Command::Fuse { split, .. } => exp.fuse(exp.config.fusion.method, (*split).into())?,
        Command::Evaluate { mode, branch } => {
            let mode = match mode {
                ModeArg::Cv => EvalMode::Cv,
                ModeArg::Eval => EvalMode::Eval,
            };
            exp.evaluate((*branch).into(), mode)?
        }
        Command::Report => {
            let (text, files) = exp.report()?;
            print!("{text}");
            files
        }
    };
    let manifest = exp.write_run_manifest(&cli.command.label(&exp.config), cli.threads, &outputs)?;
    if !matches!(cli.command, Command::Report) {
        for p in outputs.iter().filter(|p| !p.starts_with(exp.synthetic_dir().join("audio"))) {
            println!("{}", p.display());
        }
    }
    log::info!("run manifest: {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
