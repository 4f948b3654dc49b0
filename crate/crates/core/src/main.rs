use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use noisetune::datagen::{load_split, make_dataset, Manifest, Preset, Split};
use noisetune::graph::NoiseParams;
use noisetune::harness::{
    evaluate, run_experiment, run_sweep, write_report, write_report_file, ExperimentConfig, Method, Settings,
};
use noisetune::Result;

#[derive(Parser)]
#[command(name = "noisetune", version, about = "Learn factor-graph noise models with an incremental smoother in the loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a preset.
    Gen {
        /// Built-in preset name (d1, d2) or path to a preset TOML file.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        len_train: usize,
        #[arg(long, default_value_t = 5)]
        n_train_leo: usize,
        #[arg(long, default_value_t = 300)]
        len_train_leo: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
        #[arg(long, default_value_t = 300)]
        len_test: usize,
    },
    /// Train one method and evaluate it on the test split.
    Train {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        /// Settings TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fixed noise parameters on a split.
    Eval {
        /// JSON file with gps0, gps1, odom0, odom1, odom2.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train both methods for several training-set sizes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,30")]
        sizes: Vec<usize>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both methods and write a two-row comparison report.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    TrainLeo,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::TrainLeo => Split::TrainLeo,
            SplitArg::Test => Split::Test,
        }
    }
}

fn settings(path: Option<&Path>) -> Result<Settings> {
    path.map_or_else(|| Ok(Settings::default()), Settings::read)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            preset,
            out,
            seed,
            n_train,
            len_train,
            n_train_leo,
            len_train_leo,
            n_test,
            len_test,
        } => {
            let preset = Preset::load(&preset)?;
            let manifest = Manifest::new(
                &preset,
                seed,
                (n_train, len_train),
                (n_train_leo, len_train_leo),
                (n_test, len_test),
            );
            make_dataset(&manifest, &out)?;
            println!("wrote {} dataset to {}", preset.name, out.display());
        }
        Command::Train {
            method,
            data,
            config,
            out,
        } => {
            let mut settings = settings(config.as_deref())?;
            settings.method = method;
            let report = run_experiment(&ExperimentConfig {
                data_dir: data,
                out_dir: Some(out.clone()),
                settings,
            })?;
            for r in &report.results {
                println!("{}: theta {}", r.method.name(), r.theta);
            }
            write_report(&report.rows(), std::io::stdout())?;
        }
        Command::Eval {
            theta,
            data,
            split,
            config,
        } => {
            let settings = settings(config.as_deref())?;
            let theta = NoiseParams::read_file(&theta)?;
            let trajectories = load_split(&data, split.into(), None, None)?;
            let (t, r) = evaluate(&theta, &trajectories, &settings.smoother)?;
            println!("rmse_trans_m,rmse_rot_rad\n{t},{r}");
        }
        Command::Sweep {
            sizes,
            data,
            config,
            out,
        } => {
            let rows = run_sweep(
                &ExperimentConfig {
                    data_dir: data,
                    out_dir: Some(out),
                    settings: settings(config.as_deref())?,
                },
                &sizes,
            )?;
            write_report(&rows, std::io::stdout())?;
        }
        Command::Compare { data, config, out } => {
            let mut settings = settings(config.as_deref())?;
            settings.method = Method::Both;
            let report = run_experiment(&ExperimentConfig {
                data_dir: data,
                out_dir: None,
                settings,
            })?;
            write_report_file(&report.rows(), &out)?;
            write_report(&report.rows(), std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
