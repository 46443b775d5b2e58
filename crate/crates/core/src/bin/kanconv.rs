use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kanconv::cli::{self, DataOptions, SearchOptions, TrainOptions};
use kanconv::data::DATA_DIR_ENV;
use kanconv::layers::GridUpdatePolicy;
use kanconv::training::{LossConfig, Metrics, TrainConfig};

#[derive(Parser)]
#[command(
    name = "kanconv",
    version,
    about = "Convolutional networks with learnable spline activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the train-/t10k- IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Stratified subset of the training file.
    #[arg(long)]
    subset: Option<usize>,
    /// Stratified subset of the test file.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn options(&self) -> DataOptions {
        DataOptions {
            subset: self.subset,
            test_subset: self.test_subset,
            seed: self.seed,
            ..DataOptions::new(&self.data_dir)
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the grid size of every learnable-activation layer.
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = GridUpdatePolicy::default())]
    policy: GridUpdatePolicy,
    /// Sparsity weight of the activation regularizer.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test set.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        wd: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate saved weights on the test set.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Random search over learning rate, weight decay and batch size.
    Gridsearch {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print exact and rule-of-thumb parameter counts.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Sample every learned activation of one layer to CSV.
    ExportSplines {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 401)]
        samples: usize,
    },
    /// Summarize every run record in a directory.
    Report {
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        /// Where to write the parameters-vs-accuracy CSV.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
}

fn print_metrics(m: &Metrics) {
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        m.accuracy, m.precision, m.recall, m.f1
    );
}

fn run(cli: Cli) -> kanconv::Result<()> {
    match cli.command {
        Command::Train {
            model,
            data,
            epochs,
            lr,
            wd,
            batch_size,
            quiet,
        } => {
            let report = cli::cmd_train(&TrainOptions {
                config: model.config,
                data: data.options(),
                out_dir: model.out_dir,
                grid_size: model.grid_size,
                train: TrainConfig {
                    learning_rate: lr,
                    weight_decay: wd,
                    batch_size,
                    epochs,
                    seed: data.seed,
                    grid_policy: model.policy,
                    loss: LossConfig {
                        lambda: model.lambda,
                        ..LossConfig::default()
                    },
                },
                verbose: !quiet,
            })?;
            if let Some(m) = &report.record.test {
                print_metrics(m);
            }
            println!("weights {}", report.weights_path.display());
            println!("runs {}", report.runs_path.display());
        }
        Command::Eval { weights, data } => print_metrics(&cli::cmd_eval(&weights, &data.options())?),
        Command::Gridsearch {
            model,
            data,
            budget,
            epochs,
            patience,
            threads,
        } => {
            let loss = LossConfig {
                lambda: model.lambda,
                ..LossConfig::default()
            };
            let report = cli::cmd_gridsearch(&SearchOptions {
                config: model.config,
                data: data.options(),
                out_dir: model.out_dir,
                grid_size: model.grid_size,
                search: cli::search_config(budget, data.seed, epochs, patience, threads, model.policy, loss),
            })?;
            for (i, r) in report.records.iter().enumerate() {
                let c = &r.config;
                let mark = if i == report.best { "*" } else { " " };
                println!(
                    "{mark} {:<6} lr {:<7} wd {:<7} batch {:<4} best epoch {:?}",
                    r.phase, c.learning_rate, c.weight_decay, c.batch_size, r.best_epoch
                );
            }
            if let Some(m) = report.records.last().and_then(|r| r.test.as_ref()) {
                print_metrics(m);
            }
            println!("weights {}", report.weights_path.display());
            println!("runs {}", report.runs_path.display());
        }
        Command::CountParams { config, grid_size } => print!("{}", cli::cmd_count_params(&config, grid_size)?),
        Command::ExportSplines {
            weights,
            layer,
            out,
            samples,
        } => cli::cmd_export_splines(&weights, layer, &out, samples)?,
        Command::Report { runs_dir, scatter } => {
            let report = cli::cmd_report(&runs_dir)?;
            print!("{}", report.table);
            let path = scatter.unwrap_or_else(|| runs_dir.join("params_vs_accuracy.csv"));
            std::fs::write(&path, &report.scatter)?;
            println!("scatter {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
