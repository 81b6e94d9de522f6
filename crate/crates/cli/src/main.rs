use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slbf::analyzer::{network_report, ArchSpec, ReportOptions, SelectorCost};
use slbf::data::{load_mnist_dir, LabeledDataset, MnistFiles, Normalization};
use slbf::model_io::{self, parse_config, ExperimentConfig};
use slbf::train::{evaluate, metrics_file, train, METRICS_HEADER};
use slbf::{exec, Error, Fraction};

/// Train, evaluate, analyze and export networks built from stacked
/// low-dimensional binary filters.
///
/// Exit codes: 0 ok, 2 config, 3 data, 4 divergence, 5 model, 6 I/O.
#[derive(Parser, Debug)]
#[command(name = "slbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "SLBF_DATA_DIR")]
    data: PathBuf,
    #[arg(long, default_value = "train-images-idx3-ubyte")]
    train_images: String,
    #[arg(long, default_value = "train-labels-idx1-ubyte")]
    train_labels: String,
    #[arg(long, default_value = "t10k-images-idx3-ubyte")]
    test_images: String,
    #[arg(long, default_value = "t10k-labels-idx1-ubyte")]
    test_labels: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write the frozen model.
    Train {
        /// Config file path or shipped preset name.
        #[arg(long)]
        config: String,
        #[command(flatten)]
        data: DataArgs,
        /// Model output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics (tab-separated: epoch, train_loss, test_acc).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on the first N training images only.
        #[arg(long)]
        train_limit: Option<usize>,
        /// Evaluate on the first N test images only.
        #[arg(long)]
        test_limit: Option<usize>,
        /// Fixed-order reductions: identical results on every run, slower.
        #[arg(long)]
        deterministic: bool,
    },
    /// Print the test-set size and top-1 accuracy of a model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Memory and FLOP report for an architecture.
    Analyze {
        /// Built-in name (lenet5, vgg16, resnet18) or descriptor file.
        #[arg(long)]
        arch: String,
        /// Default f1 for SLBF layers, as a fraction such as 1/2.
        #[arg(long)]
        f1: Fraction,
        /// Default f2 for SLBF layers.
        #[arg(long)]
        f2: Fraction,
        /// Selectors without scaling factors (bitmap storage).
        #[arg(long)]
        no_scaling: bool,
        #[arg(long, value_enum, default_value_t = CostArg::Triplet)]
        selector_cost: CostArg,
        /// Also write the report as CSV records.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Re-export a model file.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Native)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CostArg {
    Triplet,
    Packed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Native,
    Report,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, e: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const DIVERGENCE: u8 = 4;
const MODEL: u8 = 5;
const IO: u8 = 6;

fn with(code: u8) -> impl Fn(Error) -> Failure {
    move |e| match e {
        Error::Divergence(_) => Failure::new(DIVERGENCE, e),
        _ => Failure::new(code, e),
    }
}

fn load_config(arg: &str) -> Result<ExperimentConfig, Failure> {
    let path = Path::new(arg);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", path.display())))?
    } else if let Some(text) = model_io::preset(arg) {
        text.to_string()
    } else {
        return Err(Failure::new(
            CONFIG,
            format!("config {arg}: no such file or preset"),
        ));
    };
    parse_config(&text).map_err(|e| Failure::new(CONFIG, format!("{arg}: {e}")))
}

fn load_data(args: &DataArgs) -> Result<(LabeledDataset, LabeledDataset), Failure> {
    let files = MnistFiles {
        train_images: args.train_images.clone(),
        train_labels: args.train_labels.clone(),
        test_images: args.test_images.clone(),
        test_labels: args.test_labels.clone(),
    };
    load_mnist_dir(&args.data, &files, Normalization::default()).map_err(with(DATA))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

fn limit(ds: LabeledDataset, n: Option<usize>) -> LabeledDataset {
    match n {
        Some(n) => ds.take(n),
        None => ds,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            metrics,
            seed,
            epochs,
            train_limit,
            test_limit,
            deterministic,
        } => {
            exec::set_deterministic(deterministic);
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (train_set, test_set) = load_data(&data)?;
            let train_set = limit(train_set, train_limit);
            let test_set = limit(test_set, test_limit);
            println!("{METRICS_HEADER}");
            let (mut net, log) = train(&cfg.network, &train_set, Some(&test_set), &cfg.train, |m| {
                println!("{}", m.record())
            })
            .map_err(with(DATA))?;
            if let Some(path) = &metrics {
                write(path, metrics_file(&log).as_bytes())?;
            }
            net.freeze().map_err(with(DIVERGENCE))?;
            let bytes = model_io::save(&net).map_err(with(MODEL))?;
            write(&out, &bytes)?;
            if let Some(acc) = log.last().and_then(|m| m.test_acc) {
                println!("final test accuracy: {acc:.4}");
            }
            Ok(())
        }
        Command::Eval {
            model,
            data,
            test_limit,
            deterministic,
        } => {
            exec::set_deterministic(deterministic);
            let net = model_io::load_file(&model).map_err(with(MODEL))?;
            let (_, test_set) = load_data(&data)?;
            let test_set = limit(test_set, test_limit);
            let acc = evaluate(&net, &test_set, 1000).map_err(with(DATA))?;
            println!("examples: {}", test_set.len());
            println!("accuracy: {acc:.4}");
            Ok(())
        }
        Command::Analyze {
            arch,
            f1,
            f2,
            no_scaling,
            selector_cost,
            records,
        } => {
            let spec = match ArchSpec::builtin(&arch) {
                Some(a) => a,
                None if Path::new(&arch).exists() => ArchSpec::from_file(Path::new(&arch)).map_err(with(CONFIG))?,
                None => {
                    return Err(Failure::new(
                        CONFIG,
                        format!(
                            "unknown architecture {arch:?} (built-in: {})",
                            ArchSpec::builtin_names().join(", ")
                        ),
                    ))
                }
            };
            let opts = ReportOptions {
                selector_cost: match selector_cost {
                    CostArg::Triplet => SelectorCost::Triplet,
                    CostArg::Packed => SelectorCost::Packed,
                },
                ..ReportOptions::uniform(f1, f2, !no_scaling)
            };
            let report = network_report(&spec, &opts).map_err(with(CONFIG))?;
            print!("{}", report.table());
            if let Some(path) = records {
                write(&path, report.records().as_bytes())?;
            }
            Ok(())
        }
        Command::Export { model, out, format } => {
            let net = model_io::load_file(&model).map_err(with(MODEL))?;
            let bytes = match format {
                Format::Native => model_io::save(&net).map_err(with(MODEL))?,
                Format::Report => model_io::report(&net).into_bytes(),
            };
            write(&out, &bytes)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
