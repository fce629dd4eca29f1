use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use attrib_core::explain::{Explainer, Method};
use attrib_core::reference::{build_reference_model, ReferenceModel};
use attrib_eval::cifar::synthetic_cifar_batch;
use attrib_eval::config::validate_config;
use attrib_eval::error::{Error, Result};
use attrib_eval::harness::{run_evaluation, write_report};
use attrib_eval::manifest::{read_model, write_model};
use attrib_eval::single::{explain_single, load_image, pixel_shapley, resolve_target, shapley_to_csv, BaselineChoice};
use clap::{ArgGroup, Parser, Subcommand};
use log::{error, info, LevelFilter};

#[derive(Parser)]
#[command(name = "attrib-eval", version, about = "Attribution maps and their evaluation metrics")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured evaluation grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one attribution map as CSV and PGM.
    Explain {
        /// Model manifest.
        #[arg(long)]
        model: PathBuf,
        /// A binary PPM or PGM, or a CIFAR-10 batch file.
        #[arg(long)]
        image: PathBuf,
        /// Record to take from a CIFAR-10 batch.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        method: String,
        /// Class to explain; the predicted class when omitted.
        #[arg(long)]
        target: Option<usize>,
        /// Output prefix; `.csv` and `.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `image-mean`, `zero` or comma-separated channel values.
        #[arg(long, default_value = "image-mean", value_parser = BaselineChoice::parse)]
        baseline: BaselineChoice,
    },
    /// Print pixel Shapley values as `row,col,value,std_error`.
    #[command(group(ArgGroup::new("mode").required(true).args(["exact", "samples"])))]
    Shapley {
        #[arg(long)]
        model: PathBuf,
        /// A binary PPM or PGM, or a CIFAR-10 batch file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        target: Option<usize>,
        /// Enumerate every coalition (at most 20 pixels).
        #[arg(long)]
        exact: bool,
        /// Permutations to sample.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "image-mean", value_parser = BaselineChoice::parse)]
        baseline: BaselineChoice,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Save a built-in reference model as a manifest and weight blob.
    ExportModel {
        /// `TinyMLP-9` or `MiniCNN-32`.
        #[arg(long)]
        reference: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic batch in the CIFAR-10 binary layout.
    SynthCifar {
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        (false, _) => LevelFilter::Trace,
    };
    let style = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        env_logger::WriteStyle::Never
    } else {
        env_logger::WriteStyle::Auto
    };
    env_logger::Builder::new()
        .filter_level(level)
        .write_style(style)
        .format_timestamp(None)
        .init();
}

fn usage(message: String) -> Error {
    Error::Config(vec![attrib_eval::config::ConfigIssue { code: "usage", message }])
}

fn parse_method(name: &str) -> Result<Explainer> {
    Method::from_name(name)
        .map(Explainer::default_for)
        .ok_or_else(|| usage(format!("unknown method {name:?}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            workers,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| usage(format!("{}: {e}", config.display())))?;
            let base = config.parent().map(PathBuf::from).unwrap_or_default();
            let mut cfg = validate_config(&text, &base).map_err(Error::Config)?;
            if let Some(w) = workers {
                if w == 0 {
                    return Err(usage("--workers must be at least 1".into()));
                }
                cfg.workers = w;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let report = run_evaluation(&cfg)?;
            for path in write_report(&report, &cfg.output_dir)? {
                info!("wrote {}", path.display());
            }
            if report.over_budget() {
                return Err(Error::OverBudget {
                    failed: report.summary.failed_images,
                    total: report.summary.n_images * report.summary.models.len(),
                });
            }
            Ok(())
        }
        Command::Explain {
            model,
            image,
            index,
            method,
            target,
            out,
            seed,
            baseline,
        } => {
            let explainer = parse_method(&method)?;
            let model = read_model(&model)?;
            let image = load_image(&image, index)?;
            let target = resolve_target(&model, &image, target)?;
            let baseline = baseline.resolve(&image)?;
            let (_, paths) = explain_single(&model, &image, &explainer, &baseline, target, seed, &out)?;
            for p in paths {
                info!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Shapley {
            model,
            image,
            index,
            target,
            exact,
            samples,
            seed,
            baseline,
            out,
        } => {
            let model = read_model(&model)?;
            let image = load_image(&image, index)?;
            let target = resolve_target(&model, &image, target)?;
            let baseline = baseline.resolve(&image)?;
            let samples = if exact { None } else { samples };
            let estimate = pixel_shapley(&model, &image, &baseline, target, samples, seed)?;
            let text = shapley_to_csv(&estimate, model.input_shape()[2]);
            match out {
                Some(path) => fs::write(&path, text).map_err(|e| Error::Io { path, source: e }),
                None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                }),
            }
        }
        Command::ExportModel { reference, seed, out } => {
            let kind = ReferenceModel::from_name(&reference).map_err(|e| usage(e.to_string()))?;
            write_model(&out, &build_reference_model(kind, seed))?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::SynthCifar { count, seed, out } => {
            fs::write(&out, synthetic_cifar_batch(count, seed)).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            info!("wrote {count} images to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Error::Config(issues) = &e {
                for issue in issues {
                    error!("{issue}");
                }
            } else {
                error!("{e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
