//! Command-line front end for the age-range pipeline.
//!
//! ```text
//! agerange [--config FILE] [--seed N] [--threads N] [--<key> VALUE ...] <command>
//!   detect   --input DIR [--output DIR]
//!   prepare  [--root DIR] [--manifest FILE]
//!   train    [--manifest FILE] [--out DIR]
//!   predict  [--manifest FILE [--split train|val|all] | --input DIR] [--head FILE] [--output FILE]
//!   evaluate [--predictions FILE] [--manifest FILE] [--out DIR]
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use agerange_core::data::Split;
use commands::PredictSource;
use config::{flag_name, PipelineConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<agerange_core::Error>() {
            if e.is_numeric() {
                return EXIT_NUMERIC;
            }
        }
    }
    EXIT_DATA
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

pub fn command() -> Command {
    let mut cmd = Command::new("agerange")
        .about("Age-range estimation: face extraction, head training, five-crop prediction, evaluation")
        .subcommand_required(true)
        .arg(path_arg("config", "key = value configuration file").global(true))
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .global(true)
                .help("Worker thread cap"),
        )
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true),
        );
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .global(true)
                .help(format!("Override configuration key {key}")),
        );
    }
    cmd.subcommand(
        Command::new("detect")
            .about("Extract face chips with the MTCNN cascade")
            .arg(path_arg("input", "Directory of images").required(true))
            .arg(path_arg("output", "Chip directory [default: <output_dir>/faces]")),
    )
    .subcommand(
        Command::new("prepare")
            .about("Ingest a class-per-directory tree and split it")
            .arg(path_arg("root", "Dataset root [default: dataset_root]"))
            .arg(path_arg("manifest", "Manifest to write [default: <output_dir>/manifest.tsv]")),
    )
    .subcommand(
        Command::new("train")
            .about("Train the classifier head on the frozen backbone")
            .arg(path_arg("manifest", "Split manifest [default: <output_dir>/manifest.tsv]"))
            .arg(path_arg("out", "Checkpoint directory [default: output_dir]")),
    )
    .subcommand(
        Command::new("predict")
            .about("Five-crop predictions")
            .arg(path_arg("manifest", "Predict the samples of a manifest"))
            .arg(
                Arg::new("split")
                    .long("split")
                    .value_parser(["train", "val", "all"])
                    .default_value("val"),
            )
            .arg(path_arg("input", "Predict every image under a directory").conflicts_with("manifest"))
            .arg(path_arg("head", "Head checkpoint [default: <output_dir>/head.cage]"))
            .arg(path_arg("output", "Prediction log [default: <output_dir>/predictions.tsv]")),
    )
    .subcommand(
        Command::new("evaluate")
            .about("Accuracy, confusion matrix and classification report")
            .arg(path_arg("predictions", "Prediction log [default: <output_dir>/predictions.tsv]"))
            .arg(path_arg("manifest", "Manifest with true labels [default: <output_dir>/manifest.tsv]"))
            .arg(path_arg("out", "Report directory [default: output_dir]")),
    )
}

/// Defaults, then the config file, then `--key value` overrides.
pub fn resolve_config(m: &ArgMatches) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("reading config {}: {e}", path.display())))?;
            PipelineConfig::from_text(&text)?
        }
        None => PipelineConfig::default(),
    };
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = resolve_config(m)?;
    let (name, sub) = m.subcommand().expect("subcommand required");
    let path = |key: &str| sub.get_one::<PathBuf>(key).cloned();
    let out = &cfg.output_dir;
    match name {
        "detect" => {
            let input = path("input").expect("required");
            let s = commands::cmd_detect(&cfg, &input, &path("output").unwrap_or_else(|| out.join("faces")))?;
            println!("{} image(s), {} face(s), {} skipped", s.images, s.detections, s.skipped);
        }
        "prepare" => {
            let root = path("root").unwrap_or_else(|| cfg.dataset_root.clone());
            let manifest = path("manifest").unwrap_or_else(|| out.join(commands::MANIFEST_FILE));
            let s = commands::cmd_prepare(&cfg, &root, &manifest)?;
            let counts = s.manifest.counts();
            let train: usize = counts.iter().map(|c| c[0]).sum();
            let val: usize = counts.iter().map(|c| c[1]).sum();
            println!("{} sample(s): {train} train, {val} val -> {}", s.manifest.len(), manifest.display());
        }
        "train" => {
            let manifest = path("manifest").unwrap_or_else(|| out.join(commands::MANIFEST_FILE));
            let s = commands::cmd_train(&cfg, &manifest, &path("out").unwrap_or_else(|| out.clone()))?;
            if let Some(last) = s.log.last() {
                println!("{}", last.to_line());
            }
        }
        "predict" => {
            let source = match path("input") {
                Some(dir) => PredictSource::Directory(dir),
                None => PredictSource::Manifest {
                    path: path("manifest").unwrap_or_else(|| out.join(commands::MANIFEST_FILE)),
                    split: match sub.get_one::<String>("split").map(String::as_str) {
                        Some("train") => Some(Split::Train),
                        Some("all") => None,
                        _ => Some(Split::Val),
                    },
                },
            };
            let head = path("head").unwrap_or_else(|| out.join(commands::HEAD_FILE));
            let output = path("output").unwrap_or_else(|| out.join(commands::PREDICTION_LOG));
            let b = commands::cmd_predict(&cfg, &source, &head, &output)?;
            println!("{} prediction(s), {} skipped", b.records.len(), b.skipped.len());
        }
        "evaluate" => {
            let s = commands::cmd_evaluate(
                &path("predictions").unwrap_or_else(|| out.join(commands::PREDICTION_LOG)),
                &path("manifest").unwrap_or_else(|| out.join(commands::MANIFEST_FILE)),
                &path("out").unwrap_or_else(|| out.clone()),
            )?;
            print!("{}", s.to_text());
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match m.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(&n) = m.get_one::<usize>("threads") {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&m) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
