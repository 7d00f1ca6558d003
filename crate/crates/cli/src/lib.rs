//! The `ccr` command line: argument parsing, exit codes and the commands.

pub mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use ccr_core::config::{RunConfig, KEYS};
use ccr_core::error::{CcrError, ErrorCategory};
use clap::{Arg, ArgMatches, Command};

/// Relative manifest and vocabulary paths resolve against this directory.
pub const DATA_ROOT_ENV: &str = "CCR_DATA_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

pub fn cli() -> Command {
    let mut cmd = Command::new("ccr")
        .about("Weakly supervised video moment localization with counterfactual cross-modality reasoning")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value configuration file; flags override its entries"),
        );
    for (key, default, doc) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .global(true)
                .value_name("VALUE")
                .help(format!("{doc} [config key {key}, default {default:?}]")),
        );
    }
    cmd.subcommand(Command::new("synth").about("Write a synthetic corpus: manifest, vocabulary and feature files"))
        .subcommand(Command::new("train").about("Train a model and write its checkpoint and loss log"))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint, or a prediction file, against the manifest")
                .arg(
                    Arg::new("predictions")
                        .long("predictions")
                        .value_name("FILE")
                        .help("score this prediction file instead of running the model"),
                ),
        )
        .subcommand(
            Command::new("localize")
                .about("Rank moments of one video for one query")
                .arg(Arg::new("features").long("features").required(true).value_name("FMAT"))
                .arg(Arg::new("query").long("query").required(true).value_name("TEXT"))
                .arg(
                    Arg::new("duration")
                        .long("duration")
                        .value_name("SECONDS")
                        .help("video length; defaults to one second per frame"),
                ),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate every counterfactual strategy and aggregator combination"),
        )
}

/// Defaults, then the config file, then flags; finally the data root.
pub fn resolve_config(m: &ArgMatches, data_root: Option<PathBuf>) -> Result<RunConfig, CcrError> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(path.as_ref())?,
        None => RunConfig::default(),
    };
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(root) = data_root {
        cfg = cfg.with_data_root(&root);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<CcrError>() {
        return match e.category() {
            ErrorCategory::Config => EXIT_CONFIG,
            ErrorCategory::Data => EXIT_DATA,
            ErrorCategory::Numerical => EXIT_NUMERICAL,
        };
    }
    if err.downcast_ref::<clap::Error>().is_some() {
        return EXIT_CONFIG;
    }
    EXIT_DATA
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match dispatch(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(m: &ArgMatches) -> anyhow::Result<()> {
    let data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub, data_root)?;
    match name {
        "synth" => {
            let manifest = commands::synth(&cfg)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        "train" => {
            let outcome = commands::train(&cfg)?;
            if let Some(r) = outcome.reports.last() {
                println!("step {} loss {:.6} mu {:.6}", r.step + 1, r.losses.total, r.mu);
            }
            println!("checkpoint {}", cfg.checkpoint_path().display());
            Ok(())
        }
        "eval" => {
            let preds = sub.get_one::<String>("predictions").map(PathBuf::from);
            let report = commands::eval(&cfg, preds.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
        "localize" => {
            let features = PathBuf::from(sub.get_one::<String>("features").expect("required"));
            let query = sub.get_one::<String>("query").expect("required");
            let duration = sub
                .get_one::<String>("duration")
                .map(|d| d.parse::<f64>())
                .transpose()
                .map_err(|e| CcrError::Config(format!("--duration: {e}")))?;
            let pred = commands::localize(&cfg, &features, query, duration)?;
            println!("{}", serde_json::to_string_pretty(&pred)?);
            Ok(())
        }
        "ablate" => {
            let grid = commands::ablate(&cfg)?;
            print!("{}", commands::ablation_table(&grid));
            Ok(())
        }
        other => unreachable!("unknown subcommand {other}"),
    }
}
