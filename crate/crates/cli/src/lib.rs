//! The `segkit` command-line pipeline.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod index;

use std::fs;

use cli::{Cli, Command, ConfigCommand};
use config::RunConfig;
use error::{Classify, CliError, CliResult};

/// Loads the config file (or defaults) and applies the global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Preprocess(a) | Command::Detect(a) => {
            if let Some(d) = &a.dataset {
                cfg.dataset_root = d.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Preprocess(_) => commands::preprocess::run_preprocess(&cfg),
        Command::Detect(_) => commands::preprocess::run_detect(&cfg),
        Command::Train(a) => commands::train::run_train(&cfg, a),
        Command::Evaluate(a) => commands::evaluate::run_evaluate(&cfg, a),
        Command::Report(a) => commands::report::run_report(&cfg, a),
        Command::ExportSlices(a) => commands::export::run_export(&cfg, a),
        Command::Phantom(a) => commands::phantom::run_phantom(&cfg, a),
        Command::Config(ConfigCommand::Show) => {
            print!("{}", cfg.to_json());
            Ok(())
        }
        Command::Config(ConfigCommand::Init { path, force }) => {
            let text = RunConfig::default().to_json();
            match path {
                None => {
                    print!("{text}");
                    Ok(())
                }
                Some(p) if p.exists() && !force => Err(CliError::usage(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                ))),
                Some(p) => fs::write(p, text).or_data(format!("writing {}", p.display())),
            }
        }
    }
}
