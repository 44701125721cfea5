use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use segkit::unet::{train, write_history_csv, Checkpoint, EpochRecord, Sample, TrainPlan};

use crate::cli::TrainArgs;
use crate::config::RunConfig;
use crate::error::{Classify, CliError, CliResult};
use crate::index::{load_case, PreprocessedIndex};

pub const HISTORY_FILE: &str = "history.csv";

/// Writes through a temporary sibling so an interrupted write never leaves a
/// truncated file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn round_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round-{round:02}.aunc"))
}

fn round_index(plan: &TrainPlan, epoch: usize) -> usize {
    let mut end = 0;
    for (i, r) in plan.rounds.iter().enumerate() {
        end += r.epochs;
        if epoch <= end {
            return i + 1;
        }
    }
    plan.rounds.len()
}

fn latest_round_checkpoint(dir: &Path, plan: &TrainPlan) -> Option<PathBuf> {
    (1..=plan.rounds.len())
        .rev()
        .map(|r| round_path(dir, r))
        .find(|p| p.exists())
}

fn history_bytes(history: &[EpochRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_history_csv(history, &mut out).expect("writing to memory");
    out
}

pub fn run_train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let dir = cfg.preprocessed_dir();
    let index = PreprocessedIndex::load(&dir)?;
    let entries = index.select(args.split);
    if entries.is_empty() {
        return Err(CliError::usage(
            format!("no cases in the {:?} split", args.split).to_lowercase(),
        ));
    }
    cfg.model
        .check_input_dims(index.target_size)
        .or_usage("preprocessed size does not fit the model")?;
    let samples = entries
        .iter()
        .map(|e| {
            let c = load_case(&dir, e)?;
            Sample::new(c.image, c.labels, cfg.model.num_classes).or_data(format!("case {}", e.id))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let ckpt_dir = cfg.checkpoint_dir();
    fs::create_dir_all(&ckpt_dir).or_data(format!("creating {}", ckpt_dir.display()))?;
    let mut ckpt = match latest_round_checkpoint(&ckpt_dir, &cfg.plan).filter(|_| args.resume) {
        Some(path) => {
            let c = segkit::unet::load_checkpoint(&path)
                .or_data(format!("loading {}", path.display()))?;
            c.ensure_config(&cfg.model)
                .or_usage("checkpoint does not match the configured model")?;
            info!("resuming from {} at epoch {}", path.display(), c.epoch);
            c
        }
        None if args.resume => {
            return Err(CliError::usage(format!(
                "no round checkpoint in {}",
                ckpt_dir.display()
            )))
        }
        None => Checkpoint::initial(cfg.model).or_usage("model configuration")?,
    };
    if ckpt.epoch > cfg.plan.total_epochs() {
        return Err(CliError::usage(format!(
            "checkpoint is at epoch {} but the plan has {}",
            ckpt.epoch,
            cfg.plan.total_epochs()
        )));
    }

    info!(
        "training on {} cases, {} parameters, {} epochs",
        samples.len(),
        ckpt.model.num_parameters(),
        cfg.plan.total_epochs()
    );
    let history_path = cfg.output_dir.join(HISTORY_FILE);
    train(&mut ckpt, &samples, &cfg.plan, |c| {
        let round = round_index(&cfg.plan, c.epoch);
        let last = c.history.last().expect("round ends after an epoch");
        info!(
            "round {round} done at epoch {}: loss {:.4}",
            c.epoch, last.loss
        );
        write_atomic(&round_path(&ckpt_dir, round), &c.to_bytes())?;
        write_atomic(&history_path, &history_bytes(&c.history))?;
        Ok(())
    })
    .map_err(|e| match e {
        segkit::unet::TrainError::Hook(source) => {
            CliError::data(format!("saving round checkpoint: {source}"))
        }
        segkit::unet::TrainError::Sample { .. } | segkit::unet::TrainError::Shape(_) => {
            CliError::new(crate::error::ExitKind::Data, e)
        }
        other => CliError::new(crate::error::ExitKind::Internal, other),
    })?;

    write_atomic(&cfg.final_checkpoint(), &ckpt.to_bytes()).or_data("writing final checkpoint")?;
    write_atomic(&history_path, &history_bytes(&ckpt.history)).or_data("writing history")?;
    info!(
        "wrote {} and {}",
        cfg.final_checkpoint().display(),
        history_path.display()
    );
    Ok(())
}
