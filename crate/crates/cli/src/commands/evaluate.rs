use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use segkit::metrics::{
    aggregate, evaluate_case, mean_row, soft_dice, CaseReport, MetricRow, Region, CSV_HEADER,
    MEAN_ROW,
};
use segkit::unet::load_checkpoint;
use segkit::volume::one_hot;

use crate::cli::EvaluateArgs;
use crate::commands::preprocess::pool;
use crate::config::RunConfig;
use crate::error::{Classify, CliError, CliResult};
use crate::index::{load_case, PreprocessedIndex};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
/// Case column value for the equal-weight mean over cases.
pub const MACRO_CASE: &str = "macro";
/// Case column value for metrics computed from counts summed over cases.
pub const POOLED_CASE: &str = "pooled";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    /// Mean foreground soft dice of the predicted probabilities.
    pub soft_dice: f64,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub case: String,
    pub region: String,
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub split: String,
    pub cases: Vec<CaseMetrics>,
    pub mean_soft_dice: f64,
    pub macro_rows: Vec<MetricRow>,
    pub pooled_rows: Vec<MetricRow>,
    pub undefined: Vec<UndefinedMetric>,
}

fn pooled(cases: &[CaseReport]) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = Region::ALL
        .iter()
        .map(|r| {
            let counts = cases
                .iter()
                .filter_map(|c| c.rows.iter().find(|row| row.region == r.name()))
                .fold(Default::default(), |acc, row| acc + row.counts);
            MetricRow::from_counts(r.name(), counts)
        })
        .collect();
    let refs: Vec<&MetricRow> = rows.iter().collect();
    let mean = mean_row(MEAN_ROW, &refs);
    rows.push(mean);
    rows
}

pub fn summarize(split: &str, cases: Vec<CaseMetrics>) -> MetricsSummary {
    let reports: Vec<CaseReport> = cases
        .iter()
        .map(|c| CaseReport {
            case: c.case.clone(),
            rows: c.rows.clone(),
        })
        .collect();
    let mut undefined = Vec::new();
    for c in &cases {
        for r in &c.rows {
            let names = r.undefined();
            if !names.is_empty() {
                undefined.push(UndefinedMetric {
                    case: c.case.clone(),
                    region: r.region.clone(),
                    metrics: names.into_iter().map(String::from).collect(),
                });
            }
        }
    }
    MetricsSummary {
        split: split.to_string(),
        mean_soft_dice: cases.iter().map(|c| c.soft_dice).sum::<f64>() / cases.len().max(1) as f64,
        macro_rows: aggregate(&reports),
        pooled_rows: pooled(&reports),
        cases,
        undefined,
    }
}

pub fn write_metrics_csv(summary: &MetricsSummary, path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).or_data(format!("writing {}", path.display()))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for c in &summary.cases {
        rows.extend(c.rows.iter().map(|r| r.csv_fields(&c.case)));
    }
    rows.extend(summary.macro_rows.iter().map(|r| r.csv_fields(MACRO_CASE)));
    rows.extend(
        summary
            .pooled_rows
            .iter()
            .map(|r| r.csv_fields(POOLED_CASE)),
    );
    w.write_record(CSV_HEADER).or_data("writing metrics")?;
    for r in rows {
        w.write_record(&r).or_data("writing metrics")?;
    }
    w.flush().or_data("writing metrics")
}

pub fn run_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<()> {
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.final_checkpoint());
    let ckpt = load_checkpoint(&ckpt_path)
        .or_usage(format!("loading checkpoint {}", ckpt_path.display()))?;
    let dir = cfg.preprocessed_dir();
    let index = PreprocessedIndex::load(&dir)?;
    let split = format!("{:?}", args.split).to_lowercase();
    let entries = index.select(args.split);
    if entries.is_empty() {
        return Err(CliError::usage(format!("no cases in the {split} split")));
    }
    let model_cfg = *ckpt.model.config();
    model_cfg
        .check_input_dims(index.target_size)
        .or_data("preprocessed data does not fit the checkpoint")?;
    info!(
        "evaluating {} on {} {split} cases",
        ckpt_path.display(),
        entries.len()
    );

    let cases: Vec<CaseMetrics> = pool(cfg.threads)?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let c = load_case(&dir, e)?;
                let [d, h, w] = c.labels.dims();
                if c.image.shape()[0] != model_cfg.in_channels {
                    return Err(CliError::data(format!(
                        "case {}: {} channels, checkpoint expects {}",
                        c.id,
                        c.image.shape()[0],
                        model_cfg.in_channels
                    )));
                }
                let batch = c
                    .image
                    .reshape(vec![1, model_cfg.in_channels, d, h, w])
                    .or_internal("reshape")?;
                let probs = ckpt
                    .model
                    .forward(&batch)
                    .or_data(format!("case {}", c.id))?;
                let target =
                    one_hot(&c.labels, model_cfg.num_classes).or_data(format!("case {}", c.id))?;
                let target = target
                    .reshape(probs.shape().to_vec())
                    .or_internal("reshape")?;
                let soft = soft_dice(&probs, &target).or_internal("soft dice")?;
                let report = evaluate_case(&c.id, &probs, &c.labels).or_internal("metrics")?;
                Ok(CaseMetrics {
                    case: c.id,
                    soft_dice: soft,
                    rows: report.rows,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let summary = summarize(&split, cases);
    fs::create_dir_all(&cfg.output_dir).or_data("creating output directory")?;
    write_metrics_csv(&summary, &cfg.output_dir.join(METRICS_CSV))?;
    let json = serde_json::to_string_pretty(&summary).or_internal("serializing metrics")? + "\n";
    let json_path = cfg.output_dir.join(METRICS_JSON);
    fs::write(&json_path, json).or_data(format!("writing {}", json_path.display()))?;
    for row in &summary.macro_rows {
        info!(
            "{:>4}: dice {}  sensitivity {}  specificity {}",
            row.region,
            fmt_opt(row.dice),
            fmt_opt(row.sensitivity),
            fmt_opt(row.specificity)
        );
    }
    if !summary.undefined.is_empty() {
        info!(
            "{} rows have undefined metrics; see {}",
            summary.undefined.len(),
            json_path.display()
        );
    }
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}
